//! Joint training on three synthetic domains with (2+1)D adapters, then
//! multi-view evaluation of each domain.

use std::time::Instant;

use mdl_core::synth::{evaluate_top1, ClipSamplerConfig, FrameGeometry, GeneratorKind, SyntheticDomain, SyntheticSampler};
use mdl_core::trainer::{train, DomainSampler, TrainSchedule};
use mdl_core::{AdapterKind, DomainSpec, InsertionConfig, MdlNetwork, NetworkConfig, ToyBackboneConfig};

fn main() -> mdl_core::Result<()> {
    let geometry = FrameGeometry {
        frames: 16,
        channels: 3,
        height: 16,
        width: 16,
    };
    let kinds = [
        (GeneratorKind::SpatialPatterns, 4),
        (GeneratorKind::TemporalMotion, 4),
        (GeneratorKind::MixedStyle, 4),
    ];
    let domains: Vec<SyntheticDomain> = kinds
        .iter()
        .enumerate()
        .map(|(i, &(kind, n))| SyntheticDomain {
            id: i + 1,
            name: format!("{kind:?}"),
            kind,
            num_classes: n,
            train_size: 200,
            val_size: 40,
            geometry,
            seed: 11 + i as u64,
            style: i as u64,
            noise: None,
        })
        .collect();
    let clips = ClipSamplerConfig {
        window_frames: 16,
        clip_len: 8,
        resize_range: (12, 16),
        crop_size: 12,
        eval_temporal_views: 2,
        ..Default::default()
    };
    let mut net = MdlNetwork::<f32>::new(NetworkConfig {
        backbone: ToyBackboneConfig::default(),
        adapter_kind: AdapterKind::SeparableST,
        insertion: InsertionConfig::All,
        trainable_base: true,
        domains: domains
            .iter()
            .map(|d| DomainSpec::new(d.id, d.name.clone(), d.num_classes))
            .collect(),
        seed: 7,
        shared_bn_stats: false,
    })?;
    let mut samplers: Vec<Box<dyn DomainSampler<f32>>> = domains
        .iter()
        .map(|d| SyntheticSampler::new(d.clone(), clips.clone(), 3).map(|s| Box::new(s) as Box<_>))
        .collect::<Result<_, _>>()?;
    let sched = TrainSchedule {
        total_iterations: std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(60),
        batch_size: 8,
        lr0: 0.05,
        lr_drop_points: vec![45],
        ..Default::default()
    };
    let t0 = Instant::now();
    let record = train(&mut net, &sched, &mut samplers, None)?;
    let secs = t0.elapsed().as_secs_f64();
    println!("{} updates in {secs:.1}s ({:.0} ms/update)", sched.total_iterations, 1e3 * secs / sched.total_iterations as f64);
    for d in &domains {
        let losses = record.losses(d.id);
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
        let acc = evaluate_top1(&mut net, d, &clips, None)?;
        println!("domain {} {:<16} loss {head:.3} -> {tail:.3}  val top-1 {:.1}%", d.id, d.name, 100.0 * acc);
    }
    Ok(())
}
