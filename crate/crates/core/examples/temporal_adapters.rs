//! Frame-wise backbone on a motion-only domain: 2D adapters cannot see frame
//! order, (2+1)D adapters can.

use std::time::Instant;

use mdl_core::synth::{evaluate_top1, ClipSamplerConfig, FrameGeometry, GeneratorKind, SyntheticDomain, SyntheticSampler};
use mdl_core::trainer::{train, DomainSampler, TrainSchedule};
use mdl_core::{AdapterKind, DomainSpec, InsertionConfig, MdlNetwork, NetworkConfig, ToyBackboneConfig};

fn run(kind: AdapterKind, seed: u64, updates: usize) -> mdl_core::Result<f64> {
    let geometry = FrameGeometry {
        frames: 16,
        channels: 3,
        height: 16,
        width: 16,
    };
    let domains = [
        SyntheticDomain {
            id: 1,
            name: "motion".into(),
            kind: GeneratorKind::TemporalMotion,
            num_classes: 4,
            train_size: 400,
            val_size: 80,
            geometry,
            seed: 100 + seed,
            style: 0,
            noise: None,
        },
        SyntheticDomain {
            id: 2,
            name: "patterns".into(),
            kind: GeneratorKind::SpatialPatterns,
            num_classes: 4,
            train_size: 400,
            val_size: 80,
            geometry,
            seed: 200 + seed,
            style: 0,
            noise: None,
        },
    ];
    let clips = ClipSamplerConfig {
        window_frames: 16,
        clip_len: 8,
        resize_range: (12, 16),
        crop_size: 12,
        eval_temporal_views: 2,
        ..Default::default()
    };
    let mut net = MdlNetwork::<f32>::new(NetworkConfig {
        backbone: ToyBackboneConfig {
            temporal_kernel: 1,
            ..Default::default()
        },
        adapter_kind: kind,
        insertion: InsertionConfig::All,
        trainable_base: true,
        domains: domains
            .iter()
            .map(|d| DomainSpec::new(d.id, d.name.clone(), d.num_classes))
            .collect(),
        seed,
        shared_bn_stats: false,
    })?;
    let mut samplers: Vec<Box<dyn DomainSampler<f32>>> = domains
        .iter()
        .map(|d| SyntheticSampler::new(d.clone(), clips.clone(), seed).map(|s| Box::new(s) as Box<_>))
        .collect::<Result<_, _>>()?;
    let sched = TrainSchedule {
        total_iterations: updates,
        batch_size: 8,
        lr0: 0.05,
        lr_drop_points: vec![updates * 3 / 4],
        ..Default::default()
    };
    train(&mut net, &sched, &mut samplers, None)?;
    evaluate_top1(&mut net, &domains[0], &clips, None)
}

fn main() -> mdl_core::Result<()> {
    let updates = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(300);
    for seed in 0..3 {
        for kind in [AdapterKind::Framewise2D, AdapterKind::SeparableST] {
            let t0 = Instant::now();
            let acc = run(kind, seed, updates)?;
            println!(
                "seed {seed} {:>7} adapters: motion top-1 {:5.1}%  ({:.0}s)",
                kind.label(),
                100.0 * acc,
                t0.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
