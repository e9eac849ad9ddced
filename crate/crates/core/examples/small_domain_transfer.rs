//! A 200-clip domain trained alone versus jointly with a 5000-clip domain,
//! with the same number of updates on the small domain.

use mdl_core::synth::{evaluate_top1, ClipSamplerConfig, FrameGeometry, GeneratorKind, SyntheticDomain, SyntheticSampler};
use mdl_core::trainer::{train, DomainSampler, TrainSchedule};
use mdl_core::{AdapterKind, DomainSpec, InsertionConfig, MdlNetwork, NetworkConfig, ToyBackboneConfig};

fn run(domains: &[SyntheticDomain], seed: u64, updates: usize, lr0: f64) -> mdl_core::Result<f64> {
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
        lr0,
        lr_drop_points: vec![updates * 3 / 4],
        ..Default::default()
    };
    train(&mut net, &sched, &mut samplers, None)?;
    evaluate_top1(&mut net, &domains[0], &clips, None)
}

fn main() -> mdl_core::Result<()> {
    let arg = |i: usize, default: f64| std::env::args().nth(i).and_then(|a| a.parse().ok()).unwrap_or(default);
    let updates = arg(1, 400.0) as usize;
    let noise = arg(2, 1.5);
    let lr0 = arg(3, 0.02);
    let small_classes = arg(4, 8.0) as usize;
    let geometry = FrameGeometry {
        frames: 16,
        channels: 3,
        height: 16,
        width: 16,
    };
    let mut small_sum = (0.0, 0.0);
    for seed in 0..3 {
        let small = SyntheticDomain {
            id: 1,
            name: "small".into(),
            kind: GeneratorKind::SpatialPatterns,
            num_classes: small_classes,
            train_size: 200,
            val_size: 160,
            geometry,
            seed: 10 + seed,
            style: 1,
            noise: Some(noise),
        };
        let large = SyntheticDomain {
            id: 2,
            name: "large".into(),
            kind: GeneratorKind::SpatialPatterns,
            num_classes: small_classes,
            train_size: 5000,
            val_size: 80,
            geometry,
            seed: 20 + seed,
            style: 2,
            noise: Some(noise),
        };
        let alone = run(std::slice::from_ref(&small), seed, updates, lr0)?;
        let joint = run(&[small, large], seed, updates, lr0)?;
        println!("seed {seed}: small domain alone {:5.1}%  joint {:5.1}%", 100.0 * alone, 100.0 * joint);
        small_sum.0 += alone / 3.0;
        small_sum.1 += joint / 3.0;
    }
    println!("mean: alone {:5.1}%  joint {:5.1}%", 100.0 * small_sum.0, 100.0 * small_sum.1);
    Ok(())
}
