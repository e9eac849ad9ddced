//! Saves a briefly trained network and restores it with identical eval logits.

use std::collections::BTreeMap;

use mdl_core::checkpoint;
use mdl_core::synth::{ClipSamplerConfig, FrameGeometry, GeneratorKind, SyntheticDomain, SyntheticSampler};
use mdl_core::tensor::Tape;
use mdl_core::trainer::{train, DomainSampler, TrainSchedule};
use mdl_core::{AdapterKind, DomainId, DomainSpec, InsertionConfig, MdlNetwork, Mode, NetworkConfig, ToyBackboneConfig};

fn main() -> mdl_core::Result<()> {
    let domain = SyntheticDomain {
        id: 1,
        name: "patterns".into(),
        kind: GeneratorKind::SpatialPatterns,
        num_classes: 4,
        train_size: 32,
        val_size: 8,
        geometry: FrameGeometry {
            frames: 8,
            channels: 3,
            height: 12,
            width: 12,
        },
        seed: 3,
        style: 0,
        noise: None,
    };
    let clips = ClipSamplerConfig {
        window_frames: 8,
        clip_len: 4,
        resize_range: (10, 12),
        crop_size: 10,
        ..Default::default()
    };
    let mut net = MdlNetwork::<f32>::new(NetworkConfig {
        backbone: ToyBackboneConfig::default(),
        adapter_kind: AdapterKind::Framewise2D,
        insertion: InsertionConfig::Early(2),
        trainable_base: true,
        domains: vec![DomainSpec::new(1, "patterns", 4)],
        seed: 5,
        shared_bn_stats: false,
    })?;
    let mut samplers: Vec<Box<dyn DomainSampler<f32>>> = vec![Box::new(SyntheticSampler::new(domain.clone(), clips, 5)?)];
    let sched = TrainSchedule {
        total_iterations: 10,
        batch_size: 4,
        lr0: 0.05,
        lr_drop_points: vec![],
        ..Default::default()
    };
    train(&mut net, &sched, &mut samplers, None)?;

    let path = std::env::temp_dir().join("mdl-example.ckpt");
    checkpoint::save(&net, &BTreeMap::from([("note".into(), "example".into())]), &path)?;
    let (mut back, header) = checkpoint::load::<f32>(&path)?;
    println!("{} tensors, {} bytes", header.tensors.len(), std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0));

    let mut batch = samplers[0].next_batch(2)?;
    batch.clips = batch.clips.with_requires_grad(false);
    let logits = |n: &mut MdlNetwork<f32>| -> mdl_core::Result<Vec<f32>> {
        let mut tape = Tape::new();
        let y = n.forward(&mut tape, &batch.clips, DomainId::new(1), Mode::Eval)?;
        Ok(tape.value(y).to_vec())
    };
    println!("eval logits identical after reload: {}", logits(&mut net)? == logits(&mut back)?);
    Ok(())
}
