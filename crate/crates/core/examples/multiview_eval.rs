//! Thirty-view evaluation of one synthetic clip: 10 temporal windows times
//! 3 spatial crops, scores averaged after softmax.

use mdl_core::synth::{multiview_predict, sample_eval_views, ClipSamplerConfig, GeneratorKind, Split, SyntheticDomain};
use mdl_core::{AdapterKind, DomainId, DomainSpec, InsertionConfig, MdlNetwork, NetworkConfig, ToyBackboneConfig};

fn main() -> mdl_core::Result<()> {
    let domain = SyntheticDomain {
        id: 1,
        name: "motion".into(),
        kind: GeneratorKind::TemporalMotion,
        num_classes: 4,
        train_size: 8,
        val_size: 8,
        geometry: Default::default(),
        seed: 7,
        style: 0,
        noise: None,
    };
    let clips = ClipSamplerConfig::default();
    let (raw, label) = domain.item(Split::Val, 0)?;
    let views = sample_eval_views::<f32>(&raw, &clips)?;
    println!("raw clip {}x{}x{}, {} views of shape {:?}", raw.frames, raw.height, raw.width, views.len(), views[0].shape());

    let mut net = MdlNetwork::<f32>::new(NetworkConfig {
        backbone: ToyBackboneConfig::default(),
        adapter_kind: AdapterKind::SeparableST,
        insertion: InsertionConfig::All,
        trainable_base: true,
        domains: vec![DomainSpec::new(1, "motion", 4)],
        seed: 1,
        shared_bn_stats: false,
    })?;
    let scores = multiview_predict(&mut net, &views, DomainId::new(1))?;
    println!("label {label}, untrained scores {scores:.3?}");
    Ok(())
}
