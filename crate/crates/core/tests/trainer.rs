mod common;

use mdl_core::synth::{ClipSamplerConfig, FrameGeometry, GeneratorKind, SyntheticDomain, SyntheticSampler};
use mdl_core::tensor::{HasParams, ParamTag, Tensor};
use mdl_core::trainer::{
    accumulate, accumulate_and_step, backward_batch, domain_cycle, lr_at, train, DomainBatch, DomainSampler,
    RunRecord, SgdMomentum, TrainSchedule,
};
use mdl_core::{
    AdapterKind, DomainId, DomainSpec, Error, InsertionConfig, MdlNetwork, NetworkConfig, ToyBackboneConfig,
};
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Random clips with uniformly drawn labels.
struct NoiseSampler {
    id: usize,
    items: usize,
    classes: usize,
    rng: ChaCha8Rng,
}

impl NoiseSampler {
    fn boxed(id: usize, items: usize, classes: usize) -> Box<dyn DomainSampler<f64>> {
        Box::new(NoiseSampler {
            id,
            items,
            classes,
            rng: common::rng(id as u64),
        })
    }
}

impl DomainSampler<f64> for NoiseSampler {
    fn domain_id(&self) -> DomainId {
        DomainId::new(self.id)
    }

    fn len(&self) -> usize {
        self.items
    }

    fn next_batch(&mut self, batch_size: usize) -> mdl_core::Result<DomainBatch<f64>> {
        use rand::Rng;
        let clips = common::random(&[batch_size, 2, 3, 5, 5], &mut self.rng);
        let labels = (0..batch_size).map(|_| self.rng.gen_range(0..self.classes)).collect();
        DomainBatch::new(clips, labels, DomainId::new(self.id))
    }
}

fn tiny_backbone() -> ToyBackboneConfig {
    ToyBackboneConfig {
        widths: vec![3, 4, 4],
        feature_width: 6,
        ..Default::default()
    }
}

fn net(domains: usize, trainable_base: bool) -> MdlNetwork<f64> {
    MdlNetwork::new(NetworkConfig {
        backbone: tiny_backbone(),
        adapter_kind: AdapterKind::SeparableST,
        insertion: InsertionConfig::All,
        trainable_base,
        domains: (1..=domains).map(|d| DomainSpec::new(d, format!("d{d}"), 3)).collect(),
        seed: 9,
        shared_bn_stats: false,
    })
    .unwrap()
}

fn sched(updates: usize) -> TrainSchedule {
    TrainSchedule {
        total_iterations: updates,
        batch_size: 3,
        lr0: 0.05,
        lr_drop_points: vec![],
        ..Default::default()
    }
}

fn cycle_batches(domains: usize, seed: u64) -> Vec<DomainBatch<f64>> {
    let mut r = common::rng(seed);
    (1..=domains)
        .map(|d| {
            let clips = common::random(&[2, 2, 3, 5, 5], &mut r);
            DomainBatch::new(clips, vec![d % 3, (d + 1) % 3], DomainId::new(d)).unwrap()
        })
        .collect()
}

#[test]
fn cycle_visits_domains_in_turn() {
    let mut samplers = vec![NoiseSampler::boxed(1, 5, 3), NoiseSampler::boxed(2, 5, 3), NoiseSampler::boxed(3, 5, 3)];
    let s = sched(0);
    let ids: Vec<usize> = domain_cycle(&s, &mut samplers)
        .unwrap()
        .take(6)
        .map(|b| b.unwrap().domain.get())
        .collect();
    assert_eq!(ids, vec![1, 2, 3, 1, 2, 3]);

    let mut single = vec![NoiseSampler::boxed(4, 5, 3)];
    assert!(domain_cycle(&s, &mut single)
        .unwrap()
        .take(5)
        .all(|b| b.unwrap().domain.get() == 4));
}

#[test]
fn cycle_is_uniform_over_domains_not_samples() {
    let mut samplers = vec![NoiseSampler::boxed(1, 10, 3), NoiseSampler::boxed(2, 1000, 3)];
    let mut counts = [0usize; 2];
    for b in domain_cycle(&sched(0), &mut samplers).unwrap().take(100) {
        counts[b.unwrap().domain.get() - 1] += 1;
    }
    assert_eq!(counts, [50, 50]);
}

#[test]
fn cycle_follows_configured_order_and_rejects_bad_datasets() {
    let mut samplers = vec![NoiseSampler::boxed(1, 5, 3), NoiseSampler::boxed(2, 5, 3)];
    let s = TrainSchedule {
        domain_order: vec![DomainId::new(2), DomainId::new(1)],
        ..sched(0)
    };
    let ids: Vec<usize> = domain_cycle(&s, &mut samplers).unwrap().take(4).map(|b| b.unwrap().domain.get()).collect();
    assert_eq!(ids, vec![2, 1, 2, 1]);

    let mut empty = vec![NoiseSampler::boxed(1, 0, 3)];
    assert!(matches!(domain_cycle(&sched(0), &mut empty), Err(Error::Config(_))));
    let missing = TrainSchedule {
        domain_order: vec![DomainId::new(3)],
        ..sched(0)
    };
    assert!(matches!(domain_cycle(&missing, &mut samplers), Err(Error::Config(_))));
}

#[test]
fn accumulated_gradient_is_sum_of_isolated_gradients() {
    let base = net(3, true);
    let batches = cycle_batches(3, 1);
    let mut joint = base.clone();
    accumulate(&mut joint, &batches, 0).unwrap();
    let mut expected: Vec<Option<Vec<f64>>> = vec![None; base.params().len()];
    for b in &batches {
        let mut alone = base.clone();
        backward_batch(&mut alone, b, 0).unwrap();
        for (id, p) in alone.params().iter() {
            if let Some(g) = p.tensor.grad() {
                let e = expected[id.index()].get_or_insert_with(|| vec![0.0; g.len()]);
                e.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }
    let mut checked = 0;
    for (id, p) in joint.params().iter() {
        match (p.tensor.grad(), &expected[id.index()]) {
            (Some(g), Some(e)) => {
                for (a, b) in g.iter().zip(e) {
                    let scale = a.abs().max(b.abs()).max(1e-300);
                    assert!((a - b).abs() <= 1e-12 * scale, "{}: {a} vs {b}", p.name);
                }
                checked += 1;
            }
            (None, None) => {}
            _ => panic!("gradient presence differs for {}", p.name),
        }
    }
    assert!(checked > 0);
}

#[test]
fn parameters_change_only_at_cycle_boundaries() {
    let mut n = net(3, true);
    let batches = cycle_batches(3, 2);
    let mut opt = SgdMomentum::new(0.9);
    let start = n.params().fingerprint();
    for b in &batches {
        backward_batch(&mut n, b, 0).unwrap();
        assert_eq!(n.params().fingerprint(), start);
    }
    n.params_mut().zero_grad();
    accumulate_and_step(&mut n, &mut opt, &batches, 0.01, 0).unwrap();
    let after_one = n.params().fingerprint();
    assert_ne!(after_one, start);
    accumulate_and_step(&mut n, &mut opt, &cycle_batches(3, 3), 0.01, 1).unwrap();
    assert_ne!(n.params().fingerprint(), after_one);
    assert_eq!(opt.updates(), 2);
}

#[test]
fn plain_sgd_without_momentum() {
    let base = net(1, true);
    let batches = cycle_batches(1, 4);
    let mut probe = base.clone();
    backward_batch(&mut probe, &batches[0], 0).unwrap();
    let mut stepped = base.clone();
    let mut opt = SgdMomentum::new(0.0);
    accumulate_and_step(&mut stepped, &mut opt, &batches, 0.1, 0).unwrap();
    for ((_, before), ((_, g), (_, after))) in base
        .params()
        .iter()
        .zip(probe.params().iter().zip(stepped.params().iter()))
    {
        match g.tensor.grad() {
            Some(g) => {
                for ((&p0, &gi), &p1) in before.tensor.data().iter().zip(g).zip(after.tensor.data()) {
                    assert_eq!(p1, p0 - 0.1 * gi);
                }
            }
            None => assert_eq!(before.tensor.data(), after.tensor.data()),
        }
        assert!(after.tensor.grad().is_none(), "gradients cleared after the step");
    }
}

#[test]
fn zero_gradients_leave_parameters_and_decay_velocity() {
    let mut n = net(1, true);
    let mut opt = SgdMomentum::new(0.9);
    let ids: Vec<_> = n.params().ids().collect();
    for &id in &ids {
        let len = n.params().tensor(id).numel();
        n.params_mut().tensor_mut(id).accumulate_grad(&vec![0.0; len]);
    }
    let before = n.params().fingerprint();
    opt.step(n.params_mut(), 0.5);
    assert_eq!(n.params().fingerprint(), before);
    assert!(ids.iter().all(|id| opt.velocity(id.index()).unwrap().iter().all(|&v| v == 0.0)));

    // one real step, then a zero-gradient step scales every velocity by mu
    let id = ids[0];
    let len = n.params().tensor(id).numel();
    n.params_mut().tensor_mut(id).accumulate_grad(&vec![1.0; len]);
    opt.step(n.params_mut(), 0.5);
    let v1 = opt.velocity(id.index()).unwrap().to_vec();
    n.params_mut().tensor_mut(id).accumulate_grad(&vec![0.0; len]);
    opt.step(n.params_mut(), 0.5);
    let v2 = opt.velocity(id.index()).unwrap();
    assert!(v1.iter().zip(v2).all(|(a, b)| *b == 0.9 * a));
}

#[test]
fn nan_loss_names_domain_and_update() {
    let mut n = net(2, true);
    let mut batches = cycle_batches(2, 5);
    let mut poisoned = batches[1].clips.clone();
    poisoned.data_mut()[3] = f64::NAN;
    batches[1] = DomainBatch::new(poisoned, batches[1].labels.clone(), DomainId::new(2)).unwrap();
    let before = n.params().fingerprint();
    let mut opt = SgdMomentum::new(0.9);
    let err = accumulate_and_step(&mut n, &mut opt, &batches, 0.1, 17).unwrap_err();
    assert!(matches!(err, Error::NanLoss { domain: 2, update: 17 }), "{err}");
    assert!(err.to_string().contains("domain 2") && err.to_string().contains("17"));
    assert_eq!(n.params().fingerprint(), before);
}

#[test]
fn zero_iterations_change_nothing() {
    let mut n = net(2, true);
    let before = n.params().fingerprint();
    let mut samplers = vec![NoiseSampler::boxed(1, 5, 3), NoiseSampler::boxed(2, 5, 3)];
    let record = train(&mut n, &sched(0), &mut samplers, None).unwrap();
    assert!(record.rows.is_empty());
    assert_eq!(n.params().fingerprint(), before);
}

fn synthetic_samplers(seed: u64) -> (Vec<SyntheticDomain>, Vec<Box<dyn DomainSampler<f64>>>) {
    let g = FrameGeometry {
        frames: 4,
        channels: 3,
        height: 6,
        width: 6,
    };
    let kinds = [GeneratorKind::SpatialPatterns, GeneratorKind::MixedStyle, GeneratorKind::TemporalMotion];
    let domains: Vec<SyntheticDomain> = kinds
        .iter()
        .enumerate()
        .map(|(i, &kind)| SyntheticDomain {
            id: i + 1,
            name: format!("{kind:?}"),
            kind,
            num_classes: 3,
            train_size: 60,
            val_size: 12,
            geometry: g,
            seed: seed + i as u64,
            style: i as u64,
            noise: None,
        })
        .collect();
    let clips = ClipSamplerConfig {
        window_frames: 4,
        clip_len: 4,
        resize_range: (5, 6),
        crop_size: 5,
        ..Default::default()
    };
    let samplers = domains
        .iter()
        .map(|d| Box::new(SyntheticSampler::new(d.clone(), clips.clone(), seed).unwrap()) as Box<dyn DomainSampler<f64>>)
        .collect();
    (domains, samplers)
}

#[test]
fn toy_run_reduces_every_domain_loss() {
    let mut n = net(3, true);
    let (domains, mut samplers) = synthetic_samplers(1);
    let s = TrainSchedule {
        total_iterations: 500,
        batch_size: 4,
        lr0: 0.05,
        lr_drop_points: vec![400],
        ..Default::default()
    };
    let record = train(&mut n, &s, &mut samplers, None).unwrap();
    assert_eq!(record.rows.len(), 1500);
    for d in &domains {
        let losses = record.losses(d.id);
        let tail = losses[losses.len() - 25..].iter().sum::<f64>() / 25.0;
        assert!(tail < losses[0], "domain {}: {} -> {tail}", d.id, losses[0]);
    }
    for u in 0..s.total_iterations {
        let rows: Vec<_> = record.rows.iter().filter(|r| r.update_index == u).collect();
        assert_eq!(rows.iter().map(|r| r.domain_id).collect::<Vec<_>>(), vec![1, 2, 3]);
        let total: f64 = rows.iter().map(|r| r.loss).sum();
        assert!((record.cycle_loss(u) - total).abs() < 1e-12);
    }
    assert!(record.rows.windows(2).all(|w| w[1].lr <= w[0].lr));
}

#[test]
fn cycle_loss_matches_isolated_batch_losses() {
    let base = net(3, true);
    let batches = cycle_batches(3, 6);
    let isolated: f64 = batches
        .iter()
        .map(|b| backward_batch(&mut base.clone(), b, 0).unwrap())
        .sum();
    let mut n = base.clone();
    let mut opt = SgdMomentum::new(0.9);
    let losses = accumulate_and_step(&mut n, &mut opt, &batches, 0.01, 0).unwrap();
    let logged: f64 = losses.iter().map(|(_, l)| l).sum();
    assert!((logged - isolated).abs() <= 1e-12 * isolated.abs());
}

#[test]
fn same_seed_gives_same_record() {
    let run = || {
        let mut n = net(3, true);
        let (_, mut samplers) = synthetic_samplers(7);
        let mut hook = |net: &mut MdlNetwork<f64>, _u: usize| -> mdl_core::Result<Vec<(DomainId, f64)>> {
            Ok(vec![(DomainId::new(1), net.params().len() as f64)])
        };
        let s = TrainSchedule {
            eval_every: 2,
            ..sched(5)
        };
        let record = train(&mut n, &s, &mut samplers, Some(&mut hook)).unwrap();
        (record, n.params().fingerprint())
    };
    let (a, fa) = run();
    let (b, fb) = run();
    assert!(a.same_trajectory(&b));
    assert_eq!(fa, fb);
    let evals: Vec<usize> = a.rows.iter().filter(|r| r.val_top1.is_some()).map(|r| r.update_index).collect();
    assert_eq!(evals, vec![1, 3, 4]);
}

#[test]
fn frozen_backbone_stays_bit_identical() {
    for trainable in [false, true] {
        let mut n = net(2, trainable);
        let base = n.params().fingerprint_tag(ParamTag::Base);
        let adapters = n.params().fingerprint_tag(ParamTag::Adapter);
        let heads = n.params().fingerprint_tag(ParamTag::Head);
        let mut samplers = vec![NoiseSampler::boxed(1, 5, 3), NoiseSampler::boxed(2, 5, 3)];
        train(&mut n, &sched(3), &mut samplers, None).unwrap();
        assert_eq!(n.params().fingerprint_tag(ParamTag::Base) == base, !trainable);
        assert_ne!(n.params().fingerprint_tag(ParamTag::Adapter), adapters);
        assert_ne!(n.params().fingerprint_tag(ParamTag::Head), heads);
    }
}

#[test]
fn run_record_round_trips() {
    let mut n = net(2, true);
    let mut samplers = vec![NoiseSampler::boxed(1, 5, 3), NoiseSampler::boxed(2, 5, 3)];
    let mut record = train(&mut n, &sched(3), &mut samplers, None).unwrap();
    record.rows[1].val_top1 = Some(0.5);
    let back = RunRecord::from_jsonl(&record.to_jsonl().unwrap()).unwrap();
    assert_eq!(back, record);
    let csv = record.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "update_index,domain_id,loss,lr,wall_ms,val_top1");
    assert_eq!(lines.count(), 6);
    let dir = tempfile::tempdir().unwrap();
    record.write(dir.path(), "run").unwrap();
    assert!(dir.path().join("run.csv").exists() && dir.path().join("run.jsonl").exists());
}

#[test]
fn batch_shape_must_match_labels() {
    let clips = Tensor::<f64>::zeros(&[2, 1, 1, 2, 2]);
    assert!(DomainBatch::new(clips, vec![0], DomainId::new(1)).is_err());
}

proptest! {
    #[test]
    fn lr_is_monotone_and_piecewise_constant(
        mut drops in proptest::collection::btree_set(1usize..5000, 0..4),
        factor in 0.01f64..1.0,
        a in 0usize..6000,
        b in 0usize..6000,
    ) {
        let s = TrainSchedule {
            lr_drop_points: std::mem::take(&mut drops).into_iter().collect(),
            lr_drop_factor: factor,
            ..Default::default()
        };
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(lr_at(hi, &s) <= lr_at(lo, &s));
        let passed = s.lr_drop_points.iter().filter(|&&p| p <= hi).count();
        prop_assert_eq!(lr_at(hi, &s), s.lr0 * factor.powi(passed as i32));
    }
}
