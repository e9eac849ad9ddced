//! The full finite-difference suite: every differentiable op, the adapter
//! block and the end-to-end network loss, each on several random shapes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{AdapterBlock, AdapterKind};
use crate::backbone::ToyBackboneConfig;
use crate::error::Result;
use crate::network::{DomainId, DomainSpec, InsertionConfig, MdlNetwork, NetworkConfig};
use crate::nn::{self, LayerNorm, Mode};
use crate::tensor::{
    finite_diff_check, finite_diff_check_params, ops, GradCheckOptions, GradCheckReport, HasParams, ParamStore,
    ParamTag, Tape, Tensor, Var,
};

/// Clip shapes `(B, T, C, H, W)` every op is checked on.
pub const SHAPES: [[usize; 5]; 3] = [[1, 2, 2, 3, 3], [2, 3, 3, 4, 2], [2, 1, 2, 5, 4]];

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub shape: Vec<usize>,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub cases: Vec<SuiteCase>,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.report.passed)
    }

    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max)
    }

    /// Names of the distinct checks and how many shapes each passed.
    pub fn summary(&self) -> Vec<(String, usize, usize)> {
        let mut out: Vec<(String, usize, usize)> = Vec::new();
        for c in &self.cases {
            match out.iter_mut().find(|(n, _, _)| *n == c.name) {
                Some(row) => {
                    row.1 += c.report.passed as usize;
                    row.2 += 1;
                }
                None => out.push((c.name.clone(), c.report.passed as usize, 1)),
            }
        }
        out
    }
}

/// Weighted sum with fixed random weights so every output coordinate matters.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let c = tape.constant(&shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())?;
    let m = ops::mul(tape, y, c)?;
    ops::sum(tape, m)
}

fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

pub fn run(opts: &GradCheckOptions) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut cases = Vec::new();
    let mut r = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut push = |name: &str, shape: &[usize], report: GradCheckReport| {
        cases.push(SuiteCase {
            name: name.into(),
            shape: shape.to_vec(),
            report,
        })
    };

    for (i, s) in SHAPES.iter().enumerate() {
        let seed = i as u64;
        let c = s[2];
        for (name, k, stride) in [
            ("conv 1x3x3", (1, 3, 3), 1),
            ("conv 3x3x3", (3, 3, 3), 1),
            ("conv 3x1x1", (3, 1, 1), 1),
            ("conv 3x3x3 stride 2", (3, 3, 3), 2),
        ] {
            let x = random(s, &mut r);
            let w = random(&[2, c, k.0, k.1, k.2], &mut r);
            let rep = finite_diff_check(
                |t, v| {
                    let y = nn::conv3d(t, v[0], v[1], stride)?;
                    probe(t, y, seed)
                },
                &[x, w],
                opts,
            )?;
            push(name, s, rep);
        }

        let x = random(s, &mut r);
        let g = Tensor::uniform(&[c], 0.5, 1.5, &mut r);
        let b = random(&[c], &mut r);
        let affine = [x.clone(), g, b];
        let rep = finite_diff_check(
            |t, v| {
                let (y, _) = nn::batch_norm_train(t, v[0], v[1], v[2], nn::BN_EPS)?;
                probe(t, y, seed)
            },
            &affine,
            opts,
        )?;
        push("batch norm (train)", s, rep);
        let mean: Vec<f64> = (0..c).map(|k| 0.1 * k as f64).collect();
        let var: Vec<f64> = (0..c).map(|k| 0.5 + k as f64).collect();
        let rep = finite_diff_check(
            |t, v| {
                let y = nn::batch_norm_eval(t, v[0], v[1], v[2], &mean, &var, nn::BN_EPS)?;
                probe(t, y, seed)
            },
            &affine,
            opts,
        )?;
        push("batch norm (eval)", s, rep);
        let rep = finite_diff_check(
            |t, v| {
                let y = nn::layer_norm(t, v[0], v[1], v[2], nn::LN_EPS)?;
                probe(t, y, seed)
            },
            &affine,
            opts,
        )?;
        push("layer norm", s, rep);

        let rep = finite_diff_check(
            |t, v| {
                let y = nn::global_avg_pool(t, v[0])?;
                probe(t, y, seed)
            },
            &[x.clone()],
            opts,
        )?;
        push("global average pool", s, rep);

        let (bs, f, n) = (s[0] + 1, c + 2, s[3]);
        let labels: Vec<usize> = (0..bs).map(|k| k % n).collect();
        let inputs = [random(&[bs, f], &mut r), random(&[n, f], &mut r), random(&[n], &mut r)];
        let rep = finite_diff_check(
            |t, v| {
                let z = nn::linear(t, v[0], v[1], v[2])?;
                nn::softmax_cross_entropy(t, z, &labels)
            },
            &inputs,
            opts,
        )?;
        push("linear + softmax cross-entropy", s, rep);

        let rep = finite_diff_check(
            |t, v| {
                let p = ops::mul(t, v[0], v[1])?;
                let q = ops::add(t, p, v[0])?;
                let q = ops::scale(t, q, -1.7)?;
                let y = ops::relu(t, q)?;
                probe(t, y, seed)
            },
            &[x, random(s, &mut r)],
            opts,
        )?;
        push("mul/add/scale/relu", s, rep);

        for kind in AdapterKind::ALL {
            let mut store = ParamStore::<f64>::new();
            let ln = LayerNorm::init(&mut store, "ln", ParamTag::PostNorm, c)?;
            let mut blk = AdapterBlock::init(&mut store, "a", kind, c, &mut r)?;
            store.tensor_mut(blk.bn.gamma).data_mut().fill(0.9);
            store.tensor_mut(ln.gamma).data_mut().fill(1.1);
            // positive features keep the skip path away from ReLU's kink
            let f = Tensor::uniform(s, 0.5, 1.5, &mut r);
            let rep = finite_diff_check_params(
                &mut store,
                |st, tape| {
                    let fv = tape.input(&f);
                    let out = blk.forward(tape, st, fv, &ln, Mode::Train)?;
                    probe(tape, out, seed)
                },
                opts,
            )?;
            push(&format!("adapter block {}", kind.label()), s, rep);
        }
    }

    for (i, clip) in [[2, 3, 2, 6, 6], [3, 2, 2, 5, 4], [2, 4, 2, 4, 5]].iter().enumerate() {
        for kind in AdapterKind::ALL {
            let mut net = MdlNetwork::<f64>::new(NetworkConfig {
                backbone: ToyBackboneConfig {
                    in_channels: 2,
                    widths: vec![2, 3, 3, 2],
                    feature_width: 4,
                    temporal_kernel: 3,
                },
                adapter_kind: kind,
                insertion: InsertionConfig::All,
                trainable_base: true,
                domains: vec![DomainSpec::new(1, "a", 3), DomainSpec::new(2, "b", 4)],
                seed: opts.seed + i as u64,
                shared_bn_stats: false,
            })?;
            let ids: Vec<_> = net
                .params()
                .iter()
                .filter(|(_, p)| p.tag == ParamTag::Adapter && p.name.ends_with("bn/gamma"))
                .map(|(id, _)| id)
                .collect();
            for id in ids {
                net.params_mut().tensor_mut(id).data_mut().fill(0.6);
            }
            let x = random(clip, &mut r);
            let labels: Vec<usize> = (0..clip[0]).map(|k| (k + i) % 4).collect();
            let rep = finite_diff_check_params(
                &mut net,
                |n, tape| {
                    let y = n.forward(tape, &x, DomainId::new(2), Mode::Train)?;
                    nn::softmax_cross_entropy(tape, y, &labels)
                },
                opts,
            )?;
            push(&format!("network loss, {} adapters", kind.label()), clip, rep);
        }
    }
    Ok(SuiteResult {
        cases,
        seconds: start.elapsed().as_secs_f64(),
    })
}
