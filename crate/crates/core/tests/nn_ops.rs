mod common;

use common::*;
use mdl_core::nn::{self, Mode};
use mdl_core::tensor::{finite_diff_check, ops, Tape, Tensor};
use mdl_core::Error;

fn run_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (xv, wv) = (tape.input(x), tape.input(w));
    let y = nn::conv3d(&mut tape, xv, wv, stride).unwrap();
    tape.to_tensor(y)
}

fn identity_kernel(c: usize, kt: usize, kh: usize, kw: usize) -> Tensor<f64> {
    let mut w = Tensor::zeros(&[c, c, kt, kh, kw]);
    for i in 0..c {
        let off = w.offset(&[i, i, kt / 2, kh / 2, kw / 2]);
        w.data_mut()[off] = 1.0;
    }
    w
}

#[test]
fn framewise_identity_and_zero_kernels() {
    let mut r = rng(1);
    let x = random(&[2, 3, 2, 5, 4], &mut r);
    let mut tape = Tape::new();
    let xv = tape.input(&x);
    let id = tape.input(&identity_kernel(2, 1, 3, 3));
    let y = nn::conv_framewise_2d(&mut tape, xv, id).unwrap();
    assert_eq!(tape.value(y), x.data());
    let zero = tape.input(&Tensor::zeros(&[3, 2, 1, 3, 3]));
    let y = nn::conv_framewise_2d(&mut tape, xv, zero).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 0.0));
    assert_eq!(tape.shape(y), &[2, 3, 3, 5, 4]);
}

#[test]
fn framewise_matches_oracle() {
    let mut r = rng(2);
    let x = random(&[1, 2, 2, 4, 4], &mut r);
    let w = random(&[2, 2, 1, 3, 3], &mut r);
    let fast = run_conv(&x, &w, 1);
    assert!(max_abs_diff(fast.data(), conv_oracle(&x, &w, 1).data()) <= 1e-12);
}

#[test]
fn conv3d_identity_kernel() {
    let mut r = rng(3);
    let x = random(&[1, 4, 3, 5, 5], &mut r);
    let y = run_conv(&x, &identity_kernel(3, 3, 3, 3), 1);
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv3d_on_temporally_constant_input() {
    // interior frames of a 3x3x3 box filter equal 3x the 3x3 frame-wise box filter
    let mut r = rng(4);
    let frame = random(&[1, 1, 1, 5, 5], &mut r);
    let t = 5;
    let x = Tensor::from_fn(&[1, t, 1, 5, 5], |i| frame.data()[i % 25]);
    let box3 = Tensor::full(&[1, 1, 3, 3, 3], 1.0 / 27.0);
    let box2 = Tensor::full(&[1, 1, 1, 3, 3], 1.0 / 27.0);
    let full = run_conv(&x, &box3, 1);
    let fw = run_conv(&x, &box2, 1);
    for ti in 0..t {
        let factor = if ti == 0 || ti == t - 1 { 2.0 } else { 3.0 };
        for i in 0..25 {
            let a = full.data()[ti * 25 + i];
            let b = factor * fw.data()[ti * 25 + i];
            assert!((a - b).abs() < 1e-14, "frame {ti}: {a} vs {b}");
        }
    }
}

#[test]
fn conv_paths_match_oracle_on_random_shapes() {
    let mut r = rng(5);
    let kernels = [(1, 3, 3), (3, 3, 3), (3, 1, 1), (1, 1, 1), (3, 1, 3)];
    for trial in 0..12 {
        use rand::Rng;
        let shape = [
            r.gen_range(1..=2),
            r.gen_range(1..=4),
            r.gen_range(1..=4),
            r.gen_range(1..=6),
            r.gen_range(1..=6),
        ];
        let co = r.gen_range(1..=4);
        let (kt, kh, kw) = kernels[trial % kernels.len()];
        let stride = if trial % 3 == 2 { 2 } else { 1 };
        let x = random(&shape, &mut r);
        let w = random(&[co, shape[2], kt, kh, kw], &mut r);
        let fast = run_conv(&x, &w, stride);
        let slow = conv_oracle(&x, &w, stride);
        assert_eq!(fast.shape(), slow.shape());
        let err = max_abs_diff(fast.data(), slow.data());
        assert!(err <= 1e-12, "trial {trial} {shape:?} k={kt}{kh}{kw} s={stride}: {err}");
    }
}

#[test]
fn temporal_identity_and_single_frame() {
    let mut r = rng(6);
    let x = random(&[2, 4, 2, 3, 3], &mut r);
    assert_eq!(run_conv(&x, &identity_kernel(2, 3, 1, 1), 1).data(), x.data());

    let x1 = random(&[1, 1, 1, 3, 3], &mut r);
    let w = Tensor::new(&[1, 1, 3, 1, 1], vec![0.7, -1.3, 0.2]).unwrap();
    let y = run_conv(&x1, &w, 1);
    for (a, b) in y.data().iter().zip(x1.data()) {
        assert_eq!(*a, -1.3 * b);
    }
}

#[test]
fn temporal_matches_oracle() {
    let mut r = rng(7);
    let x = random(&[2, 5, 3, 2, 3], &mut r);
    let w = random(&[3, 3, 3, 1, 1], &mut r);
    assert!(max_abs_diff(run_conv(&x, &w, 1).data(), conv_oracle(&x, &w, 1).data()) <= 1e-12);
}

#[test]
fn kind_checks_name_the_op() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(&Tensor::zeros(&[1, 2, 2, 3, 3]));
    let w3 = tape.input(&Tensor::zeros(&[2, 2, 3, 3, 3]));
    let err = nn::conv_framewise_2d(&mut tape, x, w3).unwrap_err();
    assert!(err.to_string().contains("conv_framewise_2d"));
    let err = nn::conv_temporal_1d(&mut tape, x, w3).unwrap_err();
    assert!(err.to_string().contains("conv_temporal_1d"));
    let wbad = tape.input(&Tensor::zeros(&[2, 3, 1, 3, 3]));
    let err = nn::conv_framewise_2d(&mut tape, x, wbad).unwrap_err();
    assert!(matches!(err, Error::Dimension { op: "conv_framewise_2d", .. }), "{err}");
    assert!(err.to_string().contains("channels"));
}

#[test]
fn frame_independence_is_exact() {
    let mut r = rng(8);
    let x = random(&[1, 4, 2, 4, 4], &mut r);
    let w = random(&[2, 2, 1, 3, 3], &mut r);
    let base = run_conv(&x, &w, 1);
    let mut x2 = x.clone();
    let plane = 2 * 16;
    for v in &mut x2.data_mut()[plane..2 * plane] {
        *v += 10.0;
    }
    let pert = run_conv(&x2, &w, 1);
    for t in [0, 2, 3] {
        assert_eq!(
            base.data()[t * plane..(t + 1) * plane],
            pert.data()[t * plane..(t + 1) * plane]
        );
    }
    assert_ne!(base.data()[plane..2 * plane], pert.data()[plane..2 * plane]);
}

#[test]
fn spatial_independence_of_temporal_conv() {
    let mut r = rng(9);
    let x = random(&[1, 3, 2, 3, 3], &mut r);
    let w = random(&[2, 2, 3, 1, 1], &mut r);
    let base = run_conv(&x, &w, 1);
    let mut x2 = x.clone();
    // perturb pixel (1,2) in every frame and channel
    for t in 0..3 {
        for c in 0..2 {
            let off = x2.offset(&[0, t, c, 1, 2]);
            x2.data_mut()[off] -= 3.0;
        }
    }
    let pert = run_conv(&x2, &w, 1);
    for t in 0..3 {
        for c in 0..2 {
            for h in 0..3 {
                for wi in 0..3 {
                    let i = base.offset(&[0, t, c, h, wi]);
                    if (h, wi) == (1, 2) {
                        assert_ne!(base.data()[i], pert.data()[i]);
                    } else {
                        assert_eq!(base.data()[i], pert.data()[i]);
                    }
                }
            }
        }
    }
}

fn channel_stats(y: &[f64], dims: [usize; 5], ch: usize) -> (f64, f64) {
    let [b, t, c, h, w] = dims;
    let hw = h * w;
    let mut vals = Vec::new();
    for bt in 0..b * t {
        let off = (bt * c + ch) * hw;
        vals.extend_from_slice(&y[off..off + hw]);
    }
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    (m, vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n)
}

#[test]
fn batch_norm_train_standardises_channels() {
    let mut r = rng(10);
    let dims = [2, 3, 3, 4, 4];
    let x = Tensor::from_fn(&dims, |i| 5.0 + 3.0 * ((i * 7919) % 101) as f64 / 101.0);
    let mut tape = Tape::new();
    let xv = tape.input(&x);
    let g = tape.input(&Tensor::ones(&[3]));
    let b = tape.input(&Tensor::zeros(&[3]));
    let (y, stats) = nn::batch_norm_train(&mut tape, xv, g, b, 1e-5).unwrap();
    assert_eq!(stats.count, 2 * 3 * 16);
    for ch in 0..3 {
        let (m, v) = channel_stats(tape.value(y), dims, ch);
        assert!(m.abs() < 1e-12);
        let expected = stats.var[ch] / (stats.var[ch] + 1e-5);
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
        assert!((v - 1.0).abs() < 1e-3);
    }
    let zg = tape.input(&Tensor::zeros(&[3]));
    let x2 = tape.input(&random(&dims, &mut r));
    let (y0, _) = nn::batch_norm_train(&mut tape, x2, zg, b, 1e-5).unwrap();
    assert!(tape.value(y0).iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_single_element_channel_outputs_beta() {
    let mut tape = Tape::new();
    let x = tape.input(&Tensor::new(&[1, 1, 2, 1, 1], vec![3.5, -7.0]).unwrap());
    let g = tape.input(&Tensor::new(&[2], vec![2.0, 0.5]).unwrap());
    let b = tape.input(&Tensor::new(&[2], vec![0.25, -1.0]).unwrap());
    let (y, _) = nn::batch_norm_train(&mut tape, x, g, b, 1e-5).unwrap();
    assert_eq!(tape.value(y), &[0.25, -1.0]);
}

#[test]
fn batch_norm_eval_is_deterministic_affine() {
    let mut r = rng(11);
    let x = random(&[2, 2, 2, 3, 3], &mut r);
    let run = || {
        let mut tape = Tape::new();
        let xv = tape.input(&x);
        let g = tape.input(&Tensor::new(&[2], vec![1.5, -0.5]).unwrap());
        let b = tape.input(&Tensor::new(&[2], vec![0.1, 0.2]).unwrap());
        let y = nn::batch_norm_eval(&mut tape, xv, g, b, &[0.3, -0.2], &[2.0, 0.5], 1e-5).unwrap();
        tape.to_tensor(y)
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let expect = 1.5 * (x.data()[0] - 0.3) / (2.0f64 + 1e-5).sqrt() + 0.1;
    assert!((a.data()[0] - expect).abs() < 1e-15);
}

#[test]
fn layer_norm_slices_and_invariances() {
    let mut r = rng(12);
    let dims = [2, 3, 2, 3, 3];
    let x = random(&dims, &mut r);
    let run = |x: &Tensor<f64>| {
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let g = tape.input(&Tensor::ones(&[2]));
        let b = tape.input(&Tensor::zeros(&[2]));
        let y = nn::layer_norm(&mut tape, xv, g, b, 1e-5).unwrap();
        tape.to_tensor(y)
    };
    let y = run(&x);
    for slice in y.data().chunks(18) {
        let m = slice.iter().sum::<f64>() / 18.0;
        let v = slice.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 18.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-3);
    }
    let shifted = Tensor::from_fn(&dims, |i| x.data()[i] + 4.25);
    assert!(max_abs_diff(run(&shifted).data(), y.data()) < 1e-9);

    let mut tape = Tape::new();
    let xv = tape.input(&Tensor::full(&dims, 2.0));
    let g = tape.input(&Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
    let b = tape.input(&Tensor::new(&[2], vec![-0.5, 0.75]).unwrap());
    let yc = nn::layer_norm(&mut tape, xv, g, b, 1e-5).unwrap();
    for (i, &v) in tape.value(yc).iter().enumerate() {
        let ch = (i / 9) % 2;
        assert_eq!(v, [-0.5, 0.75][ch]);
    }
}

#[test]
fn linear_cases() {
    let mut tape = Tape::new();
    let x = tape.input(&Tensor::new(&[1, 2], vec![3.0, 5.0]).unwrap());
    let w = tape.input(&Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = tape.input(&Tensor::zeros(&[2]));
    let y = nn::linear(&mut tape, x, w, b).unwrap();
    assert_eq!(tape.value(y), &[3.0, 5.0]);
    let w0 = tape.input(&Tensor::zeros(&[4, 2]));
    let b0 = tape.input(&Tensor::zeros(&[4]));
    let y0 = nn::linear(&mut tape, x, w0, b0).unwrap();
    assert_eq!(tape.value(y0), &[0.0; 4]);
    let wbad = tape.input(&Tensor::zeros(&[4, 3]));
    assert!(matches!(nn::linear(&mut tape, x, wbad, b0), Err(Error::Dimension { op: "linear", .. })));

    let mut r = rng(13);
    let (xr, wr) = (random(&[3, 5], &mut r), random(&[4, 5], &mut r));
    let br = random(&[4], &mut r);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.input(&xr), tape.input(&wr), tape.input(&br));
    let y = nn::linear(&mut tape, xv, wv, bv).unwrap();
    assert!(max_abs_diff(tape.value(y), &linear_oracle(&xr, &wr, br.data())) < 1e-14);
}

#[test]
fn cross_entropy_cases() {
    let mut tape = Tape::<f64>::new();
    let z = tape.input(&Tensor::zeros(&[2, 51]));
    let l = nn::softmax_cross_entropy(&mut tape, z, &[0, 50]).unwrap();
    assert!((tape.scalar(l).unwrap() - 51f64.ln()).abs() < 1e-14);
    assert!((51f64.ln() - 3.9318).abs() < 1e-4);

    let mut prev = f64::INFINITY;
    for margin in [0.0, 1.0, 5.0, 20.0, 50.0] {
        let mut tape = Tape::new();
        let z = tape.input(&Tensor::new(&[1, 3], vec![margin, 0.0, 0.0]).unwrap());
        let lv = nn::softmax_cross_entropy(&mut tape, z, &[0]).unwrap();
        let l = tape.scalar(lv).unwrap();
        assert!(l < prev);
        prev = l;
    }
    assert!(prev < 1e-20);

    let mut r = rng(14);
    let logits = Tensor::uniform(&[4, 7], -30.0, 30.0, &mut r);
    let labels = [0, 3, 6, 2];
    let mut tape = Tape::new();
    let z = tape.input(&logits);
    let lv = nn::softmax_cross_entropy(&mut tape, z, &labels).unwrap();
    let l = tape.scalar(lv).unwrap();
    let o = xent_oracle(logits.data(), &labels, 7);
    assert!((l - o).abs() <= 1e-12 * o.abs().max(1.0), "{l} vs {o}");

    let z = tape.input(&Tensor::zeros(&[1, 3]));
    assert!(matches!(nn::softmax_cross_entropy(&mut tape, z, &[3]), Err(Error::Contract(_))));
}

const SHAPES: [[usize; 5]; 3] = [[1, 2, 2, 3, 3], [2, 3, 3, 4, 2], [2, 1, 2, 5, 4]];

#[test]
fn gradcheck_convolutions() {
    let mut r = rng(20);
    for (i, s) in SHAPES.iter().enumerate() {
        for (k, stride) in [((1, 3, 3), 1), ((3, 3, 3), 1), ((3, 1, 1), 1), ((3, 3, 3), 2)] {
            let x = random(s, &mut r);
            let w = random(&[2, s[2], k.0, k.1, k.2], &mut r);
            let rep = finite_diff_check(
                |t, v| {
                    let y = nn::conv3d(t, v[0], v[1], stride)?;
                    probe(t, y, i as u64)
                },
                &[x, w],
                &strict(),
            )
            .unwrap();
            assert!(rep.passed, "{s:?} {k:?}: {rep:?}");
        }
    }
}

#[test]
fn gradcheck_norms() {
    let mut r = rng(21);
    for (i, s) in SHAPES.iter().enumerate() {
        let c = s[2];
        let x = random(s, &mut r);
        let g = Tensor::uniform(&[c], 0.5, 1.5, &mut r);
        let b = random(&[c], &mut r);
        let bn = finite_diff_check(
            |t, v| {
                let (y, _) = nn::batch_norm_train(t, v[0], v[1], v[2], 1e-5)?;
                probe(t, y, i as u64)
            },
            &[x.clone(), g.clone(), b.clone()],
            &strict(),
        )
        .unwrap();
        assert!(bn.passed, "bn {s:?}: {bn:?}");
        let mean: Vec<f64> = (0..c).map(|k| 0.1 * k as f64).collect();
        let var: Vec<f64> = (0..c).map(|k| 0.5 + k as f64).collect();
        let bne = finite_diff_check(
            |t, v| {
                let y = nn::batch_norm_eval(t, v[0], v[1], v[2], &mean, &var, 1e-5)?;
                probe(t, y, i as u64)
            },
            &[x.clone(), g.clone(), b.clone()],
            &strict(),
        )
        .unwrap();
        assert!(bne.passed, "bn eval {s:?}: {bne:?}");
        let ln = finite_diff_check(
            |t, v| {
                let y = nn::layer_norm(t, v[0], v[1], v[2], 1e-5)?;
                probe(t, y, i as u64)
            },
            &[x, g, b],
            &strict(),
        )
        .unwrap();
        assert!(ln.passed, "ln {s:?}: {ln:?}");
    }
}

#[test]
fn gradcheck_head_ops() {
    let mut r = rng(22);
    for (i, s) in SHAPES.iter().enumerate() {
        let x = random(s, &mut r);
        let pool = finite_diff_check(
            |t, v| {
                let y = nn::global_avg_pool(t, v[0])?;
                probe(t, y, i as u64)
            },
            &[x],
            &strict(),
        )
        .unwrap();
        assert!(pool.passed, "{pool:?}");

        let (b, f, n) = (s[0] + 1, s[2] + 2, s[3]);
        let xs = random(&[b, f], &mut r);
        let w = random(&[n, f], &mut r);
        let bias = random(&[n], &mut r);
        let labels: Vec<usize> = (0..b).map(|k| k % n).collect();
        let lin = finite_diff_check(
            |t, v| {
                let z = nn::linear(t, v[0], v[1], v[2])?;
                nn::softmax_cross_entropy(t, z, &labels)
            },
            &[xs, w, bias],
            &strict(),
        )
        .unwrap();
        assert!(lin.passed, "{lin:?}");
    }
}

#[test]
fn gradcheck_elementwise() {
    let mut r = rng(23);
    for (i, s) in SHAPES.iter().enumerate() {
        let a = random(s, &mut r);
        let b = random(s, &mut r);
        let rep = finite_diff_check(
            |t, v| {
                let p = ops::mul(t, v[0], v[1])?;
                let q = ops::add(t, p, v[0])?;
                let q = ops::scale(t, q, -1.7)?;
                let y = ops::relu(t, q)?;
                probe(t, y, i as u64)
            },
            &[a, b],
            &strict(),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}

#[test]
fn batch_norm_layer_tracks_running_stats() {
    use mdl_core::tensor::{ParamStore, ParamTag};
    let mut store = ParamStore::<f64>::new();
    let mut bn = nn::BatchNorm::init(&mut store, "bn", ParamTag::Base, 2, 1.0).unwrap();
    assert_eq!(bn.running_var, vec![1.0, 1.0]);
    let x = Tensor::from_fn(&[1, 1, 2, 1, 2], |i| [1.0, 3.0, 10.0, 10.0][i]);
    let mut tape = Tape::new();
    let xv = tape.input(&x);
    bn.forward(&mut tape, &store, xv, Mode::Train).unwrap();
    // mean (2, 10); unbiased var (2, 0)
    assert!((bn.running_mean[0] - 0.2).abs() < 1e-15);
    assert!((bn.running_mean[1] - 1.0).abs() < 1e-15);
    assert!((bn.running_var[0] - (0.9 + 0.2)).abs() < 1e-15);
    assert!((bn.running_var[1] - 0.9).abs() < 1e-15);
    let before = bn.running_mean.clone();
    bn.forward(&mut tape, &store, xv, Mode::Eval).unwrap();
    assert_eq!(before, bn.running_mean);
}
