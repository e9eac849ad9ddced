//! Clip extraction: random training clips and the deterministic 30-view
//! evaluation protocol (10 temporal positions x 3 crops).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RawClip;
use crate::error::{Error, Result};
use crate::network::{DomainId, MdlNetwork};
use crate::nn::{softmax_rows, Mode};
use crate::real::Real;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipSamplerConfig {
    /// Raw frames spanned by one clip.
    pub window_frames: usize,
    /// Frames sampled uniformly from the window.
    pub clip_len: usize,
    /// Inclusive range of the random short-side resize during training.
    pub resize_range: (usize, usize),
    pub crop_size: usize,
    pub hflip_prob: f64,
    /// Temporal positions used at evaluation.
    pub eval_temporal_views: usize,
    /// Short side at evaluation; defaults to the middle of `resize_range`.
    pub eval_short_side: Option<usize>,
}

impl Default for ClipSamplerConfig {
    fn default() -> Self {
        ClipSamplerConfig {
            window_frames: 32,
            clip_len: 16,
            resize_range: (24, 32),
            crop_size: 24,
            hflip_prob: 0.5,
            eval_temporal_views: 10,
            eval_short_side: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropPosition {
    Left,
    Center,
    Right,
}

pub const EVAL_CROPS: [CropPosition; 3] = [CropPosition::Left, CropPosition::Center, CropPosition::Right];

impl ClipSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.resize_range;
        if self.clip_len == 0 || self.clip_len > self.window_frames {
            return Err(Error::Config(format!(
                "clip_len {} must be in 1..={} (window_frames)",
                self.clip_len, self.window_frames
            )));
        }
        if lo > hi || lo < self.crop_size || self.crop_size == 0 {
            return Err(Error::Config(format!(
                "resize range ({lo}, {hi}) must be ordered and not smaller than crop {}",
                self.crop_size
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip_prob {} not in [0, 1]", self.hflip_prob)));
        }
        if let Some(s) = self.eval_short_side {
            if s < self.crop_size {
                return Err(Error::Config(format!("eval_short_side {s} smaller than crop {}", self.crop_size)));
            }
        }
        if self.eval_temporal_views == 0 {
            return Err(Error::Config("eval_temporal_views must be positive".into()));
        }
        Ok(())
    }

    pub fn eval_side(&self) -> usize {
        self.eval_short_side
            .unwrap_or((self.resize_range.0 + self.resize_range.1) / 2)
    }

    pub fn num_eval_views(&self) -> usize {
        self.eval_temporal_views * EVAL_CROPS.len()
    }
}

fn check_window(raw: &RawClip, cfg: &ClipSamplerConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.window_frames > raw.frames {
        return Err(Error::Contract(format!(
            "window of {} frames exceeds clip length {}",
            cfg.window_frames, raw.frames
        )));
    }
    let short = raw.height.min(raw.width);
    if short == 0 {
        return Err(Error::Contract("empty frame".into()));
    }
    Ok(())
}

/// `clip_len` frame indices spread uniformly over `[start, start + window)`.
fn frame_indices(start: usize, window: usize, clip_len: usize) -> impl Iterator<Item = usize> {
    (0..clip_len).map(move |k| start + k * window / clip_len)
}

/// Bilinear resampling of one `h x w` plane to `nh x nw` (half-pixel centres).
fn resize_plane(src: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    if (nh, nw) == (h, w) {
        return src.to_vec();
    }
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(nh, h), axis(nw, w));
    let mut out = Vec::with_capacity(nh * nw);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

fn short_side_dims(h: usize, w: usize, side: usize) -> (usize, usize) {
    if h <= w {
        (side, ((w * side) as f64 / h as f64).round() as usize)
    } else {
        (((h * side) as f64 / w as f64).round() as usize, side)
    }
}

/// Resizes, crops and optionally mirrors the selected frames into a
/// `(1, clip_len, C, crop, crop)` tensor.
fn extract<T: Real>(
    raw: &RawClip,
    frames: impl Iterator<Item = usize>,
    short_side: usize,
    (y0, x0): (usize, usize),
    crop: usize,
    flip: bool,
) -> Vec<T> {
    let (nh, nw) = short_side_dims(raw.height, raw.width, short_side);
    let plane = raw.height * raw.width;
    let mut out = Vec::new();
    for t in frames {
        let frame = raw.frame(t);
        for c in 0..raw.channels {
            let resized = resize_plane(&frame[c * plane..(c + 1) * plane], raw.height, raw.width, nh, nw);
            for y in y0..y0 + crop {
                let row = &resized[y * nw..(y + 1) * nw];
                if flip {
                    out.extend((x0..x0 + crop).rev().map(|x| T::lit(row[x] as f64)));
                } else {
                    out.extend((x0..x0 + crop).map(|x| T::lit(row[x] as f64)));
                }
            }
        }
    }
    out
}

/// Random window → uniformly spaced frames → random short-side resize →
/// random crop → horizontal flip with probability `hflip_prob`.
pub fn sample_train_clip<T: Real, R: Rng + ?Sized>(raw: &RawClip, cfg: &ClipSamplerConfig, rng: &mut R) -> Result<Tensor<T>> {
    check_window(raw, cfg)?;
    let start = rng.gen_range(0..=raw.frames - cfg.window_frames);
    let side = rng.gen_range(cfg.resize_range.0..=cfg.resize_range.1);
    let (nh, nw) = short_side_dims(raw.height, raw.width, side);
    let y0 = rng.gen_range(0..=nh - cfg.crop_size);
    let x0 = rng.gen_range(0..=nw - cfg.crop_size);
    let flip = rng.gen_bool(cfg.hflip_prob);
    let data = extract(
        raw,
        frame_indices(start, cfg.window_frames, cfg.clip_len),
        side,
        (y0, x0),
        cfg.crop_size,
        flip,
    );
    Tensor::new(&[1, cfg.clip_len, raw.channels, cfg.crop_size, cfg.crop_size], data)
}

/// The evaluation views: `eval_temporal_views` evenly spaced windows, each
/// cropped at the left, centre and right after a fixed short-side resize.
/// Centre offsets round down.
pub fn sample_eval_views<T: Real>(raw: &RawClip, cfg: &ClipSamplerConfig) -> Result<Vec<Tensor<T>>> {
    check_window(raw, cfg)?;
    let side = cfg.eval_side();
    let (nh, nw) = short_side_dims(raw.height, raw.width, side);
    let crop = cfg.crop_size;
    let span = raw.frames - cfg.window_frames;
    let n = cfg.eval_temporal_views;
    let mut views = Vec::with_capacity(cfg.num_eval_views());
    for i in 0..n {
        let start = if n == 1 { span / 2 } else { i * span / (n - 1) };
        for pos in EVAL_CROPS {
            let (y0, x0) = match pos {
                CropPosition::Left => ((nh - crop) / 2, 0),
                CropPosition::Center => ((nh - crop) / 2, (nw - crop) / 2),
                CropPosition::Right => ((nh - crop) / 2, nw - crop),
            };
            let data = extract(
                raw,
                frame_indices(start, cfg.window_frames, cfg.clip_len),
                side,
                (y0, x0),
                crop,
                false,
            );
            views.push(Tensor::new(&[1, cfg.clip_len, raw.channels, crop, crop], data)?);
        }
    }
    Ok(views)
}

/// Concatenates `(1, ...)` clips along the batch axis.
pub fn stack_clips<T: Real>(clips: &[Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = clips.first() else {
        return Err(Error::Contract("cannot stack an empty clip list".into()));
    };
    let mut shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * clips.len());
    let mut batch = 0;
    for c in clips {
        if c.shape()[1..] != shape[1..] {
            return Err(Error::dim(
                "stack_clips",
                format!("clip shapes {:?} and {:?} differ", c.shape(), first.shape()),
            ));
        }
        batch += c.shape()[0];
        data.extend_from_slice(c.data());
    }
    shape[0] = batch;
    Tensor::new(&shape, data)
}

/// Average of per-view softmax scores (eval-mode forward).
///
/// Uses a running mean, so identical views reproduce the single-view score exactly.
pub fn multiview_predict<T: Real>(net: &mut MdlNetwork<T>, views: &[Tensor<T>], domain: DomainId) -> Result<Vec<f64>> {
    let batch = stack_clips(views)?;
    let mut tape = Tape::new();
    let logits = net.forward(&mut tape, &batch, domain, Mode::Eval)?;
    let n = tape.shape(logits)[1];
    let probs = softmax_rows(tape.value(logits), n);
    Ok(mean_scores(probs.chunks(n).map(|row| row.iter().map(|p| p.as_f64()).collect())))
}

pub(crate) fn mean_scores(rows: impl Iterator<Item = Vec<f64>>) -> Vec<f64> {
    let mut mean: Vec<f64> = Vec::new();
    for (k, row) in rows.enumerate() {
        if k == 0 {
            mean = row;
            continue;
        }
        let inv = 1.0 / (k + 1) as f64;
        for (m, v) in mean.iter_mut().zip(row) {
            *m += (v - *m) * inv;
        }
    }
    mean
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::FrameGeometry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(g: FrameGeometry) -> RawClip {
        let mut c = RawClip::zeros(g);
        c.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32);
        c
    }

    fn geo() -> FrameGeometry {
        FrameGeometry {
            frames: 32,
            channels: 2,
            height: 8,
            width: 8,
        }
    }

    #[test]
    fn disabled_randomness_gives_uniform_frames() {
        let raw = ramp(geo());
        let cfg = ClipSamplerConfig {
            window_frames: 32,
            clip_len: 16,
            resize_range: (8, 8),
            crop_size: 8,
            hflip_prob: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clip: Tensor<f64> = sample_train_clip(&raw, &cfg, &mut rng).unwrap();
        assert_eq!(clip.shape(), &[1, 16, 2, 8, 8]);
        for k in 0..16 {
            let src = raw.frame(2 * k);
            let dst = &clip.data()[k * 128..(k + 1) * 128];
            assert!(src.iter().zip(dst).all(|(&a, &b)| a as f64 == b));
        }
    }

    #[test]
    fn forced_flip_mirrors_width() {
        let raw = ramp(geo());
        let base = ClipSamplerConfig {
            window_frames: 20,
            clip_len: 16,
            resize_range: (8, 12),
            crop_size: 6,
            hflip_prob: 0.0,
            ..Default::default()
        };
        let flipped = ClipSamplerConfig { hflip_prob: 1.0, ..base.clone() };
        let a: Tensor<f64> = sample_train_clip(&raw, &base, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b: Tensor<f64> = sample_train_clip(&raw, &flipped, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for (ra, rb) in a.data().chunks(6).zip(b.data().chunks(6)) {
            let rev: Vec<f64> = rb.iter().rev().copied().collect();
            assert_eq!(ra, rev.as_slice());
        }
    }

    #[test]
    fn clip_length_is_fixed() {
        let raw = ramp(geo());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for window in [16, 20, 27, 32] {
            let cfg = ClipSamplerConfig {
                window_frames: window,
                resize_range: (8, 10),
                crop_size: 8,
                ..Default::default()
            };
            let clip: Tensor<f32> = sample_train_clip(&raw, &cfg, &mut rng).unwrap();
            assert_eq!(clip.shape()[1], 16);
        }
        let too_long = ClipSamplerConfig {
            window_frames: 33,
            resize_range: (8, 8),
            crop_size: 8,
            ..Default::default()
        };
        assert!(matches!(
            sample_train_clip::<f32, _>(&raw, &too_long, &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn eval_views_count_and_constant_video() {
        let mut raw = RawClip::zeros(geo());
        raw.data.iter_mut().for_each(|v| *v = 0.25);
        let cfg = ClipSamplerConfig {
            resize_range: (8, 12),
            crop_size: 8,
            ..Default::default()
        };
        let views: Vec<Tensor<f64>> = sample_eval_views(&raw, &cfg).unwrap();
        assert_eq!(views.len(), 30);
        assert!(views.iter().all(|v| v == &views[0]));
        assert!(views[0].data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn centre_crop_rounds_down() {
        // 8 x 9 frame, crop 6: centre offset (9 - 6) / 2 = 1
        let g = FrameGeometry {
            frames: 16,
            channels: 1,
            height: 8,
            width: 9,
        };
        let raw = ramp(g);
        let cfg = ClipSamplerConfig {
            window_frames: 16,
            resize_range: (8, 8),
            crop_size: 6,
            ..Default::default()
        };
        let views: Vec<Tensor<f64>> = sample_eval_views(&raw, &cfg).unwrap();
        let centre = &views[1];
        // first row of the crop starts at row (8 - 6) / 2 = 1, column 1
        assert_eq!(centre.data()[0], raw.at(0, 0, 1, 1) as f64);
        let right = &views[2];
        assert_eq!(right.data()[0], raw.at(0, 0, 1, 3) as f64);
    }

    #[test]
    fn running_mean_of_scores() {
        let m = mean_scores(vec![vec![1.0, 0.0], vec![0.0, 1.0]].into_iter());
        assert_eq!(m, vec![0.5, 0.5]);
        let p = vec![0.1f64, 0.7, 0.2];
        let same = mean_scores(std::iter::repeat(p.clone()).take(30));
        assert_eq!(same, p);
    }
}
