//! Synthetic multi-domain video datasets, clip sampling and multi-view inference.
//!
//! Three generator families:
//! * `SpatialPatterns`: class = (orientation, period) of a drifting grating;
//!   every frame on its own identifies the class. Orientations are drawn from
//!   mirror pairs `{θ, π - θ}` so a horizontal flip never changes the label.
//! * `TemporalMotion`: class = vertical drift direction and speed of one blob on
//!   a torus. The blob position in any single frame is uniform for every
//!   class, so only frame order carries the label.
//! * `MixedStyle`: `SpatialPatterns` rendered with a per-domain colour tint,
//!   offset and noise level.

mod cache;
mod sampler;
mod sampling;

pub use cache::{ClipCache, ManifestEntry};
pub use sampler::{evaluate_top1, SyntheticSampler};
pub use sampling::{
    multiview_predict, sample_eval_views, sample_train_clip, stack_clips, ClipSamplerConfig, CropPosition,
    EVAL_CROPS,
};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    SpatialPatterns,
    TemporalMotion,
    MixedStyle,
}

/// Raw clip geometry `(T_raw, C, H_raw, W_raw)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameGeometry {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for FrameGeometry {
    fn default() -> Self {
        FrameGeometry {
            frames: 32,
            channels: 3,
            height: 32,
            width: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDomain {
    pub id: usize,
    pub name: String,
    pub kind: GeneratorKind,
    pub num_classes: usize,
    pub train_size: usize,
    pub val_size: usize,
    #[serde(default)]
    pub geometry: FrameGeometry,
    pub seed: u64,
    /// Selects the colour/noise style of `MixedStyle` domains.
    #[serde(default)]
    pub style: u64,
    /// Pixel noise standard deviation; overrides the style's level.
    #[serde(default)]
    pub noise: Option<f64>,
}

/// A generated clip, frames in `(T, C, H, W)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct RawClip {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RawClip {
    pub fn zeros(g: FrameGeometry) -> Self {
        RawClip {
            frames: g.frames,
            channels: g.channels,
            height: g.height,
            width: g.width,
            data: vec![0.0; g.frames * g.channels * g.height * g.width],
        }
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn at(&self, t: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[((t * self.channels + c) * self.height + y) * self.width + x]
    }

    fn set(&mut self, t: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = ((t * self.channels + c) * self.height + y) * self.width + x;
        self.data[i] = v;
    }
}

/// Base orientation in `[0, π/2]` and period of spatial class `k`.
pub fn grating_params(class_id: usize, num_classes: usize) -> (f64, f64) {
    let n_orient = num_classes.min(ORIENTATIONS);
    let j = class_id % n_orient;
    let theta = if n_orient == 1 { 0.0 } else { 0.5 * PI * j as f64 / (n_orient - 1) as f64 };
    let period = GRATING_PERIOD * PERIOD_RATIO.powi((class_id / n_orient) as i32);
    (theta, period)
}

pub(crate) fn item_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Grating period of the first frequency band, in pixels.
const GRATING_PERIOD: f64 = 4.0;
/// Ratio between consecutive period bands; larger than the widest resize factor.
const PERIOD_RATIO: f64 = 1.5;
/// Orientations per frequency band, spread over `[0, π/2]`.
const ORIENTATIONS: usize = 4;
/// Upper bound on spatial classes (4 orientations x 4 bands).
pub const MAX_SPATIAL_CLASSES: usize = 16;
/// Gaussian blob radius (standard deviation, pixels).
const BLOB_SIGMA: f64 = 2.5;

struct Style {
    tint: [f64; 3],
    offset: f64,
    noise: f64,
}

impl SyntheticDomain {
    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if self.num_classes < 2 {
            return Err(Error::Config(format!("domain `{}` needs at least 2 classes", self.name)));
        }
        if self.kind != GeneratorKind::TemporalMotion && self.num_classes > MAX_SPATIAL_CLASSES {
            return Err(Error::Config(format!(
                "domain `{}`: spatial generators support at most {MAX_SPATIAL_CLASSES} classes",
                self.name
            )));
        }
        if self.train_size == 0 {
            return Err(Error::Config(format!("domain `{}` has an empty training split", self.name)));
        }
        if self.noise.is_some_and(|n| !(n >= 0.0 && n.is_finite())) {
            return Err(Error::Config(format!("domain `{}` has an invalid noise level", self.name)));
        }
        if g.frames == 0 || g.channels == 0 || g.height == 0 || g.width == 0 {
            return Err(Error::Config(format!("domain `{}` has a degenerate frame geometry", self.name)));
        }
        Ok(())
    }

    /// Label of item `index` within `split`; classes are balanced round-robin.
    pub fn label(&self, split: Split, index: usize) -> usize {
        self.global_index(split, index) % self.num_classes
    }

    pub(crate) fn global_index(&self, split: Split, index: usize) -> usize {
        match split {
            Split::Train => index,
            Split::Val => self.train_size + index,
        }
    }

    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Val => self.val_size,
        }
    }

    /// Deterministic item of a split: `(clip, label)`.
    pub fn item(&self, split: Split, index: usize) -> Result<(RawClip, usize)> {
        let label = self.label(split, index);
        let clip = self.generate_clip(label, self.global_index(split, index))?;
        Ok((clip, label))
    }

    fn style(&self) -> Style {
        match self.kind {
            GeneratorKind::MixedStyle => {
                let mut r = ChaCha8Rng::seed_from_u64(item_seed(self.style, u64::MAX));
                Style {
                    tint: [r.gen_range(0.4..1.6), r.gen_range(0.4..1.6), r.gen_range(0.4..1.6)],
                    offset: r.gen_range(-0.3..0.3),
                    noise: r.gen_range(0.05..0.25),
                }
            }
            _ => Style {
                tint: [1.0; 3],
                offset: 0.0,
                noise: 0.1,
            },
        }
    }

    /// Renders clip `index` of class `class_id`; bit-identical for equal inputs.
    pub fn generate_clip(&self, class_id: usize, index: usize) -> Result<RawClip> {
        if class_id >= self.num_classes {
            return Err(Error::Contract(format!(
                "class {class_id} out of range for domain `{}` with {} classes",
                self.name, self.num_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(self.seed, index as u64));
        let style = self.style();
        let sigma = self.noise.unwrap_or(style.noise);
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise level {sigma}: {e}")))?;
        let g = self.geometry;
        let mut clip = RawClip::zeros(g);
        match self.kind {
            GeneratorKind::SpatialPatterns | GeneratorKind::MixedStyle => {
                let (theta, period) = grating_params(class_id, self.num_classes);
                let theta = if rng.gen_bool(0.5) { theta } else { PI - theta };
                let (ct, st) = (theta.cos(), theta.sin());
                let omega = 2.0 * PI / period;
                let phase0 = rng.gen_range(0.0..2.0 * PI);
                let drift = rng.gen_range(-0.5..0.5);
                let contrast = rng.gen_range(0.25..0.45);
                for t in 0..g.frames {
                    let phase = phase0 + drift * t as f64;
                    for y in 0..g.height {
                        for x in 0..g.width {
                            let v = contrast * (omega * (x as f64 * ct + y as f64 * st) + phase).cos();
                            for c in 0..g.channels {
                                let tint = style.tint[c % 3];
                                let px = 0.5 + style.offset + tint * v + noise.sample(&mut rng);
                                clip.set(t, c, y, x, px as f32);
                            }
                        }
                    }
                }
            }
            GeneratorKind::TemporalMotion => {
                let dir = if class_id % 2 == 0 { 1.0 } else { -1.0 };
                let speed = 1.0 + (class_id / 2) as f64;
                let (h, w) = (g.height as f64, g.width as f64);
                let y0 = rng.gen_range(0.0..h);
                let x0 = rng.gen_range(0.0..w);
                let amp = rng.gen_range(0.6..0.9);
                let torus = |d: f64, n: f64| {
                    let d = d.rem_euclid(n);
                    d.min(n - d)
                };
                for t in 0..g.frames {
                    let cy = (y0 + dir * speed * t as f64).rem_euclid(h);
                    for y in 0..g.height {
                        let dy = torus(y as f64 - cy, h);
                        for x in 0..g.width {
                            let dx = torus(x as f64 - x0, w);
                            let blob = amp * (-(dx * dx + dy * dy) / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
                            for c in 0..g.channels {
                                let px = 0.2 + blob + noise.sample(&mut rng);
                                clip.set(t, c, y, x, px as f32);
                            }
                        }
                    }
                }
            }
        }
        Ok(clip)
    }
}
