//! The shared layer stack `M^1 … M^{L-1}` and channel descriptions of
//! backbones used for parameter accounting.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterBank, SharedPostNorm};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, ConvKernel, ConvKind, LinearHead, Mode, RunningStats};
use crate::real::Real;
use crate::tensor::{ops, ParamStore, ParamTag, Tape, Var};

/// Output channels at each insertion location `1..=L-2` plus the pooled feature width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub name: String,
    pub channels: Vec<usize>,
    pub head_width: usize,
}

impl ChannelSpec {
    pub fn new(name: impl Into<String>, channels: Vec<usize>, head_width: usize) -> Result<Self> {
        let spec = ChannelSpec {
            name: name.into(),
            channels,
            head_width,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0) || self.head_width == 0 {
            return Err(Error::Config(format!(
                "channel spec `{}` must contain positive widths",
                self.name
            )));
        }
        Ok(())
    }

    /// X3D-M: stem plus four residual stages feeding five insertion points.
    pub fn x3d_m() -> Self {
        ChannelSpec {
            name: "x3d-m".into(),
            channels: vec![24, 24, 48, 96, 192],
            head_width: 2048,
        }
    }

    /// Number of insertion locations, `L - 2`.
    pub fn num_locations(&self) -> usize {
        self.channels.len()
    }

    /// Channels at 1-based location `loc`.
    pub fn at(&self, loc: usize) -> usize {
        self.channels[loc - 1]
    }

    /// Parses a TOML description:
    ///
    /// ```toml
    /// name = "custom"
    /// channels = [24, 48]
    /// head_width = 2048
    /// ```
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let spec: ChannelSpec = toml::from_str(text).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            detail: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Configuration of the small CPU backbone used for training runs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyBackboneConfig {
    pub in_channels: usize,
    /// Output widths of `M^1..M^{L-2}`, i.e. the adapter channel counts.
    pub widths: Vec<usize>,
    /// Output width of the last conv block, pooled into the heads.
    pub feature_width: usize,
    /// Temporal extent of every backbone kernel; 1 makes the backbone frame-wise.
    pub temporal_kernel: usize,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        ToyBackboneConfig {
            in_channels: 3,
            widths: vec![8, 8, 16, 32, 64],
            feature_width: 128,
            temporal_kernel: 3,
        }
    }
}

impl ToyBackboneConfig {
    pub fn channel_spec(&self) -> ChannelSpec {
        ChannelSpec {
            name: "toy".into(),
            channels: self.widths.clone(),
            head_width: self.feature_width,
        }
    }
}

/// Conv → BN → ReLU.
///
/// Besides the BN layer's own running statistics the block can keep one
/// set per key (the network uses domain ids), so domains whose features
/// differ after their adapters do not share eval-time normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    pub conv: ConvKernel,
    pub bn: BatchNorm<T>,
    pub keyed_stats: BTreeMap<usize, RunningStats<T>>,
}

impl<T: Real> ConvBlock<T> {
    pub fn num_params(&self) -> usize {
        self.conv.num_weights() + self.bn.num_params()
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        stats_key: Option<usize>,
    ) -> Result<Var> {
        let h = self.conv.forward(tape, store, x)?;
        let h = match stats_key {
            None => self.bn.forward(tape, store, h, mode)?,
            Some(k) => {
                let c = self.bn.channels;
                let stats = self.keyed_stats.entry(k).or_insert_with(|| RunningStats::fresh(c));
                self.bn.forward_with_stats(tape, store, h, mode, stats)?
            }
        };
        ops::relu(tape, h)
    }
}

/// Adapters to run between layers during one forward pass.
pub struct AdapterRoute<'a, T> {
    pub bank: &'a mut AdapterBank<T>,
    pub post_norms: &'a SharedPostNorm,
    /// Incremented once per executed adapter block.
    pub counter: &'a mut usize,
}

/// Feature layers `M^1..M^{L-1}`; `M^L` (pool + head) is per domain.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack<T> {
    pub layers: Vec<ConvBlock<T>>,
}

impl<T: Real> LayerStack<T> {
    /// Builds the toy backbone: a stem, four stride-2 stages and a 1x1x1
    /// projection to the feature width. All parameters are tagged `base`.
    pub fn toy(store: &mut ParamStore<T>, cfg: &ToyBackboneConfig, seed: u64) -> Result<Self> {
        if cfg.widths.is_empty() || cfg.widths.iter().any(|&w| w == 0) || cfg.feature_width == 0 {
            return Err(Error::Config("backbone widths must be positive and non-empty".into()));
        }
        if cfg.temporal_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal kernel must be odd, got {}",
                cfg.temporal_kernel
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = if cfg.temporal_kernel == 1 {
            ConvKind::Framewise2D
        } else {
            ConvKind::Full3D
        };
        let mut layers = Vec::new();
        let mut c_in = cfg.in_channels;
        for (i, &w) in cfg.widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            layers.push(Self::block(store, i + 1, kind, c_in, w, (cfg.temporal_kernel, 3, 3), stride, &mut rng)?);
            c_in = w;
        }
        let last = cfg.widths.len() + 1;
        layers.push(Self::block(
            store,
            last,
            ConvKind::Framewise2D,
            c_in,
            cfg.feature_width,
            (1, 1, 1),
            1,
            &mut rng,
        )?);
        Ok(LayerStack { layers })
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        store: &mut ParamStore<T>,
        index: usize,
        kind: ConvKind,
        c_in: usize,
        c_out: usize,
        k: (usize, usize, usize),
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ConvBlock<T>> {
        let conv = ConvKernel::init(
            store,
            format!("base/{index}/conv/weight"),
            ParamTag::Base,
            kind,
            c_in,
            c_out,
            k,
            stride,
            rng,
        )?;
        let bn = BatchNorm::init(store, &format!("base/{index}/bn"), ParamTag::Base, c_out, 1.0)?;
        Ok(ConvBlock {
            conv,
            bn,
            keyed_stats: BTreeMap::new(),
        })
    }

    /// `L`, counting the pool + head slot.
    pub fn depth(&self) -> usize {
        self.layers.len() + 1
    }

    pub fn num_locations(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(ConvBlock::num_params).sum()
    }

    pub fn channel_spec(&self, name: &str) -> ChannelSpec {
        let n = self.layers.len();
        ChannelSpec {
            name: name.into(),
            channels: self.layers[..n - 1].iter().map(|l| l.conv.c_out).collect(),
            head_width: self.layers[n - 1].conv.c_out,
        }
    }

    /// Runs `M^1 → [A^1] → M^2 → … → M^{L-1}` and returns the final feature map.
    /// `stats_key` selects keyed BN running statistics; `None` uses the layers' own.
    pub fn forward_features(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        mut route: Option<AdapterRoute<'_, T>>,
        stats_key: Option<usize>,
    ) -> Result<Var> {
        if let Some(r) = &route {
            let n = self.num_locations();
            if let Some(bad) = r.bank.blocks.keys().find(|&&l| l == 0 || l > n) {
                return Err(Error::Config(format!("adapter location {bad} outside 1..={n}")));
            }
        }
        let mut h = x;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            h = layer.forward(tape, store, h, mode, stats_key)?;
            let loc = i + 1;
            let Some(r) = route.as_mut() else { continue };
            let Some(ln) = r.post_norms.norms.get(&loc) else {
                if r.bank.blocks.contains_key(&loc) {
                    return Err(Error::Config(format!("no shared post-norm for location {loc}")));
                }
                continue;
            };
            let Some(block) = r.bank.blocks.get_mut(&loc) else {
                return Err(Error::Config(format!(
                    "domain {} has no adapter for active location {loc}",
                    r.bank.domain.get()
                )));
            };
            h = block.forward(tape, store, h, ln, mode)?;
            *r.counter += 1;
        }
        Ok(h)
    }
}

/// Full forward `x → stack (with optional adapters) → pool → head`.
pub fn stack_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    stack: &mut LayerStack<T>,
    route: Option<AdapterRoute<'_, T>>,
    head: &LinearHead,
    mode: Mode,
) -> Result<Var> {
    let features = stack.forward_features(tape, store, x, mode, route, None)?;
    head.forward(tape, store, features)
}
