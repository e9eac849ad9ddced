//! Domain-specific adapter blocks and the per-location shared layer norms.
//!
//! Block layout: `g = LN(ReLU(BN(conv(f)) + f))`, where `conv` is frame-wise
//! 2D, full 3D, or a frame-wise 2D followed by a temporal 1D convolution.
//! BN and the convolutions belong to one domain; the LN at each location is
//! shared by every domain.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ChannelSpec;
use crate::error::{Error, Result};
use crate::network::DomainId;
use crate::nn::{BatchNorm, ConvKernel, ConvKind, LayerNorm, Mode};
use crate::real::Real;
use crate::tensor::{ops, ParamStore, ParamTag, Tape, Var};

/// Spatial kernel extent (`k_h = k_w`).
pub const SPATIAL_KERNEL: usize = 3;
/// Temporal kernel extent.
pub const TEMPORAL_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdapterKind {
    #[serde(rename = "2d")]
    Framewise2D,
    #[serde(rename = "3d")]
    Full3D,
    #[serde(rename = "2+1d")]
    SeparableST,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 3] = [AdapterKind::Framewise2D, AdapterKind::SeparableST, AdapterKind::Full3D];

    /// Closed-form trainable parameter count of one block with `c` channels.
    pub fn block_params(self, c: usize) -> usize {
        let k2 = SPATIAL_KERNEL * SPATIAL_KERNEL;
        let conv = match self {
            AdapterKind::Framewise2D => k2 * c * c,
            AdapterKind::Full3D => TEMPORAL_KERNEL * k2 * c * c,
            AdapterKind::SeparableST => k2 * c * c + TEMPORAL_KERNEL * c * c,
        };
        conv + 2 * c
    }

    pub fn label(self) -> &'static str {
        match self {
            AdapterKind::Framewise2D => "2D",
            AdapterKind::SeparableST => "(2+1)D",
            AdapterKind::Full3D => "3D",
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "2d" | "framewise2d" => Ok(AdapterKind::Framewise2D),
            "3d" | "full3d" => Ok(AdapterKind::Full3D),
            "2+1d" | "(2+1)d" | "separable" | "separablest" => Ok(AdapterKind::SeparableST),
            other => Err(Error::Config(format!("unknown adapter kind `{other}` (expected 2d, 2+1d or 3d)"))),
        }
    }
}

/// One domain's adapter at one insertion location.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBlock<T> {
    pub kind: AdapterKind,
    pub channels: usize,
    /// One kernel, or spatial then temporal for [`AdapterKind::SeparableST`].
    pub convs: Vec<ConvKernel>,
    pub bn: BatchNorm<T>,
}

impl<T: Real> AdapterBlock<T> {
    /// He-uniform conv weights; BN scale starts at zero so the block is
    /// `LN(ReLU(f))` at initialisation.
    pub fn init<R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kind: AdapterKind,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let c = channels;
        let (k, kt) = (SPATIAL_KERNEL, TEMPORAL_KERNEL);
        let tag = ParamTag::Adapter;
        let convs = match kind {
            AdapterKind::Framewise2D => vec![ConvKernel::init(
                store,
                format!("{prefix}/conv/weight"),
                tag,
                ConvKind::Framewise2D,
                c,
                c,
                (1, k, k),
                1,
                rng,
            )?],
            AdapterKind::Full3D => vec![ConvKernel::init(
                store,
                format!("{prefix}/conv/weight"),
                tag,
                ConvKind::Full3D,
                c,
                c,
                (kt, k, k),
                1,
                rng,
            )?],
            AdapterKind::SeparableST => vec![
                ConvKernel::init(
                    store,
                    format!("{prefix}/conv_s/weight"),
                    tag,
                    ConvKind::Framewise2D,
                    c,
                    c,
                    (1, k, k),
                    1,
                    rng,
                )?,
                ConvKernel::init(
                    store,
                    format!("{prefix}/conv_t/weight"),
                    tag,
                    ConvKind::Temporal1D,
                    c,
                    c,
                    (kt, 1, 1),
                    1,
                    rng,
                )?,
            ],
        };
        let bn = BatchNorm::init(store, &format!("{prefix}/bn"), tag, c, 0.0)?;
        Ok(AdapterBlock {
            kind,
            channels,
            convs,
            bn,
        })
    }

    /// Parameter count read off the allocated tensors.
    pub fn num_params(&self) -> usize {
        self.convs.iter().map(ConvKernel::num_weights).sum::<usize>() + self.bn.num_params()
    }

    /// `LN(ReLU(BN(conv(f)) + f))`.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f: Var,
        ln: &LayerNorm,
        mode: Mode,
    ) -> Result<Var> {
        let c = tape.shape(f).get(2).copied().unwrap_or(0);
        if c != self.channels || ln.channels != self.channels {
            return Err(Error::dim(
                "adapter_forward",
                format!(
                    "feature has {c} channels, adapter expects {} (post-norm {})",
                    self.channels, ln.channels
                ),
            ));
        }
        let mut h = f;
        for conv in &self.convs {
            h = conv.forward(tape, store, h)?;
        }
        let h = self.bn.forward(tape, store, h, mode)?;
        let h = ops::add(tape, h, f)?;
        let h = ops::relu(tape, h)?;
        ln.forward(tape, store, h)
    }
}

fn check_locations(locations: &BTreeSet<usize>, channels: &ChannelSpec) -> Result<()> {
    let max = channels.num_locations();
    match locations.iter().find(|&&l| l == 0 || l > max) {
        Some(bad) => Err(Error::Config(format!(
            "insertion location {bad} is outside 1..={max} for channel spec `{}`",
            channels.name
        ))),
        None => Ok(()),
    }
}

/// All adapter blocks of one domain, keyed by insertion location.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBank<T> {
    pub domain: DomainId,
    pub blocks: BTreeMap<usize, AdapterBlock<T>>,
}

impl<T: Real> AdapterBank<T> {
    /// One block per location with that location's channel count; weights
    /// are drawn from `seed` only.
    pub fn build(
        store: &mut ParamStore<T>,
        domain: DomainId,
        channels: &ChannelSpec,
        kind: AdapterKind,
        locations: &BTreeSet<usize>,
        seed: u64,
    ) -> Result<Self> {
        check_locations(locations, channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = BTreeMap::new();
        for &loc in locations {
            let prefix = format!("adapter/{}/{loc}", domain.get());
            let block = AdapterBlock::init(store, &prefix, kind, channels.at(loc), &mut rng)?;
            blocks.insert(loc, block);
        }
        Ok(AdapterBank { domain, blocks })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.blocks.values().map(AdapterBlock::num_params).sum()
    }
}

/// Layer norms after the adapters, one per active location, shared by all domains.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedPostNorm {
    pub norms: BTreeMap<usize, LayerNorm>,
}

impl SharedPostNorm {
    pub fn build<T: Real>(store: &mut ParamStore<T>, channels: &ChannelSpec, locations: &BTreeSet<usize>) -> Result<Self> {
        check_locations(locations, channels)?;
        let mut norms = BTreeMap::new();
        for &loc in locations {
            norms.insert(loc, LayerNorm::init(store, &format!("ln/{loc}"), ParamTag::PostNorm, channels.at(loc))?);
        }
        Ok(SharedPostNorm { norms })
    }

    pub fn num_params(&self) -> usize {
        self.norms.values().map(LayerNorm::num_params).sum()
    }

    /// Replaces every LN by the identity (test hook for identity-at-init checks).
    pub fn set_passthrough(&mut self, on: bool) {
        self.norms.values_mut().for_each(|ln| ln.passthrough = on);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_costs() {
        assert_eq!(AdapterKind::SeparableST.block_params(24), 6960);
        assert_eq!(AdapterKind::Framewise2D.block_params(1), 11);
        assert_eq!(AdapterKind::Full3D.block_params(2), 27 * 4 + 4);
    }

    #[test]
    fn allocated_counts_match_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in AdapterKind::ALL {
            for c in [1, 3, 8] {
                let mut store = ParamStore::<f64>::new();
                let blk = AdapterBlock::init(&mut store, "a", kind, c, &mut rng).unwrap();
                let walked: usize = store.iter().map(|(_, p)| p.tensor.numel()).sum();
                assert_eq!(blk.num_params(), kind.block_params(c));
                assert_eq!(walked, kind.block_params(c));
            }
        }
    }

    #[test]
    fn kinds_parse() {
        assert_eq!("2+1D".parse::<AdapterKind>().unwrap(), AdapterKind::SeparableST);
        assert_eq!("3d".parse::<AdapterKind>().unwrap(), AdapterKind::Full3D);
        assert!("4d".parse::<AdapterKind>().is_err());
    }

    #[test]
    fn bank_layout_follows_channel_spec() {
        let spec = ChannelSpec::x3d_m();
        let mut store = ParamStore::<f32>::new();
        let all: BTreeSet<usize> = (1..=5).collect();
        let bank = AdapterBank::build(&mut store, DomainId::new(1), &spec, AdapterKind::SeparableST, &all, 3).unwrap();
        let widths: Vec<usize> = bank.blocks.values().map(|b| b.channels).collect();
        assert_eq!(widths, vec![24, 24, 48, 96, 192]);

        let one = AdapterBank::build(&mut store, DomainId::new(2), &spec, AdapterKind::SeparableST, &[1].into(), 3).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.blocks[&1].channels, 24);

        let none = AdapterBank::build(&mut store, DomainId::new(3), &spec, AdapterKind::Full3D, &BTreeSet::new(), 3).unwrap();
        assert!(none.is_empty());

        let err = AdapterBank::build(&mut store, DomainId::new(4), &spec, AdapterKind::Full3D, &[6].into(), 3);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn bank_init_is_deterministic() {
        let spec = ChannelSpec::new("t", vec![2, 3], 4).unwrap();
        let locs: BTreeSet<usize> = [1, 2].into();
        let build = || {
            let mut store = ParamStore::<f64>::new();
            AdapterBank::build(&mut store, DomainId::new(1), &spec, AdapterKind::Full3D, &locs, 11).unwrap();
            store.fingerprint()
        };
        assert_eq!(build(), build());
    }
}
