//! The assembled multi-domain model: shared backbone, per-domain adapter
//! banks and heads, and the insertion configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterBank, AdapterKind, SharedPostNorm};
use crate::backbone::{AdapterRoute, ChannelSpec, LayerStack, ToyBackboneConfig};
use crate::error::{Error, Result};
use crate::nn::{LinearHead, Mode, RunningStats};
use crate::real::Real;
use crate::tensor::{HasParams, Param, ParamStore, ParamTag, Tape, Tensor, Var};

/// 1-based domain identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainId(usize);

impl DomainId {
    pub fn new(id: usize) -> Self {
        assert!(id >= 1, "domain ids start at 1");
        DomainId(id)
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: DomainId,
    pub name: String,
    pub num_classes: usize,
}

impl DomainSpec {
    pub fn new(id: usize, name: impl Into<String>, num_classes: usize) -> Self {
        DomainSpec {
            id: DomainId::new(id),
            name: name.into(),
            num_classes,
        }
    }
}

/// Which inter-layer locations receive adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InsertionConfig {
    All,
    /// Locations `1..=x`.
    Early(usize),
    /// The last `x` locations, ending at `L-2`.
    Late(usize),
    /// Heads only.
    MultiHead,
}

impl InsertionConfig {
    /// Resolves to a set of 1-based locations given `L - 2` available slots.
    pub fn locations(self, num_locations: usize) -> Result<BTreeSet<usize>> {
        let n = num_locations;
        match self {
            InsertionConfig::All => Ok((1..=n).collect()),
            InsertionConfig::MultiHead => Ok(BTreeSet::new()),
            InsertionConfig::Early(x) | InsertionConfig::Late(x) if x > n => Err(Error::Config(format!(
                "{self} needs {x} locations but the backbone has {n}"
            ))),
            InsertionConfig::Early(x) => Ok((1..=x).collect()),
            InsertionConfig::Late(x) => Ok((n + 1 - x..=n).collect()),
        }
    }
}

impl fmt::Display for InsertionConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InsertionConfig::All => f.write_str("all"),
            InsertionConfig::Early(x) => write!(f, "early-{x}"),
            InsertionConfig::Late(x) => write!(f, "late-{x}"),
            InsertionConfig::MultiHead => f.write_str("multi-head"),
        }
    }
}

impl FromStr for InsertionConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let count = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad insertion config `{s}`")))
        };
        match s.as_str() {
            "all" => Ok(InsertionConfig::All),
            "multi-head" | "multihead" => Ok(InsertionConfig::MultiHead),
            _ => {
                if let Some(rest) = s.strip_prefix("early-") {
                    Ok(InsertionConfig::Early(count(rest)?))
                } else if let Some(rest) = s.strip_prefix("late-") {
                    Ok(InsertionConfig::Late(count(rest)?))
                } else {
                    Err(Error::Config(format!(
                        "unknown insertion config `{s}` (expected all, early-x, late-x, multi-head)"
                    )))
                }
            }
        }
    }
}

impl Serialize for InsertionConfig {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for InsertionConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything needed to rebuild an [`MdlNetwork`] from scratch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub backbone: ToyBackboneConfig,
    pub adapter_kind: AdapterKind,
    pub insertion: InsertionConfig,
    pub trainable_base: bool,
    pub domains: Vec<DomainSpec>,
    pub seed: u64,
    /// Pool backbone BN running statistics over all domains instead of
    /// keeping one set per domain.
    #[serde(default)]
    pub shared_bn_stats: bool,
}

/// Shared backbone + per-domain adapters and heads.
#[derive(Clone, Debug)]
pub struct MdlNetwork<T> {
    params: ParamStore<T>,
    backbone: LayerStack<T>,
    config: NetworkConfig,
    locations: BTreeSet<usize>,
    banks: BTreeMap<DomainId, AdapterBank<T>>,
    post_norms: SharedPostNorm,
    heads: BTreeMap<DomainId, LinearHead>,
    adapters_executed: usize,
}

fn mix(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser over (seed, stream)
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<T: Real> MdlNetwork<T> {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let backbone = LayerStack::toy(&mut params, &config.backbone, mix(config.seed, 0))?;
        let spec = backbone.channel_spec("toy");
        let locations = config.insertion.locations(spec.num_locations())?;
        let post_norms = SharedPostNorm::build(&mut params, &spec, &locations)?;
        let mut net = MdlNetwork {
            params,
            backbone,
            config: NetworkConfig {
                domains: Vec::new(),
                ..config.clone()
            },
            locations,
            banks: BTreeMap::new(),
            post_norms,
            heads: BTreeMap::new(),
            adapters_executed: 0,
        };
        for d in config.domains {
            net.add_domain(d)?;
        }
        net.set_trainable_base(config.trainable_base);
        Ok(net)
    }

    /// Adds a bank and head for a new domain. Existing parameters are untouched.
    pub fn add_domain(&mut self, domain: DomainSpec) -> Result<()> {
        let id = domain.id;
        if self.banks.contains_key(&id) {
            return Err(Error::Config(format!("domain {id} already present")));
        }
        if domain.num_classes < 2 {
            return Err(Error::Config(format!(
                "domain {id} needs at least 2 classes, got {}",
                domain.num_classes
            )));
        }
        let spec = self.channel_spec();
        let seed = self.config.seed;
        let bank = AdapterBank::build(
            &mut self.params,
            id,
            &spec,
            self.config.adapter_kind,
            &self.locations,
            mix(seed, 2 * id.get() as u64),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 2 * id.get() as u64 + 1));
        let head = LinearHead::init(
            &mut self.params,
            &format!("head/{}", id.get()),
            spec.head_width,
            domain.num_classes,
            &mut rng,
        )?;
        self.banks.insert(id, bank);
        self.heads.insert(id, head);
        self.config.domains.push(domain);
        Ok(())
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn domains(&self) -> &[DomainSpec] {
        &self.config.domains
    }

    pub fn domain(&self, id: DomainId) -> Result<&DomainSpec> {
        self.config
            .domains
            .iter()
            .find(|d| d.id == id)
            .ok_or(Error::UnknownDomain(id.get()))
    }

    pub fn locations(&self) -> &BTreeSet<usize> {
        &self.locations
    }

    pub fn channel_spec(&self) -> ChannelSpec {
        self.backbone.channel_spec("toy")
    }

    pub fn backbone(&self) -> &LayerStack<T> {
        &self.backbone
    }

    pub fn bank(&self, id: DomainId) -> Option<&AdapterBank<T>> {
        self.banks.get(&id)
    }

    pub fn bank_mut(&mut self, id: DomainId) -> Option<&mut AdapterBank<T>> {
        self.banks.get_mut(&id)
    }

    pub fn head(&self, id: DomainId) -> Option<&LinearHead> {
        self.heads.get(&id)
    }

    pub fn post_norms(&self) -> &SharedPostNorm {
        &self.post_norms
    }

    /// Test hook: replaces the shared LNs by the identity.
    pub fn set_post_norm_passthrough(&mut self, on: bool) {
        self.post_norms.set_passthrough(on);
    }

    /// Adapter blocks executed since construction.
    pub fn adapters_executed(&self) -> usize {
        self.adapters_executed
    }

    pub fn trainable_base(&self) -> bool {
        self.config.trainable_base
    }

    /// Freezes or unfreezes the backbone; frozen parameters get no gradient.
    pub fn set_trainable_base(&mut self, on: bool) {
        self.config.trainable_base = on;
        let ids: Vec<_> = self.params.iter().filter(|(_, p)| p.tag == ParamTag::Base).map(|(id, _)| id).collect();
        for id in ids {
            self.params.tensor_mut(id).set_requires_grad(on);
        }
    }

    /// Parameters updated by training, always excluding a frozen backbone.
    pub fn trainable_params(&self) -> impl Iterator<Item = (ParamTag, &Param<T>)> {
        self.params
            .iter()
            .map(|(_, p)| p)
            .filter(|p| p.tensor.requires_grad())
            .map(|p| (p.tag, p))
    }

    /// Domain-routed logits `(B, N_d)` for a clip batch `(B, T, C, H, W)`.
    pub fn forward(&mut self, tape: &mut Tape<T>, clips: &Tensor<T>, domain: DomainId, mode: Mode) -> Result<Var> {
        let x = tape.input(clips);
        self.forward_var(tape, x, domain, mode)
    }

    pub fn forward_var(&mut self, tape: &mut Tape<T>, x: Var, domain: DomainId, mode: Mode) -> Result<Var> {
        let (Some(bank), Some(head)) = (self.banks.get_mut(&domain), self.heads.get(&domain)) else {
            return Err(Error::UnknownDomain(domain.get()));
        };
        let route = (!self.locations.is_empty()).then_some(AdapterRoute {
            bank,
            post_norms: &self.post_norms,
            counter: &mut self.adapters_executed,
        });
        let stats_key = (!self.config.shared_bn_stats).then_some(domain.get());
        let features = self.backbone.forward_features(tape, &self.params, x, mode, route, stats_key)?;
        head.forward(tape, &self.params, features)
    }
}

impl<T: Real> MdlNetwork<T> {
    /// BatchNorm running statistics by checkpoint name:
    /// `stats/base/{layer}[/{domain}]/{mean|var}` and
    /// `stats/adapter/{domain}/{location}/{mean|var}`.
    pub fn running_stats(&self) -> BTreeMap<String, Vec<T>> {
        let mut out = BTreeMap::new();
        let mut put = |prefix: String, mean: &[T], var: &[T]| {
            out.insert(format!("{prefix}/mean"), mean.to_vec());
            out.insert(format!("{prefix}/var"), var.to_vec());
        };
        for (i, layer) in self.backbone.layers.iter().enumerate() {
            put(format!("stats/base/{i}"), &layer.bn.running_mean, &layer.bn.running_var);
            for (d, st) in &layer.keyed_stats {
                put(format!("stats/base/{i}/{d}"), &st.mean, &st.var);
            }
        }
        for (d, bank) in &self.banks {
            for (loc, block) in &bank.blocks {
                put(format!("stats/adapter/{d}/{loc}"), &block.bn.running_mean, &block.bn.running_var);
            }
        }
        out
    }

    /// Inverse of [`running_stats`](Self::running_stats). Every named buffer
    /// must belong to this network and have the right length.
    pub fn restore_running_stats(&mut self, stats: &BTreeMap<String, Vec<T>>) -> Result<()> {
        for (name, values) in stats {
            let bad = || Error::Config(format!("unexpected running-stat buffer `{name}`"));
            let parts: Vec<&str> = name.split('/').collect();
            let num = |i: usize| parts.get(i).and_then(|p| p.parse::<usize>().ok()).ok_or_else(bad);
            let (target, which) = match parts.as_slice() {
                ["stats", "base", _, which] => {
                    let bn = &mut self.backbone.layers.get_mut(num(2)?).ok_or_else(bad)?.bn;
                    ((&mut bn.running_mean, &mut bn.running_var), *which)
                }
                ["stats", "base", _, _, which] => {
                    let layer = self.backbone.layers.get_mut(num(2)?).ok_or_else(bad)?;
                    let c = layer.bn.channels;
                    let st = layer.keyed_stats.entry(num(3)?).or_insert_with(|| RunningStats::fresh(c));
                    ((&mut st.mean, &mut st.var), *which)
                }
                ["stats", "adapter", _, _, which] => {
                    let bank = self.banks.get_mut(&DomainId::new(num(2)?)).ok_or_else(bad)?;
                    let bn = &mut bank.blocks.get_mut(&num(3)?).ok_or_else(bad)?.bn;
                    ((&mut bn.running_mean, &mut bn.running_var), *which)
                }
                _ => return Err(bad()),
            };
            let dst = match which {
                "mean" => target.0,
                "var" => target.1,
                _ => return Err(bad()),
            };
            if dst.len() != values.len() {
                return Err(Error::Config(format!(
                    "buffer `{name}` has {} values, expected {}",
                    values.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(values);
        }
        Ok(())
    }
}

impl<T: Real> HasParams<T> for MdlNetwork<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_location_sets() {
        use InsertionConfig::*;
        assert_eq!(All.locations(5).unwrap(), (1..=5).collect());
        assert_eq!(Early(1).locations(5).unwrap(), [1].into());
        assert_eq!(Early(3).locations(5).unwrap(), [1, 2, 3].into());
        assert_eq!(Late(1).locations(5).unwrap(), [5].into());
        assert_eq!(Late(3).locations(5).unwrap(), [3, 4, 5].into());
        assert!(MultiHead.locations(5).unwrap().is_empty());
        assert_eq!(Early(5).locations(5).unwrap(), All.locations(5).unwrap());
        assert_eq!(Late(5).locations(5).unwrap(), All.locations(5).unwrap());
        assert_eq!(Early(0).locations(5).unwrap(), MultiHead.locations(5).unwrap());
        assert!(Early(6).locations(5).is_err());
    }

    #[test]
    fn insertion_config_round_trips_through_text() {
        for c in [
            InsertionConfig::All,
            InsertionConfig::Early(2),
            InsertionConfig::Late(4),
            InsertionConfig::MultiHead,
        ] {
            assert_eq!(c.to_string().parse::<InsertionConfig>().unwrap(), c);
        }
        assert!("middle-2".parse::<InsertionConfig>().is_err());
        assert!("early-x".parse::<InsertionConfig>().is_err());
    }
}
