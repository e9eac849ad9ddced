use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which accounting bucket a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamTag {
    /// Shared backbone layers.
    Base,
    /// Per-domain classification heads.
    Head,
    /// Per-domain adapter blocks.
    Adapter,
    /// Layer norms after adapters, shared by all domains.
    PostNorm,
}

impl ParamTag {
    /// Name prefix used in checkpoints.
    pub fn prefix(self) -> &'static str {
        match self {
            ParamTag::Base => "base",
            ParamTag::Head => "head",
            ParamTag::Adapter => "adapter",
            ParamTag::PostNorm => "ln",
        }
    }
}

impl fmt::Display for ParamTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub tag: ParamTag,
    pub tensor: Tensor<T>,
}

/// Flat, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tag: ParamTag, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, tag, tensor });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// SHA-256 over names and raw values; changes iff any value changes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for v in p.tensor.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Fingerprint restricted to one tag.
    pub fn fingerprint_tag(&self, tag: ParamTag) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.tag == tag) {
            h.update(p.name.as_bytes());
            for v in p.tensor.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
