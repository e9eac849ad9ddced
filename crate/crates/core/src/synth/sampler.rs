use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::sampling::{multiview_predict, sample_eval_views, sample_train_clip, stack_clips, ClipSamplerConfig};
use super::{ClipCache, RawClip, Split, SyntheticDomain};
use crate::error::{Error, Result};
use crate::network::{DomainId, MdlNetwork};
use crate::real::Real;
use crate::trainer::{DomainBatch, DomainSampler};

/// Training batches from a synthetic domain: epoch-wise shuffled items,
/// each turned into a randomly augmented clip.
pub struct SyntheticSampler {
    domain: SyntheticDomain,
    clips: ClipSamplerConfig,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    cache: Option<ClipCache>,
}

impl SyntheticSampler {
    pub fn new(domain: SyntheticDomain, clips: ClipSamplerConfig, seed: u64) -> Result<Self> {
        domain.validate()?;
        clips.validate()?;
        if clips.window_frames > domain.geometry.frames {
            return Err(Error::Config(format!(
                "window of {} frames exceeds the {} frames of domain `{}`",
                clips.window_frames, domain.geometry.frames, domain.name
            )));
        }
        let order = (0..domain.train_size).collect();
        Ok(SyntheticSampler {
            rng: ChaCha8Rng::seed_from_u64(seed ^ (domain.id as u64).wrapping_mul(0xA24B_AED4_963E_E407)),
            domain,
            clips,
            order,
            cursor: usize::MAX,
            cache: None,
        })
    }

    /// Serves raw clips through an on-disk cache under `root/domain-{id}`.
    pub fn with_cache(mut self, root: &Path) -> Result<Self> {
        self.cache = Some(ClipCache::open(root.join(format!("domain-{}", self.domain.id)))?);
        Ok(self)
    }

    pub fn domain(&self) -> &SyntheticDomain {
        &self.domain
    }

    pub fn clip_config(&self) -> &ClipSamplerConfig {
        &self.clips
    }

    pub fn cache(&self) -> Option<&ClipCache> {
        self.cache.as_ref()
    }

    fn raw(&mut self, split: Split, index: usize) -> Result<(RawClip, usize)> {
        match &mut self.cache {
            Some(cache) => cache.item(&self.domain, split, index),
            None => self.domain.item(split, index),
        }
    }

    fn next_index(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

impl<T: Real> DomainSampler<T> for SyntheticSampler {
    fn domain_id(&self) -> DomainId {
        DomainId::new(self.domain.id)
    }

    fn len(&self) -> usize {
        self.domain.train_size
    }

    fn next_batch(&mut self, batch_size: usize) -> Result<DomainBatch<T>> {
        let mut clips = Vec::with_capacity(batch_size);
        let mut labels = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let index = self.next_index();
            let (raw, label) = self.raw(Split::Train, index)?;
            clips.push(sample_train_clip(&raw, &self.clips, &mut self.rng)?);
            labels.push(label);
        }
        DomainBatch::new(stack_clips(&clips)?, labels, DomainId::new(self.domain.id))
    }
}

/// Multi-view top-1 accuracy on the first `limit` validation items.
pub fn evaluate_top1<T: Real>(
    net: &mut MdlNetwork<T>,
    domain: &SyntheticDomain,
    clips: &ClipSamplerConfig,
    limit: Option<usize>,
) -> Result<f64> {
    let n = limit.map_or(domain.val_size, |l| l.min(domain.val_size));
    if n == 0 {
        return Err(Error::Config(format!("domain `{}` has no validation items", domain.name)));
    }
    let id = DomainId::new(domain.id);
    let mut correct = 0usize;
    for i in 0..n {
        let (raw, label) = domain.item(Split::Val, i)?;
        let views = sample_eval_views::<T>(&raw, clips)?;
        let scores = multiview_predict(net, &views, id)?;
        if argmax(&scores) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Index of the largest score; ties go to the lowest index.
pub(crate) fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
