//! Round-robin multi-domain training: one batch per domain, gradients summed
//! over the cycle, then a single SGD-with-momentum update.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{DomainId, MdlNetwork};
use crate::nn::{softmax_cross_entropy, Mode};
use crate::real::Real;
use crate::tensor::{HasParams, ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    /// Parameter updates; each consumes one batch from every domain.
    pub total_iterations: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_drop_points: Vec<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    /// Domains visited per cycle; empty means every domain of the network in id order.
    pub domain_order: Vec<DomainId>,
    /// Validation cadence in updates; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            total_iterations: 14_000,
            batch_size: 32,
            lr0: 1e-3,
            lr_drop_points: vec![8_000, 12_000],
            lr_drop_factor: 0.1,
            momentum: 0.9,
            domain_order: Vec::new(),
            eval_every: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.lr_drop_points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "lr_drop_points must be strictly increasing, got {:?}",
                self.lr_drop_points
            )));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..=1.0).contains(&self.lr_drop_factor) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("lr_drop_factor must lie in [0, 1] and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Learning rate for update `index`: `lr0 * factor^(drop points reached)`.
pub fn lr_at(index: usize, sched: &TrainSchedule) -> f64 {
    let passed = sched.lr_drop_points.iter().filter(|&&p| index >= p).count();
    sched.lr0 * sched.lr_drop_factor.powi(passed as i32)
}

/// A batch whose samples all come from one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch<T> {
    pub clips: Tensor<T>,
    pub labels: Vec<usize>,
    pub domain: DomainId,
}

impl<T: Real> DomainBatch<T> {
    pub fn new(clips: Tensor<T>, labels: Vec<usize>, domain: DomainId) -> Result<Self> {
        if clips.shape().len() != 5 || clips.shape()[0] != labels.len() {
            return Err(Error::dim(
                "DomainBatch::new",
                format!("clips {:?} do not match {} labels", clips.shape(), labels.len()),
            ));
        }
        Ok(DomainBatch { clips, labels, domain })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A source of training batches for one domain.
pub trait DomainSampler<T: Real> {
    fn domain_id(&self) -> DomainId;
    /// Number of training items.
    fn len(&self) -> usize;
    fn next_batch(&mut self, batch_size: usize) -> Result<DomainBatch<T>>;
}

/// Endless batches in schedule order `d1, d2, ..., dD, d1, ...`.
pub struct DomainCycle<'a, T: Real> {
    samplers: &'a mut [Box<dyn DomainSampler<T>>],
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl<T: Real> DomainCycle<'_, T> {
    /// Domains visited per cycle.
    pub fn domains(&self) -> Vec<DomainId> {
        self.order.iter().map(|&i| self.samplers[i].domain_id()).collect()
    }

    pub fn period(&self) -> usize {
        self.order.len()
    }

    /// The next full cycle, one batch per domain.
    pub fn next_cycle(&mut self) -> Result<Vec<DomainBatch<T>>> {
        (0..self.order.len()).map(|_| self.next_batch()).collect()
    }

    fn next_batch(&mut self) -> Result<DomainBatch<T>> {
        let i = self.order[self.pos % self.order.len()];
        self.pos += 1;
        self.samplers[i].next_batch(self.batch_size)
    }
}

impl<T: Real> Iterator for DomainCycle<'_, T> {
    type Item = Result<DomainBatch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

pub fn domain_cycle<'a, T: Real>(
    sched: &TrainSchedule,
    samplers: &'a mut [Box<dyn DomainSampler<T>>],
) -> Result<DomainCycle<'a, T>> {
    sched.validate()?;
    let ids: Vec<DomainId> = if sched.domain_order.is_empty() {
        let mut ids: Vec<_> = samplers.iter().map(|s| s.domain_id()).collect();
        ids.sort();
        ids
    } else {
        sched.domain_order.clone()
    };
    if ids.is_empty() {
        return Err(Error::Config("no domains to train on".into()));
    }
    let mut order = Vec::with_capacity(ids.len());
    for id in ids {
        let i = samplers
            .iter()
            .position(|s| s.domain_id() == id)
            .ok_or_else(|| Error::Config(format!("no dataset for domain {id}")))?;
        if samplers[i].len() == 0 {
            return Err(Error::Config(format!("dataset for domain {id} is empty")));
        }
        order.push(i);
    }
    Ok(DomainCycle {
        samplers,
        order,
        pos: 0,
        batch_size: sched.batch_size,
    })
}

/// Heavy-ball SGD: `v <- mu v + g`, `p <- p - lr v`. Parameters that received
/// no gradient are left alone, velocity included.
#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    pub momentum: f64,
    velocity: Vec<Option<Vec<T>>>,
    updates: usize,
    lr: f64,
}

impl<T: Real> SgdMomentum<T> {
    pub fn new(momentum: f64) -> Self {
        SgdMomentum {
            momentum,
            velocity: Vec::new(),
            updates: 0,
            lr: 0.0,
        }
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Learning rate used by the latest step.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn velocity(&self, index: usize) -> Option<&[T]> {
        self.velocity.get(index).and_then(|v| v.as_deref())
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        let (mu, lr_t) = (T::lit(self.momentum), T::lit(lr));
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for id in store.ids().collect::<Vec<_>>() {
            let tensor = store.tensor_mut(id);
            let Some(grad) = tensor.grad().map(<[T]>::to_vec) else {
                continue;
            };
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![T::zero(); grad.len()]);
            for ((vi, &g), p) in v.iter_mut().zip(&grad).zip(tensor.data_mut()) {
                *vi = mu * *vi + g;
                *p -= lr_t * *vi;
            }
        }
        store.zero_grad();
        self.updates += 1;
        self.lr = lr;
    }
}

/// Forward and backward for one batch in train mode; gradients are added to
/// the network's parameter gradients. Returns the mean cross-entropy.
pub fn backward_batch<T: Real>(net: &mut MdlNetwork<T>, batch: &DomainBatch<T>, update: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let logits = net.forward(&mut tape, &batch.clips, batch.domain, Mode::Train);
    let loss = logits.and_then(|l| softmax_cross_entropy(&mut tape, l, &batch.labels));
    let loss = match loss {
        Ok(loss) => loss,
        Err(Error::NonFinite { .. }) => {
            return Err(Error::NanLoss {
                domain: batch.domain.get(),
                update,
            })
        }
        Err(e) => return Err(e),
    };
    let value = tape.scalar(loss)?.as_f64();
    if !value.is_finite() {
        return Err(Error::NanLoss {
            domain: batch.domain.get(),
            update,
        });
    }
    tape.backward(loss, net.params_mut())?;
    Ok(value)
}

/// Runs every batch of a cycle, leaving the summed gradients in place.
pub fn accumulate<T: Real>(
    net: &mut MdlNetwork<T>,
    batches: &[DomainBatch<T>],
    update: usize,
) -> Result<Vec<(DomainId, f64)>> {
    batches
        .iter()
        .map(|b| backward_batch(net, b, update).map(|l| (b.domain, l)))
        .collect()
}

/// One training update: accumulate over the cycle, step once, clear gradients.
pub fn accumulate_and_step<T: Real>(
    net: &mut MdlNetwork<T>,
    opt: &mut SgdMomentum<T>,
    batches: &[DomainBatch<T>],
    lr: f64,
    update: usize,
) -> Result<Vec<(DomainId, f64)>> {
    net.params_mut().zero_grad();
    let losses = match accumulate(net, batches, update) {
        Ok(l) => l,
        Err(e) => {
            net.params_mut().zero_grad();
            return Err(e);
        }
    };
    opt.step(net.params_mut(), lr);
    Ok(losses)
}

/// One line of a run record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub update_index: usize,
    pub domain_id: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_top1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub rows: Vec<RunRow>,
}

impl RunRecord {
    /// Summed domain losses of one update.
    pub fn cycle_loss(&self, update: usize) -> f64 {
        self.rows.iter().filter(|r| r.update_index == update).map(|r| r.loss).sum()
    }

    pub fn losses(&self, domain: usize) -> Vec<f64> {
        self.rows.iter().filter(|r| r.domain_id == domain).map(|r| r.loss).collect()
    }

    /// Latest validation accuracy logged for `domain`.
    pub fn final_top1(&self, domain: usize) -> Option<f64> {
        self.rows.iter().rev().filter(|r| r.domain_id == domain).find_map(|r| r.val_top1)
    }

    /// Equality ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &RunRecord) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                RunRow { wall_ms: 0.0, ..a.clone() } == RunRow { wall_ms: 0.0, ..b.clone() }
            })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("update_index,domain_id,loss,lr,wall_ms,val_top1\n");
        for r in &self.rows {
            let top1 = r.val_top1.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{:.3},{}\n",
                r.update_index, r.domain_id, r.loss, r.lr, r.wall_ms, top1
            ));
        }
        out
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(RunRecord { rows })
    }

    /// Writes `<stem>.csv` and `<stem>.jsonl` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let jsonl = dir.join(format!("{stem}.jsonl"));
        let mut f = fs::File::create(&jsonl).map_err(|e| Error::io(&jsonl, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(&jsonl, e))?;
        Ok(())
    }
}

/// Validation callback: `(net, update) -> [(domain, top1)]`.
pub type EvalHook<'a, T> = dyn FnMut(&mut MdlNetwork<T>, usize) -> Result<Vec<(DomainId, f64)>> + 'a;

/// Runs `sched.total_iterations` updates. Validation runs every
/// `eval_every` updates and after the last one; its accuracies are attached
/// to the rows of the update that preceded it.
pub fn train<T: Real>(
    net: &mut MdlNetwork<T>,
    sched: &TrainSchedule,
    samplers: &mut [Box<dyn DomainSampler<T>>],
    mut eval_hook: Option<&mut EvalHook<'_, T>>,
) -> Result<RunRecord> {
    let mut cycle = domain_cycle(sched, samplers)?;
    for id in cycle.domains() {
        net.domain(id)?;
    }
    let mut opt = SgdMomentum::new(sched.momentum);
    let mut record = RunRecord::default();
    let start = Instant::now();
    for update in 0..sched.total_iterations {
        let batches = cycle.next_cycle()?;
        let lr = lr_at(update, sched);
        let losses = accumulate_and_step(net, &mut opt, &batches, lr, update)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let first = record.rows.len();
        record.rows.extend(losses.into_iter().map(|(d, loss)| RunRow {
            update_index: update,
            domain_id: d.get(),
            loss,
            lr,
            wall_ms,
            val_top1: None,
        }));
        let last = update + 1 == sched.total_iterations;
        let due = sched.eval_every > 0 && (update + 1) % sched.eval_every == 0;
        if let Some(hook) = eval_hook.as_deref_mut() {
            if last || due {
                for (d, acc) in hook(net, update)? {
                    if let Some(row) = record.rows[first..].iter_mut().find(|r| r.domain_id == d.get()) {
                        row.val_top1 = Some(acc);
                    }
                }
            }
        }
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_steps() {
        let s = TrainSchedule::default();
        assert_eq!(lr_at(0, &s), 1e-3);
        assert!((lr_at(7_999, &s) - 1e-3).abs() < 1e-18);
        assert!((lr_at(8_000, &s) - 1e-4).abs() < 1e-18);
        assert!((lr_at(12_000, &s) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn schedule_validation() {
        let bad = TrainSchedule {
            lr_drop_points: vec![10, 10],
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let zero = TrainSchedule {
            batch_size: 0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
    }
}
