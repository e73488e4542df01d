//! Anchored adaptation: task loss plus a forward-KL penalty toward a frozen
//! snapshot of the group state, with epoch-1 eviction and plateau stopping.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Tape;
use crate::backbone::{BoundIntervention, FrozenBackbone};
use crate::error::{Error, Result};
use crate::loreft::{Intervention, InterventionSnapshot};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::rng::{derive_seed, Rng};
use crate::router::GroupState;
use crate::tasks::Example;

/// Minimum drop in the windowed task loss that still counts as progress.
pub const LOSS_PLATEAU_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    /// KL coefficient.
    pub beta: f64,
    /// Eviction threshold on the epoch-1 mean KL.
    pub eta: f64,
    pub epochs: usize,
    pub lr: f64,
    pub rolling_window: usize,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub adam: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.3,
            eta: 0.05,
            epochs: 5,
            lr: 2e-4,
            rolling_window: 20,
            batch_size: 4,
            warmup_ratio: 0.05,
            adam: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rolling_window == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "rolling_window, batch_size and epochs must be positive".into(),
            ));
        }
        if !(self.beta >= 0.0) || !(self.lr >= 0.0) || !(self.eta >= 0.0) {
            return Err(Error::InvalidConfig("beta, lr and eta must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub task_term: f64,
    pub kl_term: f64,
    pub total: f64,
}

/// One optimizer step as logged.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub task_loss: f64,
    pub kl: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
    /// Mean KL over epoch 1.
    pub mu1: f64,
    pub evicted: bool,
    /// Number of optimizer steps actually taken.
    pub stop_step: usize,
    pub scheduled_steps: usize,
    /// Largest `‖R·Rᵀ − I‖_max` seen after any step.
    pub max_orthonormality_error: f64,
}

impl TrainTrace {
    pub fn kl(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.kl).collect()
    }

    pub fn task_losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.task_loss).collect()
    }

    pub fn stopped_early(&self) -> bool {
        !self.evicted && self.stop_step < self.scheduled_steps
    }
}

/// Per-example anchor log-probabilities at label positions (rows × vocab).
type AnchorLogProbs = Vec<Vec<f64>>;

fn anchor_log_probs(
    backbone: &FrozenBackbone,
    anchor: &Intervention,
    batch: &[&Example],
) -> Result<AnchorLogProbs> {
    let mut tape = Tape::new();
    let bb = backbone.bind(&mut tape);
    let bound = BoundIntervention::bind(anchor, &mut tape)?;
    let mut out = Vec::with_capacity(batch.len());
    for ex in batch {
        let (logits, _) = backbone.forward_on_tape(&mut tape, &bb, &ex.input(), &bound.hooks(ex.prompt.len()))?;
        let lp = tape.log_softmax(logits);
        let rows: Vec<usize> = ex.label_positions().collect();
        let sel = tape.select_rows(lp, &rows)?;
        out.push(tape.value(sel).to_vec());
    }
    Ok(out)
}

/// Task loss and (optionally) anchored KL of `live` on `batch`, with the
/// gradient of the total written into `live`'s parameters when `with_grad`.
fn objective(
    backbone: &FrozenBackbone,
    live: &mut Intervention,
    anchor: Option<&Intervention>,
    batch: &[&Example],
    beta: f64,
    with_grad: bool,
) -> Result<LossBreakdown> {
    if batch.iter().all(|ex| ex.label.is_empty()) || batch.is_empty() {
        return Err(Error::NoLabelPositions);
    }
    let anchor_lp = anchor.map(|a| anchor_log_probs(backbone, a, batch)).transpose()?;
    let vocab = backbone.config().vocab_size;
    let positions: usize = batch.iter().map(|e| e.label.len()).sum();
    let scale = 1.0 / positions as f64;

    let (result, grads) = {
        let mut tape = Tape::new();
        let bb = backbone.bind(&mut tape);
        let bound = BoundIntervention::bind(live, &mut tape)?;
        let mut ce_sum = None;
        let mut cross_sum = None;
        let mut task = 0.0;
        let mut kl = 0.0;
        for (i, ex) in batch.iter().enumerate() {
            let (logits, _) =
                backbone.forward_on_tape(&mut tape, &bb, &ex.input(), &bound.hooks(ex.prompt.len()))?;
            let lp = tape.log_softmax(logits);
            let rows: Vec<usize> = ex.label_positions().collect();
            let sel = tape.select_rows(lp, &rows)?;
            let picked = tape.pick(sel, &ex.label)?;
            task -= tape.value(picked).iter().sum::<f64>();
            let s = tape.sum(picked);
            ce_sum = Some(match ce_sum {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
            if let Some(alp) = &anchor_lp {
                let a = &alp[i];
                let live_lp = tape.value(sel);
                for (pa_log, pl_log) in a.iter().zip(live_lp) {
                    let pa = libm::exp(*pa_log);
                    if pa > 0.0 {
                        kl += pa * (pa_log - pl_log);
                    }
                }
                if beta != 0.0 && with_grad {
                    let probs: Vec<f64> = a.iter().map(|x| libm::exp(*x)).collect();
                    let pa = tape.constant(vec![rows.len(), vocab], probs)?;
                    let prod = tape.mul(pa, sel)?;
                    let c = tape.sum(prod);
                    cross_sum = Some(match cross_sum {
                        Some(acc) => tape.add(acc, c)?,
                        None => c,
                    });
                }
            }
        }
        let task = task * scale;
        let kl = (kl * scale).max(0.0);
        let breakdown = LossBreakdown {
            task_term: task,
            kl_term: kl,
            total: task + beta * kl,
        };
        let grads = if with_grad {
            // KL(anchor || live) = const - sum(p_anchor * log p_live)
            let ce = ce_sum.ok_or(Error::NoLabelPositions)?;
            let mut total = tape.scale(ce, -scale);
            if let Some(cross) = cross_sum {
                let k = tape.scale(cross, -beta * scale);
                total = tape.add(total, k)?;
            }
            let g = tape.backward(total)?;
            let mut out = Vec::new();
            for (_, site) in bound.sites() {
                for v in [site.r_raw, site.w, site.b] {
                    out.push(g.get(v).map(|s| s.to_vec()));
                }
            }
            Some(out)
        } else {
            None
        };
        (breakdown, grads)
    };
    if let Some(grads) = grads {
        for (p, g) in live.params_mut().into_iter().zip(grads) {
            p.grad = g;
        }
    }
    Ok(result)
}

/// Forward-KL anchored loss of `live` against a frozen `anchor` on `batch`.
/// Populates the gradient of the total on `live`'s trainable tensors.
pub fn anchored_loss(
    backbone: &FrozenBackbone,
    batch: &[&Example],
    live: &mut Intervention,
    anchor: &InterventionSnapshot,
    beta: f64,
) -> Result<LossBreakdown> {
    objective(backbone, live, Some(anchor.intervention()), batch, beta, true)
}

/// Value of [`anchored_loss`] without touching gradients.
pub fn anchored_loss_value(
    backbone: &FrozenBackbone,
    batch: &[&Example],
    live: &Intervention,
    anchor: &InterventionSnapshot,
    beta: f64,
) -> Result<LossBreakdown> {
    let mut scratch = live.clone();
    objective(backbone, &mut scratch, Some(anchor.intervention()), batch, beta, false)
}

/// Plain task cross-entropy with gradients (used by warm-up).
pub fn task_loss(backbone: &FrozenBackbone, batch: &[&Example], live: &mut Intervention) -> Result<f64> {
    Ok(objective(backbone, live, None, batch, 0.0, true)?.task_term)
}

pub fn task_loss_value(backbone: &FrozenBackbone, batch: &[&Example], live: &Intervention) -> Result<f64> {
    let mut scratch = live.clone();
    Ok(objective(backbone, &mut scratch, None, batch, 0.0, false)?.task_term)
}

/// True iff the epoch-1 mean KL strictly exceeds `eta`.
pub fn check_eviction(trace: &TrainTrace, eta: f64) -> bool {
    trace.mu1 > eta
}

/// Both the windowed KL and the windowed task loss have stopped falling.
pub fn early_stop(trace: &TrainTrace, window: usize) -> bool {
    let n = trace.steps.len();
    if window == 0 || n < 2 * window {
        return false;
    }
    let mean = |f: fn(&StepRecord) -> f64, r: core::ops::Range<usize>| {
        trace.steps[r].iter().map(f).sum::<f64>() / window as f64
    };
    let (prev, last) = (n - 2 * window..n - window, n - window..n);
    let kl_flat = mean(|s| s.kl, last.clone()) >= mean(|s| s.kl, prev.clone());
    let loss_flat = mean(|s| s.task_loss, prev) - mean(|s| s.task_loss, last) <= LOSS_PLATEAU_TOL;
    kl_flat && loss_flat
}

/// Batches for one epoch: a seeded shuffle of the training indices.
fn epoch_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Options for a run of [`fit`].
pub struct FitSpec<'a> {
    pub data: &'a [Example],
    pub anchor: Option<&'a InterventionSnapshot>,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub adam: AdamWConfig,
    /// Total optimizer steps unless stopped earlier.
    pub total_steps: usize,
    pub seed: u64,
    /// Halt after epoch 1 when its mean KL exceeds this.
    pub evict_above: Option<f64>,
    /// Plateau window for early stopping.
    pub early_stop_window: Option<usize>,
}

/// Run AdamW on `live` and record the trace.
pub fn fit(backbone: &FrozenBackbone, live: &mut Intervention, spec: &FitSpec<'_>) -> Result<TrainTrace> {
    if spec.data.is_empty() {
        return Err(Error::EmptyTaskData);
    }
    let per_epoch = steps_per_epoch(spec.data.len(), spec.batch_size);
    let schedule = LrSchedule {
        base_lr: spec.lr,
        total_steps: spec.total_steps,
        warmup_ratio: spec.warmup_ratio,
    };
    let mut opt = AdamW::new(spec.adam);
    let mut trace = TrainTrace {
        scheduled_steps: spec.total_steps,
        ..TrainTrace::default()
    };
    let mut batches = Vec::new();
    let mut step = 0;
    while step < spec.total_steps {
        let epoch = step / per_epoch;
        if step % per_epoch == 0 {
            batches = epoch_batches(spec.data.len(), spec.batch_size, derive_seed(spec.seed, epoch as u64));
        }
        let batch: Vec<&Example> = batches[step % per_epoch].iter().map(|&i| &spec.data[i]).collect();
        let loss = objective(
            backbone,
            live,
            spec.anchor.map(|a| a.intervention()),
            &batch,
            spec.beta,
            true,
        )?;
        let mut params = live.params_mut();
        let lr = opt.step(&mut params, &schedule)?;
        for p in params {
            p.grad = None;
        }
        trace.max_orthonormality_error = trace.max_orthonormality_error.max(live.orthonormality_error()?);
        trace.steps.push(StepRecord {
            step,
            epoch: epoch + 1,
            task_loss: loss.task_term,
            kl: loss.kl_term,
            lr,
        });
        step += 1;
        if step == per_epoch.min(spec.total_steps) {
            let first = &trace.steps[..step];
            trace.mu1 = first.iter().map(|s| s.kl).sum::<f64>() / first.len() as f64;
            if let Some(eta) = spec.evict_above {
                if check_eviction(&trace, eta) {
                    trace.evicted = true;
                    break;
                }
            }
        }
        if let Some(w) = spec.early_stop_window {
            if early_stop(&trace, w) {
                break;
            }
        }
    }
    trace.stop_step = trace.steps.len();
    Ok(trace)
}

/// Train `task_data` starting from `group`'s state against a snapshot of it.
/// With `eta` set, training halts after epoch 1 when eviction fires; the
/// caller is responsible for moving the task (see [`evict`]).
pub fn train_task(
    backbone: &FrozenBackbone,
    task_data: &[Example],
    group: &GroupState,
    cfg: &TrainConfig,
    eta: Option<f64>,
    seed: u64,
) -> Result<(Intervention, InterventionSnapshot, TrainTrace)> {
    cfg.validate()?;
    let anchor = group.intervention.snapshot();
    let mut live = anchor.to_intervention();
    let spec = FitSpec {
        data: task_data,
        anchor: Some(&anchor),
        beta: cfg.beta,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        warmup_ratio: cfg.warmup_ratio,
        adam: cfg.adam,
        total_steps: cfg.epochs * steps_per_epoch(task_data.len(), cfg.batch_size),
        seed,
        evict_above: eta,
        early_stop_window: Some(cfg.rolling_window),
    };
    let trace = fit(backbone, &mut live, &spec)?;
    Ok((live, anchor, trace))
}

/// Restore `group` from `anchor` and open a fresh group seeded from the
/// evicted task's current `live` intervention.
pub fn evict(group: &mut GroupState, anchor: &InterventionSnapshot, live: &Intervention, new_gid: usize, task_id: u32) -> Result<GroupState> {
    anchor.intervention().transfer_into(&mut group.intervention)?;
    group.members.retain(|&m| m != task_id);
    let mut seeded = anchor.to_intervention();
    live.transfer_into(&mut seeded)?;
    Ok(GroupState {
        gid: new_gid,
        intervention: seeded,
        members: vec![task_id],
    })
}

/// Commit a trained intervention to its group.
pub fn merge(live: &Intervention, group: &mut GroupState) -> Result<()> {
    live.transfer_into(&mut group.intervention)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_of(kl: &[f64], loss: &[f64]) -> TrainTrace {
        TrainTrace {
            steps: kl
                .iter()
                .zip(loss)
                .enumerate()
                .map(|(i, (&k, &l))| StepRecord { step: i, epoch: 1, task_loss: l, kl: k, lr: 0.1 })
                .collect(),
            ..TrainTrace::default()
        }
    }

    #[test]
    fn eviction_is_strict() {
        let mut t = TrainTrace::default();
        assert!(!check_eviction(&t, 0.5));
        t.mu1 = 0.5;
        assert!(!check_eviction(&t, 0.5));
        t.mu1 = 0.5000001;
        assert!(check_eviction(&t, 0.5));
    }

    #[test]
    fn early_stop_needs_both_plateaus() {
        let dec: Vec<f64> = (0..40).map(|i| 10.0 - i as f64 * 0.1).collect();
        for n in 1..=40 {
            assert!(!early_stop(&trace_of(&dec[..n], &dec[..n]), 5));
        }
        let flat = vec![0.3; 10];
        assert!(early_stop(&trace_of(&flat, &flat), 5));
        assert!(!early_stop(&trace_of(&flat[..9], &flat[..9]), 5));
        // KL flat but loss still falling
        assert!(!early_stop(&trace_of(&flat, &dec[..10]), 5));
        // loss flat but KL falling
        assert!(!early_stop(&trace_of(&dec[..10], &flat), 5));
    }

    #[test]
    fn batches_cover_data() {
        let b = epoch_batches(10, 4, 3);
        assert_eq!(b.len(), 3);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(10, 4, 3));
    }
}
