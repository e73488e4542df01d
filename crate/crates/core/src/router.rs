//! Warm-up routing on output-distribution divergence.
//!
//! Each task is warmed up for a few steps from a shared seed, then its
//! output distribution on a probe batch is compared with the no-adaptation
//! baseline and with every group's current state. The routing distance to
//! group `k` is
//!
//! ```text
//! d(t, k) = D_KG / max(min(D_K, D_G), ε)
//! ```
//!
//! with `D_K = symKL(warm, base)`, `D_G = symKL(group, base)` and
//! `D_KG = symKL(warm, group)`. The task joins its nearest group when
//! `d ≤ δ` and the ε floor is not active for that group; otherwise it opens a
//! new group seeded with its warm-up intervention.

use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::FrozenBackbone;
use crate::error::{Error, Result};
use crate::loreft::{Intervention, StreamSpec};
use crate::optim::AdamWConfig;
use crate::rng::{derive_seed, Rng};
use crate::tasks::{Example, TaskInstance};
use crate::trainer::{fit, FitSpec, TrainTrace};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GroupState {
    pub gid: usize,
    pub intervention: Intervention,
    pub members: Vec<u32>,
}

/// Shape and initialization of every intervention in a run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InterventionSpec {
    pub rank: usize,
    pub t_pos: usize,
    /// Layers to intervene on; empty means every layer.
    pub layers: Vec<usize>,
    /// Std of the noise added to `W = R` at initialization.
    pub init_noise: f64,
}

impl Default for InterventionSpec {
    fn default() -> Self {
        InterventionSpec {
            rank: 8,
            t_pos: 15,
            layers: Vec::new(),
            init_noise: 0.01,
        }
    }
}

impl InterventionSpec {
    pub fn layers_for(&self, num_layers: usize) -> Vec<usize> {
        if self.layers.is_empty() {
            (0..num_layers).collect()
        } else {
            self.layers.clone()
        }
    }

    pub fn fresh(&self, backbone: &FrozenBackbone, seed: u64) -> Result<Intervention> {
        let cfg = backbone.config();
        Intervention::random(
            cfg.hidden_dim,
            self.rank,
            &self.layers_for(cfg.num_layers),
            StreamSpec { t_pos: self.t_pos },
            self.init_noise,
            seed,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RouterParams {
    /// Join threshold on the routing distance.
    pub delta: f64,
    /// Floor on the distance denominator.
    pub epsilon: f64,
    /// Warm-up steps.
    pub warmup_steps: usize,
    /// Taken from the run's warm-up seed when loaded from a config file.
    #[cfg_attr(feature = "serde", serde(skip))]
    pub wu_seed: u64,
    pub top_k: usize,
    /// Probability mass spread uniformly over off-support tokens.
    pub smoothing: f64,
    pub probe_size: usize,
    pub warmup_lr: f64,
    pub warmup_batch: usize,
}

impl Default for RouterParams {
    fn default() -> Self {
        RouterParams {
            delta: 0.7,
            epsilon: 0.01,
            warmup_steps: 100,
            wu_seed: 0,
            top_k: 32,
            smoothing: 1e-6,
            probe_size: 16,
            warmup_lr: 2e-4,
            warmup_batch: 4,
        }
    }
}

/// Fixed probe sample drawn from a task's own data.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeBatch {
    pub examples: Vec<Example>,
    pub batch_seed: u64,
}

impl ProbeBatch {
    /// `size` examples from the task's probe split (topped up from training
    /// data when the probe split is smaller), in seeded order.
    pub fn draw(task: &TaskInstance, size: usize) -> Result<Self> {
        let mut pool: Vec<Example> = task.probe.clone();
        if pool.len() < size {
            pool.extend(task.train.iter().take(size - pool.len()).cloned());
        }
        if pool.is_empty() {
            return Err(Error::EmptyTaskData);
        }
        let batch_seed = derive_seed(task.data_seed, 0x9807_BE);
        Rng::new(batch_seed).shuffle(&mut pool);
        pool.truncate(size.max(1));
        Ok(ProbeBatch {
            examples: pool,
            batch_seed,
        })
    }
}

/// Smoothed top-k distribution at one label position.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PositionDist {
    /// `(token, probability)`, ascending by token.
    pub support: Vec<(usize, f64)>,
    /// Probability of each token outside the support.
    pub rest: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DistributionSignature {
    pub vocab: usize,
    pub positions: Vec<PositionDist>,
}

impl PositionDist {
    /// Keep the `top_k` most likely tokens, rescale them to `1 − smoothing`
    /// and spread `smoothing` evenly over the rest. With `top_k ≥ V` the
    /// distribution is kept whole.
    pub fn from_probs(probs: &[f64], top_k: usize, smoothing: f64) -> Self {
        let v = probs.len();
        let k = top_k.clamp(1, v);
        let mut order: Vec<usize> = (0..v).collect();
        // stable sort keeps lower ids first among ties
        order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(core::cmp::Ordering::Equal));
        let mut kept: Vec<usize> = order[..k].to_vec();
        kept.sort_unstable();
        let (keep_mass, rest) = if k == v { (1.0, 0.0) } else { (1.0 - smoothing, smoothing / (v - k) as f64) };
        let total: f64 = kept.iter().map(|&i| probs[i]).sum();
        let support = kept
            .into_iter()
            .map(|i| (i, (probs[i] / total * keep_mass).max(f64::MIN_POSITIVE)))
            .collect();
        PositionDist { support, rest }
    }

    pub fn dense(&self, vocab: usize) -> Vec<f64> {
        let mut out = vec![self.rest; vocab];
        for &(i, p) in &self.support {
            out[i] = p;
        }
        out
    }
}

/// Signature of `iv` (or the bare backbone) on a probe batch.
pub fn signature(
    backbone: &FrozenBackbone,
    iv: Option<&Intervention>,
    probe: &ProbeBatch,
    top_k: usize,
    smoothing: f64,
) -> Result<DistributionSignature> {
    let vocab = backbone.config().vocab_size;
    let mut positions = Vec::new();
    let mut probs = vec![0.0; vocab];
    for ex in &probe.examples {
        let logits = backbone.logits(&ex.input(), ex.prompt.len(), iv)?;
        for p in ex.label_positions() {
            crate::autodiff::softmax_slice(logits.row(p), &mut probs);
            positions.push(PositionDist::from_probs(&probs, top_k, smoothing));
        }
    }
    Ok(DistributionSignature { vocab, positions })
}

/// Mean over label positions of `KL(p‖q) + KL(q‖p)`.
pub fn sym_kl(p: &DistributionSignature, q: &DistributionSignature) -> Result<f64> {
    if p.positions.len() != q.positions.len() || p.vocab != q.vocab {
        return Err(Error::MisalignedSignatures {
            lhs: p.positions.len(),
            rhs: q.positions.len(),
        });
    }
    if p.positions.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (a, b) in p.positions.iter().zip(&q.positions) {
        let (da, db) = (a.dense(p.vocab), b.dense(q.vocab));
        total += da
            .iter()
            .zip(&db)
            .filter(|(x, y)| x != y)
            .map(|(&x, &y)| (x - y) * libm::log(x / y))
            .sum::<f64>();
    }
    Ok((total / p.positions.len() as f64).max(0.0))
}

/// `D_KG / max(min(D_K, D_G), ε)`.
pub fn routing_distance(d_kg: f64, d_k: f64, d_g: f64, epsilon: f64) -> f64 {
    d_kg / d_k.min(d_g).max(epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Decision {
    Join,
    New,
}

/// Divergences between a task and one candidate group.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Candidate {
    pub gid: usize,
    pub d_g: f64,
    pub d_kg: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoutingDecision {
    pub task_id: u32,
    pub decision: Decision,
    /// Group the task ended up in.
    pub gid: usize,
    pub best: Option<Candidate>,
    pub runner_up: Option<Candidate>,
    pub floor_triggered: bool,
    pub d_k: f64,
    pub candidates: Vec<Candidate>,
}

/// Apply the join rule to precomputed divergences. `new_gid` is the id a
/// new group would receive.
pub fn decide(task_id: u32, d_k: f64, groups: &[(usize, f64, f64)], params: &RouterParams, new_gid: usize) -> RoutingDecision {
    let mut candidates: Vec<Candidate> = groups
        .iter()
        .map(|&(gid, d_g, d_kg)| Candidate {
            gid,
            d_g,
            d_kg,
            distance: routing_distance(d_kg, d_k, d_g, params.epsilon),
        })
        .collect();
    candidates.sort_by(|a, b| {
        a.distance
            .partial_cmp(&b.distance)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.gid.cmp(&b.gid))
    });
    let best = candidates.first().copied();
    let runner_up = candidates.get(1).copied();
    let floor_triggered = best.is_some_and(|b| d_k.min(b.d_g) < params.epsilon);
    let join = best.filter(|b| b.distance <= params.delta && !floor_triggered);
    candidates.sort_by_key(|c| c.gid);
    RoutingDecision {
        task_id,
        decision: if join.is_some() { Decision::Join } else { Decision::New },
        gid: join.map_or(new_gid, |b| b.gid),
        best,
        runner_up,
        floor_triggered,
        d_k,
        candidates,
    }
}

/// Train a fresh intervention from the shared warm-up seed for
/// `warmup_steps` plain task-loss steps.
pub fn warmup(
    backbone: &FrozenBackbone,
    data: &[Example],
    params: &RouterParams,
    spec: &InterventionSpec,
) -> Result<(Intervention, TrainTrace)> {
    if params.warmup_steps == 0 {
        return Err(Error::InvalidConfig("warm-up needs at least one step".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyTaskData);
    }
    let mut iv = spec.fresh(backbone, params.wu_seed)?;
    let fit_spec = FitSpec {
        data,
        anchor: None,
        beta: 0.0,
        lr: params.warmup_lr,
        batch_size: params.warmup_batch,
        warmup_ratio: 0.05,
        adam: AdamWConfig::default(),
        total_steps: params.warmup_steps,
        seed: derive_seed(params.wu_seed, 0x3A12),
        evict_above: None,
        early_stop_window: None,
    };
    let trace = fit(backbone, &mut iv, &fit_spec)?;
    Ok((iv, trace))
}

/// Divergences of a warmed-up task against every group, on the task's probe.
pub fn assess(
    backbone: &FrozenBackbone,
    task: &TaskInstance,
    warm: &Intervention,
    groups: &[GroupState],
    params: &RouterParams,
) -> Result<RoutingDecision> {
    let probe = ProbeBatch::draw(task, params.probe_size)?;
    let sig = |iv: Option<&Intervention>| signature(backbone, iv, &probe, params.top_k, params.smoothing);
    let base = sig(None)?;
    let warm_sig = sig(Some(warm))?;
    let d_k = sym_kl(&warm_sig, &base)?;
    let mut dists = Vec::with_capacity(groups.len());
    for g in groups {
        let g_sig = sig(Some(&g.intervention))?;
        dists.push((g.gid, sym_kl(&g_sig, &base)?, sym_kl(&warm_sig, &g_sig)?));
    }
    Ok(decide(task.task_id, d_k, &dists, params, groups.len()))
}

/// Open a new group seeded with the warm-up intervention.
pub fn open_group(groups: &mut Vec<GroupState>, task_id: u32, warm: &Intervention) -> usize {
    let gid = groups.len();
    let mut seeded = warm.clone();
    warm.transfer_into(&mut seeded).expect("same shape");
    groups.push(GroupState {
        gid,
        intervention: seeded,
        members: vec![task_id],
    });
    gid
}

/// Warm up, assess, and commit the task to an existing or new group.
pub fn route(
    backbone: &FrozenBackbone,
    task: &TaskInstance,
    groups: &mut Vec<GroupState>,
    params: &RouterParams,
    spec: &InterventionSpec,
) -> Result<(RoutingDecision, Intervention)> {
    let (warm, _) = warmup(backbone, &task.train, params, spec)?;
    let decision = assess(backbone, task, &warm, groups, params)?;
    match decision.decision {
        Decision::Join => groups[decision.gid].members.push(task.task_id),
        Decision::New => {
            open_group(groups, task.task_id, &warm);
        }
    }
    Ok((decision, warm))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(dists: &[&[f64]]) -> DistributionSignature {
        DistributionSignature {
            vocab: dists[0].len(),
            positions: dists.iter().map(|p| PositionDist::from_probs(p, p.len(), 0.0)).collect(),
        }
    }

    #[test]
    fn distance_arithmetic() {
        assert_eq!(routing_distance(0.0, 0.5, 0.4, 0.01), 0.0);
        assert!((routing_distance(0.2, 0.5, 0.4, 0.01) - 0.5).abs() < 1e-15);
        assert_eq!(routing_distance(0.1, 0.001, 0.002, 0.01), 0.1 / 0.01);
    }

    #[test]
    fn sym_kl_closed_form() {
        let p = [0.2, 0.5, 0.3];
        let q = [0.4, 0.4, 0.2];
        let expected: f64 = p.iter().zip(&q).map(|(a, b): (&f64, &f64)| (a - b) * libm::log(a / b)).sum();
        let (sp, sq) = (sig(&[&p]), sig(&[&q]));
        assert!((sym_kl(&sp, &sq).unwrap() - expected).abs() < 1e-14);
        assert_eq!(sym_kl(&sp, &sp).unwrap(), 0.0);
        assert_eq!(sym_kl(&sp, &sq).unwrap(), sym_kl(&sq, &sp).unwrap());
    }

    #[test]
    fn misaligned_signatures_rejected() {
        let p = sig(&[&[0.5, 0.5]]);
        let q = sig(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert_eq!(sym_kl(&p, &q), Err(Error::MisalignedSignatures { lhs: 1, rhs: 2 }));
    }

    #[test]
    fn truncate_and_smooth() {
        let probs = [0.05, 0.3, 0.02, 0.2, 0.1, 0.15, 0.08, 0.1];
        let d = PositionDist::from_probs(&probs, 4, 1e-6);
        // top four: ids 1 (0.3), 3 (0.2), 5 (0.15), then 4 and 7 tie at 0.1 -> 4
        let kept: Vec<usize> = d.support.iter().map(|s| s.0).collect();
        assert_eq!(kept, [1, 3, 4, 5]);
        let mass = 0.3 + 0.2 + 0.15 + 0.1;
        for &(i, p) in &d.support {
            assert!((p - probs[i] / mass * (1.0 - 1e-6)).abs() < 1e-15);
        }
        assert!((d.rest - 1e-6 / 4.0).abs() < 1e-20);
        let total: f64 = d.dense(8).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(d.dense(8).iter().all(|&p| p > 0.0));
    }

    #[test]
    fn uniform_stays_uniform() {
        let d = PositionDist::from_probs(&[0.25; 4], 10, 1e-6);
        assert_eq!(d.dense(4), vec![0.25; 4]);
    }

    #[test]
    fn first_task_opens_group() {
        let d = decide(0, 0.4, &[], &RouterParams::default(), 0);
        assert_eq!(d.decision, Decision::New);
        assert_eq!(d.gid, 0);
        assert!(d.best.is_none() && !d.floor_triggered);
    }

    #[test]
    fn join_and_floor_rules() {
        let params = RouterParams::default();
        // distance 0.2 / 0.4 = 0.5 <= 0.7
        let d = decide(1, 0.5, &[(0, 0.4, 0.2)], &params, 1);
        assert_eq!((d.decision, d.gid), (Decision::Join, 0));
        // tiny movement: floor active, distance small but NEW
        let d = decide(2, 0.005, &[(0, 0.4, 0.00001)], &params, 1);
        assert!(d.floor_triggered);
        assert_eq!((d.decision, d.gid), (Decision::New, 1));
        // beyond delta
        let d = decide(3, 0.5, &[(0, 0.4, 0.4), (1, 0.5, 0.6)], &params, 2);
        assert_eq!(d.decision, Decision::New);
        assert_eq!(d.best.unwrap().gid, 0);
        assert_eq!(d.runner_up.unwrap().gid, 1);
    }
}
