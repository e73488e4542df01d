//! Low-rank orthonormal subspace interventions on the residual stream.
//!
//! A [`LayerIntervention`] holds the triple `(R_raw, W, b)` for one layer and
//! edits a hidden vector as
//!
//! ```text
//! h' = h + Rᵀ (W h + b − R h)
//! ```
//!
//! where `R` is the row-orthonormalized form of `R_raw`. Only the
//! unconstrained `R_raw` is ever stored or transferred; `R` is recomputed on
//! every forward, differentiably, so gradients reach `R_raw`.
//!
//! An [`Intervention`] places one such triple at each of a set of layers and
//! applies it at the f-stream and l-stream prompt positions chosen by
//! [`select_positions`].

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Relative residual norm below which a row counts as dependent on the
/// rows before it.
const DEPENDENCE_TOL: f64 = 1e-8;

/// Number of prompt positions in each of the f-stream and l-stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StreamSpec {
    pub t_pos: usize,
}

/// First `t_pos` and last `t_pos` positions of a prompt, merged, clipped to
/// the prompt and sorted. Overlapping streams intervene once per position.
pub fn select_positions(prompt_len: usize, spec: StreamSpec) -> Vec<usize> {
    let head = 0..spec.t_pos.min(prompt_len);
    let tail = prompt_len.saturating_sub(spec.t_pos)..prompt_len;
    let mut out: Vec<usize> = head.chain(tail).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Differentiable modified Gram-Schmidt over the rows of an `r × d` matrix.
///
/// Produces the `R` factor of the LQ decomposition with positive diagonal,
/// so positive row scalings are removed and orthonormal inputs are fixed
/// points.
pub fn orthonormalize_on_tape(tape: &mut Tape<'_>, raw: Var) -> Result<Var> {
    let shape = tape.shape(raw).to_vec();
    if shape.len() != 2 || shape[0] > shape[1] {
        return Err(Error::ShapeMismatch {
            op: "orthonormalize",
            lhs: shape,
            rhs: Vec::new(),
        });
    }
    let rows = shape[0];
    let mut basis: Vec<Var> = Vec::with_capacity(rows);
    let mut max_norm: f64 = 0.0;
    let mut min_residual = f64::INFINITY;
    for i in 0..rows {
        let mut v = tape.select_rows(raw, &[i])?;
        let original = libm::sqrt(sq_norm(tape.value(v)));
        max_norm = max_norm.max(original);
        for &q in &basis {
            let coef = tape.matmul_t(v, q)?;
            let along = tape.scale_by(q, coef)?;
            v = tape.sub(v, along)?;
        }
        let residual = libm::sqrt(sq_norm(tape.value(v)));
        min_residual = min_residual.min(residual);
        if !(residual > DEPENDENCE_TOL * original) || original == 0.0 {
            return Err(Error::RankDeficient {
                row: i,
                condition: max_norm / residual,
            });
        }
        let sq = tape.matmul_t(v, v)?;
        let norm = tape.sqrt(sq);
        let inv = tape.recip(norm);
        basis.push(tape.scale_by(v, inv)?);
    }
    tape.concat_rows(&basis)
}

/// Row-orthonormalize a matrix outside any gradient graph.
pub fn orthonormalize(raw: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(raw.shape().to_vec(), raw.data().to_vec())?;
    let q = orthonormalize_on_tape(&mut tape, v)?;
    Ok(tape.to_tensor(q))
}

/// Largest absolute entry of `R·Rᵀ − I`.
pub fn orthonormality_error(r: &Tensor) -> f64 {
    let (rows, cols) = (r.rows(), r.cols());
    let mut worst: f64 = 0.0;
    for i in 0..rows {
        for j in 0..rows {
            let dot: f64 = (0..cols).map(|k| r.at(i, k) * r.at(j, k)).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// One layer's `(R_raw, W, b)` triple.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerIntervention {
    pub r_raw: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

/// Tape handles for a bound [`LayerIntervention`]: projected `R`, `W`, `b`,
/// plus the raw leaves gradients land on.
#[derive(Debug, Clone, Copy)]
pub struct BoundSite {
    pub r: Var,
    pub w: Var,
    pub b: Var,
    pub r_raw: Var,
}

impl LayerIntervention {
    /// Random orthonormal-ish `R_raw`, `W = R + noise`, `b = 0`; close to the
    /// identity edit when `noise` is small.
    pub fn random(dim: usize, rank: usize, noise: f64, rng: &mut Rng) -> Result<Self> {
        if rank == 0 || rank > dim {
            return Err(Error::InvalidConfig(alloc::format!(
                "rank {rank} must be in 1..={dim}"
            )));
        }
        let r_raw = Tensor::new(vec![rank, dim], rng.normals(rank * dim, 1.0 / libm::sqrt(dim as f64)))?;
        let r = orthonormalize(&r_raw)?;
        let w_data = r
            .data()
            .iter()
            .zip(rng.normals(rank * dim, noise))
            .map(|(a, e)| a + e)
            .collect();
        Ok(LayerIntervention {
            r_raw: r_raw.trainable(),
            w: Tensor::new(vec![rank, dim], w_data)?.trainable(),
            b: Tensor::zeros(vec![rank]).trainable(),
        })
    }

    /// The identity edit for a given `R_raw`: `W = R`, `b = 0`.
    pub fn identity(r_raw: Tensor) -> Result<Self> {
        let r = orthonormalize(&r_raw)?;
        let rank = r.rows();
        Ok(LayerIntervention {
            r_raw: r_raw.trainable(),
            w: r.trainable(),
            b: Tensor::zeros(vec![rank]).trainable(),
        })
    }

    pub fn rank(&self) -> usize {
        self.r_raw.rows()
    }

    pub fn dim(&self) -> usize {
        self.r_raw.cols()
    }

    pub fn projection(&self) -> Result<Tensor> {
        orthonormalize(&self.r_raw)
    }

    /// `h + Rᵀ(W h + b − R h)` for a single hidden vector.
    pub fn apply(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: h.len(),
            });
        }
        let r = self.projection()?;
        let mut out = h.to_vec();
        for k in 0..self.rank() {
            let wh: f64 = self.w.row(k).iter().zip(h).map(|(a, b)| a * b).sum();
            let rh: f64 = r.row(k).iter().zip(h).map(|(a, b)| a * b).sum();
            let coef = wh + self.b.data()[k] - rh;
            for (o, rk) in out.iter_mut().zip(r.row(k)) {
                *o += rk * coef;
            }
        }
        Ok(out)
    }

    /// Record the parameters on a tape and project `R_raw`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Result<BoundSite> {
        let r_raw = tape.leaf(&self.r_raw);
        let r = orthonormalize_on_tape(tape, r_raw)?;
        let w = tape.leaf(&self.w);
        let b = tape.leaf(&self.b);
        Ok(BoundSite { r, w, b, r_raw })
    }

    fn set_trainable(&mut self, on: bool) {
        for t in [&mut self.r_raw, &mut self.w, &mut self.b] {
            t.requires_grad = on;
            t.grad = None;
        }
    }

    fn same_shape(&self, other: &LayerIntervention) -> bool {
        self.r_raw.shape() == other.r_raw.shape()
            && self.w.shape() == other.w.shape()
            && self.b.shape() == other.b.shape()
    }
}

/// Edit for a block of hidden rows `h_rows` (k × d): returns the k × d delta
/// `(h Wᵀ + b − h Rᵀ) R` to be added back.
pub fn edit_rows(tape: &mut Tape<'_>, h_rows: Var, site: &BoundSite) -> Result<Var> {
    let wh = tape.matmul_t(h_rows, site.w)?;
    let whb = tape.add_row(wh, site.b)?;
    let rh = tape.matmul_t(h_rows, site.r)?;
    let diff = tape.sub(whb, rh)?;
    tape.matmul(diff, site.r)
}

/// The per-layer interventions of one adaptation unit, with placement.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Intervention {
    pub sites: BTreeMap<usize, LayerIntervention>,
    pub stream: StreamSpec,
}

impl Intervention {
    /// Fresh intervention at `layers`, drawn from `seed`.
    pub fn random(
        dim: usize,
        rank: usize,
        layers: &[usize],
        stream: StreamSpec,
        noise: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let mut sites = BTreeMap::new();
        for &l in layers {
            sites.insert(l, LayerIntervention::random(dim, rank, noise, &mut rng)?);
        }
        Ok(Intervention { sites, stream })
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.sites.keys().copied()
    }

    pub fn rank(&self) -> usize {
        self.sites.values().next().map_or(0, |s| s.rank())
    }

    /// Make every site the identity edit, keeping `R_raw`.
    pub fn make_identity(&mut self) -> Result<()> {
        for site in self.sites.values_mut() {
            *site = LayerIntervention::identity(site.r_raw.clone())?;
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.sites
            .values_mut()
            .flat_map(|s| [&mut s.r_raw, &mut s.w, &mut s.b])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.sites
            .values()
            .flat_map(|s| [&s.r_raw, &s.w, &s.b])
            .collect()
    }

    /// Frozen deep copy.
    pub fn snapshot(&self) -> InterventionSnapshot {
        let mut frozen = self.clone();
        for site in frozen.sites.values_mut() {
            site.set_trainable(false);
        }
        InterventionSnapshot(frozen)
    }

    /// Overwrite `dst`'s unconstrained parameters with this intervention's.
    pub fn transfer_into(&self, dst: &mut Intervention) -> Result<()> {
        let compatible = self.sites.len() == dst.sites.len()
            && self
                .sites
                .iter()
                .zip(&dst.sites)
                .all(|((la, a), (lb, b))| la == lb && a.same_shape(b));
        if !compatible {
            let shape = |iv: &Intervention| {
                iv.sites
                    .values()
                    .next()
                    .map_or(Vec::new(), |s| s.r_raw.shape().to_vec())
            };
            return Err(Error::ShapeMismatch {
                op: "transfer_into",
                lhs: shape(self),
                rhs: shape(dst),
            });
        }
        for (src, out) in self.sites.values().zip(dst.sites.values_mut()) {
            out.r_raw.data_mut().copy_from_slice(src.r_raw.data());
            out.w.data_mut().copy_from_slice(src.w.data());
            out.b.data_mut().copy_from_slice(src.b.data());
            out.set_trainable(true);
        }
        dst.stream = self.stream;
        Ok(())
    }

    /// Worst `‖R·Rᵀ − I‖_max` over all sites.
    pub fn orthonormality_error(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for site in self.sites.values() {
            worst = worst.max(orthonormality_error(&site.projection()?));
        }
        Ok(worst)
    }

    /// Byte-level fingerprint of the unconstrained parameters.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::Fnv64::new();
        for t in self.params() {
            h.write_f64s(t.data());
        }
        h.finish()
    }
}

/// Immutable copy of an [`Intervention`]; none of its tensors track grads.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionSnapshot(Intervention);

impl InterventionSnapshot {
    pub fn intervention(&self) -> &Intervention {
        &self.0
    }

    pub fn snapshot(&self) -> InterventionSnapshot {
        self.clone()
    }

    /// A trainable copy, e.g. to restore a group from its anchor.
    pub fn to_intervention(&self) -> Intervention {
        let mut iv = self.0.clone();
        for site in iv.sites.values_mut() {
            site.set_trainable(true);
        }
        iv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::new(vec![rows, cols], Rng::new(seed).normals(rows * cols, 1.0)).unwrap()
    }

    #[test]
    fn orthonormal_input_is_fixed_point() {
        let q = orthonormalize(&mat(3, 7, 1)).unwrap();
        let q2 = orthonormalize(&q).unwrap();
        for (a, b) in q.data().iter().zip(q2.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn scaling_removed() {
        let raw = Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 3.0]]).unwrap();
        let q = orthonormalize(&raw).unwrap();
        assert_eq!(q.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn random_rows_become_orthonormal() {
        let q = orthonormalize(&mat(4, 16, 9)).unwrap();
        assert!(orthonormality_error(&q) < 1e-10);
    }

    #[test]
    fn dependent_rows_rejected() {
        let raw = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]]).unwrap();
        match orthonormalize(&raw) {
            Err(Error::RankDeficient { row, condition }) => {
                assert_eq!(row, 1);
                assert!(condition > 1e8);
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn positions_long_prompt() {
        let p = select_positions(40, StreamSpec { t_pos: 15 });
        let expected: Vec<usize> = (0..15).chain(25..40).collect();
        assert_eq!(p, expected);
        assert_eq!(p.len(), 30);
    }

    #[test]
    fn positions_overlap() {
        assert_eq!(select_positions(10, StreamSpec { t_pos: 15 }), (0..10).collect::<Vec<_>>());
        assert_eq!(select_positions(20, StreamSpec { t_pos: 15 }), (0..20).collect::<Vec<_>>());
        assert_eq!(select_positions(1, StreamSpec { t_pos: 3 }), vec![0]);
    }

    #[test]
    fn identity_edit() {
        let site = LayerIntervention::identity(mat(2, 8, 4)).unwrap();
        let h: Vec<f64> = Rng::new(5).normals(8, 1.0);
        let out = site.apply(&h).unwrap();
        for (a, b) in out.iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_rank_collapse() {
        // r = d and R = I gives W h + b.
        let eye = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]).unwrap();
        let w = mat(3, 3, 6);
        let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let site = LayerIntervention { r_raw: eye, w: w.clone(), b: b.clone() };
        let h = [0.3, -0.2, 1.1];
        let out = site.apply(&h).unwrap();
        for k in 0..3 {
            let expect: f64 = (0..3).map(|j| w.at(k, j) * h[j]).sum::<f64>() + b.data()[k];
            assert!((out[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_rejects_wrong_width() {
        let site = LayerIntervention::identity(mat(2, 8, 4)).unwrap();
        assert_eq!(
            site.apply(&[1.0; 3]),
            Err(Error::DimensionMismatch { expected: 8, found: 3 })
        );
    }

    #[test]
    fn snapshot_is_detached() {
        let mut iv = Intervention::random(8, 2, &[0, 1], StreamSpec { t_pos: 2 }, 0.1, 3).unwrap();
        let snap = iv.snapshot();
        iv.sites.get_mut(&0).unwrap().b.data_mut()[0] = 9.0;
        assert_eq!(snap.intervention().sites[&0].b.data()[0], 0.0);
        assert_eq!(snap.snapshot(), snap);
        assert!(snap.intervention().params().iter().all(|t| !t.requires_grad));
    }

    #[test]
    fn transfer_copies_and_checks_shapes() {
        let src = Intervention::random(8, 2, &[0, 1], StreamSpec { t_pos: 2 }, 0.1, 3).unwrap();
        let before = src.clone();
        let mut dst = Intervention::random(8, 2, &[0, 1], StreamSpec { t_pos: 2 }, 0.1, 4).unwrap();
        src.transfer_into(&mut dst).unwrap();
        assert_eq!(src, before);
        assert_eq!(dst.checksum(), src.checksum());
        let h: Vec<f64> = Rng::new(1).normals(8, 1.0);
        assert_eq!(dst.sites[&1].apply(&h).unwrap(), src.sites[&1].apply(&h).unwrap());

        let mut wrong = Intervention::random(8, 3, &[0, 1], StreamSpec { t_pos: 2 }, 0.1, 4).unwrap();
        assert!(matches!(src.transfer_into(&mut wrong), Err(Error::ShapeMismatch { .. })));
    }
}
