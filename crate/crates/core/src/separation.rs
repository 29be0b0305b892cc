//! Persona self-separation and the contrastive grouping objective.
//!
//! A persona vector `p` is split into `N` group vectors. Group `i` owns the
//! block of `s = ⌊d/N⌋` coordinates starting at `i·s`; its augment mask `c_i`
//! is one on that block and zero elsewhere. Row `i` of the output is a shared
//! two-layer MLP applied to the concatenation `[p + c_i ; c_i]`.
//!
//! Group indices are zero-based throughout this crate.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::encoder::{Affine, HiddenVector};
use crate::error::{check_dim, ClvError, Result};
use crate::params::{ParamGroup, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentMask {
    pub c: Vec<f64>,
    pub group_index: usize,
}

impl AugmentMask {
    /// Indices where the mask is one.
    pub fn support(&self) -> Vec<usize> {
        self.c
            .iter()
            .enumerate()
            .filter(|(_, v)| **v == 1.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Builds the `N` block masks for width `d`. Coordinates past `N·⌊d/N⌋` are
/// zero in every mask.
pub fn make_augment_masks(d: usize, n: usize) -> Result<Vec<AugmentMask>> {
    if n == 0 {
        return Err(ClvError::InvalidArgument("N must be at least 1".into()));
    }
    if n > d {
        return Err(ClvError::InvalidArgument(format!("N = {n} exceeds d = {d}")));
    }
    let s = d / n;
    Ok((0..n)
        .map(|i| {
            let mut c = vec![0.0; d];
            c[i * s..(i + 1) * s].fill(1.0);
            AugmentMask { c, group_index: i }
        })
        .collect())
}

pub(crate) fn mask_matrix(masks: &[AugmentMask]) -> Array2<f64> {
    let d = masks.first().map_or(0, |m| m.c.len());
    Array2::from_shape_fn((masks.len(), d), |(i, j)| masks[i].c[j])
}

/// `N` parallel `d`-dimensional persona representations.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedPersona {
    pub rows: Array2<f64>,
}

impl GroupedPersona {
    pub fn n_groups(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationConfig {
    pub n_groups: usize,
    pub tau: f64,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        SeparationConfig { n_groups: 4, tau: 0.5 }
    }
}

impl SeparationConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.n_groups < 2 || self.n_groups > d {
            return Err(ClvError::Config {
                field: "n_groups".into(),
                message: format!("must satisfy 2 <= N <= d (d = {d})"),
            });
        }
        if !(self.tau > 0.0) {
            return Err(ClvError::Config {
                field: "tau".into(),
                message: "must be positive".into(),
            });
        }
        Ok(())
    }
}

/// The `N × 2d` matrix whose row `i` is `[p + c_i ; c_i]`.
pub fn augmented_inputs(p: &[f64], masks: &[AugmentMask]) -> Result<Array2<f64>> {
    let d = p.len();
    let n = masks.len();
    let mut x = Array2::zeros((n, 2 * d));
    for (i, m) in masks.iter().enumerate() {
        check_dim("augment mask", d, m.c.len())?;
        for j in 0..d {
            x[[i, j]] = p[j] + m.c[j];
            x[[i, d + j]] = m.c[j];
        }
    }
    Ok(x)
}

/// Separation with an arbitrary row map in place of the learned MLP.
pub fn separate_with(
    p: &HiddenVector,
    masks: &[AugmentMask],
    mlp: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<GroupedPersona> {
    let x = augmented_inputs(p.as_slice(), masks)?;
    let d = p.dim();
    let mut rows = Array2::zeros((masks.len(), d));
    for (i, input) in x.rows().into_iter().enumerate() {
        let out = mlp(input.as_slice().expect("contiguous row"));
        check_dim("separation MLP output", d, out.len())?;
        rows.row_mut(i).assign(&ndarray::ArrayView1::from(&out));
    }
    Ok(GroupedPersona { rows })
}

/// The learned separation MLP (`2d → d`, tanh, `d → d`) shared by all groups.
#[derive(Debug, Clone)]
pub struct PersonaSeparator {
    hidden: Affine,
    out: Affine,
    masks: Vec<AugmentMask>,
    d: usize,
}

impl PersonaSeparator {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, n_groups: usize, rng: &mut R) -> Result<Self> {
        let masks = make_augment_masks(d, n_groups)?;
        let g = ParamGroup::Separation;
        Ok(PersonaSeparator {
            hidden: Affine::new(store, "separation.hidden", g, 2 * d, d, (2.0 * d as f64).sqrt().recip(), rng),
            out: Affine::new(store, "separation.out", g, d, d, (d as f64).sqrt().recip(), rng),
            masks,
            d,
        })
    }

    pub fn masks(&self) -> &[AugmentMask] {
        &self.masks
    }

    pub fn n_groups(&self) -> usize {
        self.masks.len()
    }

    /// `p` is a `1 × d` node; returns `N × d`.
    pub fn separate_node(&self, g: &mut Graph, store: &ParamStore, p: NodeId) -> Result<NodeId> {
        check_dim("separate", self.d, g.shape(p).1)?;
        let n = self.masks.len();
        let ones = g.constant(Array2::ones((n, 1)));
        let c = g.constant(mask_matrix(&self.masks));
        let rep = g.matmul(ones, p);
        let shifted = g.add(rep, c);
        let x = g.concat_cols(&[shifted, c]);
        let h = self.hidden.forward(g, store, x);
        let h = g.tanh(h);
        Ok(self.out.forward(g, store, h))
    }

    pub fn separate(&self, store: &ParamStore, p: &HiddenVector) -> Result<GroupedPersona> {
        check_dim("separate", self.d, p.dim())?;
        let mut g = Graph::inference();
        let pn = g.constant(p.as_row());
        let rows = self.separate_node(&mut g, store, pn)?;
        Ok(GroupedPersona {
            rows: g.value(rows).clone(),
        })
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(ClvError::ZeroNorm);
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// InfoNCE term for group `k`: the positive is row `k` of `b`, the
/// negatives are the other rows of `b`.
pub fn contrastive_loss(a: &GroupedPersona, b: &GroupedPersona, k: usize, tau: f64) -> Result<f64> {
    check_dim("contrastive groups", a.n_groups(), b.n_groups())?;
    check_dim("contrastive width", a.dim(), b.dim())?;
    if k >= a.n_groups() {
        return Err(ClvError::InvalidArgument(format!("group {k} out of range")));
    }
    let ak = a.rows.row(k);
    let ak = ak.as_slice().expect("contiguous");
    let logits = b
        .rows
        .rows()
        .into_iter()
        .map(|bn| cosine(ak, bn.as_slice().expect("contiguous")).map(|c| c / tau))
        .collect::<Result<Vec<f64>>>()?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[k])
}

/// Mean of [`contrastive_loss`] over every group and every cyclic pair
/// `(i, (i+1) mod B)` in the batch.
pub fn batch_contrastive_loss(batch: &[GroupedPersona], tau: f64) -> Result<f64> {
    if batch.len() < 2 {
        return Err(ClvError::InvalidArgument(
            "contrastive loss needs at least two examples".into(),
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..batch.len() {
        let j = (i + 1) % batch.len();
        for k in 0..batch[i].n_groups() {
            total += contrastive_loss(&batch[i], &batch[j], k, tau)?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn unit_rows(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    if g.value(x).rows().into_iter().any(|r| r.iter().all(|v| *v == 0.0)) {
        return Err(ClvError::ZeroNorm);
    }
    let sq = g.mul(x, x);
    let norms = g.row_sums(sq);
    let norms = g.sqrt(norms);
    let inv = g.recip(norms);
    Ok(g.mul_col(x, inv))
}

/// Sum over groups `k` of the InfoNCE term between `a` and `b` (both `N × d`).
pub fn contrastive_loss_node(g: &mut Graph, a: NodeId, b: NodeId, tau: f64) -> Result<NodeId> {
    check_dim("contrastive groups", g.shape(a).0, g.shape(b).0)?;
    let n = g.shape(a).0;
    let an = unit_rows(g, a)?;
    let bn = unit_rows(g, b)?;
    let bt = g.transpose(bn);
    let sims = g.matmul(an, bt);
    let logits = g.scale(sims, 1.0 / tau);
    let lp = g.log_softmax_rows(logits);
    let diag: Vec<(usize, usize)> = (0..n).map(|k| (k, k)).collect();
    let pos = g.pick(lp, &diag);
    let s = g.sum(pos);
    Ok(g.scale(s, -1.0))
}

/// Graph form of [`batch_contrastive_loss`].
pub fn batch_contrastive_loss_node(g: &mut Graph, batch: &[NodeId], tau: f64) -> Result<NodeId> {
    if batch.len() < 2 {
        return Err(ClvError::InvalidArgument(
            "contrastive loss needs at least two examples".into(),
        ));
    }
    let n = g.shape(batch[0]).0;
    let mut terms = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let j = (i + 1) % batch.len();
        terms.push(contrastive_loss_node(g, batch[i], batch[j], tau)?);
    }
    let all = g.concat_cols(&terms);
    let s = g.sum(all);
    Ok(g.scale(s, 1.0 / (n * batch.len()) as f64))
}
