//! Soft selection among the grouped persona latents.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::encoder::{Affine, HiddenVector};
use crate::error::{check_dim, ClvError, Result};
use crate::latent::{GroupedLatents, LatentSample};
use crate::params::{ParamGroup, ParamStore};

const WEIGHT_FLOOR: f64 = 1e-12;

/// A point on the probability simplex over the `M` candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeciderWeights(Vec<f64>);

impl DeciderWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(ClvError::InvalidArgument("decider weights are empty".into()));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ClvError::InvalidArgument("decider weights must be finite and non-negative".into()));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(ClvError::InvalidArgument(format!("decider weights sum to {total}")));
        }
        Ok(DeciderWeights(w))
    }

    pub fn uniform(m: usize) -> Self {
        assert!(m > 0);
        DeciderWeights(vec![1.0 / m as f64; m])
    }

    pub fn one_hot(m: usize, k: usize) -> Self {
        assert!(k < m);
        let mut w = vec![0.0; m];
        w[k] = 1.0;
        DeciderWeights(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest weight, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PseudoLabel(pub usize);

/// `M = N`, or `N + 1` with a trailing zero-latent "no persona" candidate.
#[derive(Debug, Clone)]
pub struct Decider {
    hidden: Affine,
    out: Affine,
    n_groups: usize,
    z_dim: usize,
    d: usize,
    include_null: bool,
}

impl Decider {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        n_groups: usize,
        z_dim: usize,
        d: usize,
        include_null: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = n_groups * z_dim + d;
        let m = n_groups + usize::from(include_null);
        let g = ParamGroup::Decider;
        Decider {
            hidden: Affine::new(store, "decider.hidden", g, fan_in, d, (fan_in as f64).sqrt().recip(), rng),
            out: Affine::new(store, "decider.out", g, d, m, (d as f64).sqrt().recip(), rng),
            n_groups,
            z_dim,
            d,
            include_null,
        }
    }

    pub fn n_candidates(&self) -> usize {
        self.n_groups + usize::from(self.include_null)
    }

    pub fn includes_null(&self) -> bool {
        self.include_null
    }

    /// Logits (`1 × M`) from latents `N × z_dim` and `q` (`1 × d`).
    pub fn logits_node(&self, g: &mut Graph, store: &ParamStore, latents: NodeId, q: NodeId) -> Result<NodeId> {
        check_dim("decide (groups)", self.n_groups, g.shape(latents).0)?;
        check_dim("decide (z_dim)", self.z_dim, g.shape(latents).1)?;
        check_dim("decide (q)", self.d, g.shape(q).1)?;
        let flat = g.reshape(latents, 1, self.n_groups * self.z_dim);
        let x = g.concat_cols(&[flat, q]);
        let h = self.hidden.forward(g, store, x);
        let h = g.tanh(h);
        Ok(self.out.forward(g, store, h))
    }

    pub fn decide(&self, store: &ParamStore, latents: &GroupedLatents, q: &HiddenVector) -> Result<DeciderWeights> {
        let mut g = Graph::inference();
        let zn = g.constant(latents.rows.clone());
        let qn = g.constant(q.as_row());
        let logits = self.logits_node(&mut g, store, zn, qn)?;
        Ok(weights_from_logits(g.value(logits).row(0).as_slice().unwrap()))
    }
}

pub fn weights_from_logits(logits: &[f64]) -> DeciderWeights {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    DeciderWeights(e.into_iter().map(|v| v / s).collect())
}

/// `z_p = Σ_k w_k·Z[k]`; a weight past the last row multiplies a zero row.
pub fn select_latent(w: &DeciderWeights, latents: &GroupedLatents) -> Result<LatentSample> {
    let n = latents.n_groups();
    if w.len() != n && w.len() != n + 1 {
        return Err(ClvError::dim("select_latent", n, w.len()));
    }
    let mut z = vec![0.0; latents.z_dim()];
    for (k, row) in latents.rows.outer_iter().enumerate() {
        for (acc, v) in z.iter_mut().zip(row) {
            *acc += w.0[k] * v;
        }
    }
    Ok(LatentSample {
        z,
        source: latents.source,
    })
}

/// Graph form of [`select_latent`] with constant weights.
pub fn select_latent_node(g: &mut Graph, w: &DeciderWeights, latents: NodeId) -> NodeId {
    let n = g.shape(latents).0;
    let wn = g.constant(Array2::from_shape_vec((1, n), w.0[..n].to_vec()).unwrap());
    g.matmul(wn, latents)
}

/// Argmin over candidate losses, lowest index on ties.
pub fn pseudo_label_from_losses(losses: &[f64]) -> PseudoLabel {
    let mut best = 0;
    for (k, &l) in losses.iter().enumerate() {
        if l < losses[best] {
            best = k;
        }
    }
    PseudoLabel(best)
}

/// `−log w[y]`, with `w[y]` clamped from below at 1e-12.
pub fn decider_loss(w: &DeciderWeights, y: PseudoLabel) -> Result<f64> {
    if y.0 >= w.len() {
        return Err(ClvError::InvalidArgument(format!(
            "pseudo-label {} out of range for {} candidates",
            y.0,
            w.len()
        )));
    }
    Ok(-w.0[y.0].max(WEIGHT_FLOOR).ln())
}

/// `−log softmax(logits)[y]` on a `1 × M` logits node.
pub fn decider_loss_node(g: &mut Graph, logits: NodeId, y: PseudoLabel) -> NodeId {
    let lp = g.log_softmax_rows(logits);
    let picked = g.pick(lp, &[(0, y.0)]);
    g.scale(picked, -1.0)
}
