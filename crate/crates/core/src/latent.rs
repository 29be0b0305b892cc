//! Diagonal-Gaussian prior and recognition networks, reparameterized
//! sampling and the KL terms of the generation loss.
//!
//! Every head is an affine map whose `2·z_dim` outputs split into the mean and
//! the log-variance. The four heads are
//!
//! | head                 | input            |
//! |----------------------|------------------|
//! | recognition, persona | `[q ; p_k]`      |
//! | recognition, response| `[q ; r]`        |
//! | prior, persona       | `[q + c_k ; c_k]`|
//! | prior, response      | `q`              |
//!
//! The prior heads never see persona or response vectors, so sampling from
//! them needs only the query.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::decider::DeciderWeights;
use crate::encoder::{Affine, HiddenVector};
use crate::error::{check_dim, ClvError, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::separation::{mask_matrix, AugmentMask, GroupedPersona};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Self {
        assert_eq!(mu.len(), log_var.len());
        GaussianParams { mu, log_var }
    }

    pub fn standard(dim: usize) -> Self {
        GaussianParams::new(vec![0.0; dim], vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentSource {
    Prior,
    Recognition,
}

impl std::fmt::Display for LatentSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LatentSource::Prior => "prior",
            LatentSource::Recognition => "recognition",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub source: LatentSource,
}

/// `N` persona latents stacked as an `N × z_dim` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedLatents {
    pub rows: Array2<f64>,
    pub source: LatentSource,
}

impl GroupedLatents {
    pub fn n_groups(&self) -> usize {
        self.rows.nrows()
    }

    pub fn z_dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, k: usize) -> LatentSample {
        LatentSample {
            z: self.rows.row(k).to_vec(),
            source: self.source,
        }
    }
}

/// Which way round the KL terms are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlDirection {
    /// `KL(recognition ‖ prior)`.
    #[default]
    Standard,
    /// `KL(prior ‖ recognition)`.
    Paper,
}

/// How the per-group persona KL terms are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlAggregation {
    /// Weighted by the (stop-gradient) decider weights.
    #[default]
    Weighted,
    /// Only the group with the largest decider weight.
    Selected,
    /// Plain mean over groups.
    Uniform,
}

/// Closed-form `KL(a ‖ b)` between diagonal Gaussians.
pub fn kl_diag_gaussians(a: &GaussianParams, b: &GaussianParams) -> Result<f64> {
    check_dim("kl_diag_gaussians", a.dim(), b.dim())?;
    Ok((0..a.dim())
        .map(|j| {
            let var_a = a.log_var[j].exp();
            let var_b = b.log_var[j].exp();
            0.5 * (b.log_var[j] - a.log_var[j]) + (var_a + (a.mu[j] - b.mu[j]).powi(2)) / (2.0 * var_b)
                - 0.5
        })
        .sum())
}

/// `z = μ + exp(½·log σ²) ⊙ noise`.
pub fn reparameterize(params: &GaussianParams, noise: &[f64], source: LatentSource) -> Result<LatentSample> {
    check_dim("reparameterize", params.dim(), noise.len())?;
    let z = (0..params.dim())
        .map(|j| params.mu[j] + (0.5 * params.log_var[j]).exp() * noise[j])
        .collect();
    Ok(LatentSample { z, source })
}

pub fn combine_latents(z_p: &LatentSample, z_r: &LatentSample) -> Result<LatentSample> {
    check_dim("combine_latents", z_p.z.len(), z_r.z.len())?;
    Ok(LatentSample {
        z: z_p.z.iter().zip(&z_r.z).map(|(a, b)| a + b).collect(),
        source: z_r.source,
    })
}

/// `reconstruction + β·(Σ_k w_k·KL_k + KL_r)`, with the decider weights taken
/// as constants. A trailing null-persona weight, if present, carries no KL.
pub fn generation_loss(
    reconstruction_nll: f64,
    kl_persona_per_group: &[f64],
    kl_response: f64,
    decider_weights: &DeciderWeights,
    beta: f64,
) -> Result<f64> {
    let w = decider_weights.as_slice();
    if w.len() != kl_persona_per_group.len() && w.len() != kl_persona_per_group.len() + 1 {
        return Err(ClvError::dim("generation_loss weights", kl_persona_per_group.len(), w.len()));
    }
    if beta < 0.0 {
        return Err(ClvError::InvalidArgument("beta must be non-negative".into()));
    }
    let kl_p: f64 = kl_persona_per_group.iter().zip(w).map(|(k, w)| k * w).sum();
    Ok(reconstruction_nll + beta * (kl_p + kl_response))
}

/// Mean and log-variance nodes of a batch of Gaussians (`m × z_dim` each).
#[derive(Debug, Clone, Copy)]
pub struct GaussianNodes {
    pub mu: NodeId,
    pub log_var: NodeId,
}

impl GaussianNodes {
    pub fn to_params(&self, g: &Graph) -> Vec<GaussianParams> {
        let mu = g.value(self.mu);
        let lv = g.value(self.log_var);
        (0..mu.nrows())
            .map(|r| GaussianParams::new(mu.row(r).to_vec(), lv.row(r).to_vec()))
            .collect()
    }
}

/// Per-row `KL(a ‖ b)` as an `m × 1` column.
pub fn kl_node(g: &mut Graph, a: GaussianNodes, b: GaussianNodes) -> NodeId {
    // ½(lv_b − lv_a) + (exp(lv_a) + (μ_a − μ_b)²)·exp(−lv_b)/2 − ½
    let lv_diff = g.sub(b.log_var, a.log_var);
    let half_lv = g.scale(lv_diff, 0.5);
    let var_a = g.exp(a.log_var);
    let dmu = g.sub(a.mu, b.mu);
    let dmu2 = g.mul(dmu, dmu);
    let num = g.add(var_a, dmu2);
    let neg_lv_b = g.scale(b.log_var, -1.0);
    let inv_var_b = g.exp(neg_lv_b);
    let frac = g.mul(num, inv_var_b);
    let frac = g.scale(frac, 0.5);
    let per_dim = g.add(half_lv, frac);
    let per_dim = g.offset(per_dim, -0.5);
    g.row_sums(per_dim)
}

/// Reparameterized samples for every row, with `noise` of the same shape.
pub fn reparameterize_node(g: &mut Graph, params: GaussianNodes, noise: Array2<f64>) -> NodeId {
    let half = g.scale(params.log_var, 0.5);
    let std = g.exp(half);
    let eps = g.constant(noise);
    let scaled = g.mul(std, eps);
    g.add(params.mu, scaled)
}

/// The four affine heads.
#[derive(Debug, Clone)]
pub struct LatentNetworks {
    recognition_persona: Affine,
    recognition_response: Affine,
    prior_persona: Affine,
    prior_response: Affine,
    d: usize,
    z_dim: usize,
}

impl LatentNetworks {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, z_dim: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Latent;
        let std = 0.02;
        LatentNetworks {
            recognition_persona: Affine::new(store, "latent.recognition_persona", g, 2 * d, 2 * z_dim, std, rng),
            recognition_response: Affine::new(store, "latent.recognition_response", g, 2 * d, 2 * z_dim, std, rng),
            prior_persona: Affine::new(store, "latent.prior_persona", g, 2 * d, 2 * z_dim, std, rng),
            prior_response: Affine::new(store, "latent.prior_response", g, d, 2 * z_dim, std, rng),
            d,
            z_dim,
        }
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    fn split(&self, g: &mut Graph, out: NodeId) -> GaussianNodes {
        GaussianNodes {
            mu: g.slice_cols(out, 0, self.z_dim),
            log_var: g.slice_cols(out, self.z_dim, self.z_dim),
        }
    }

    fn repeat_rows(g: &mut Graph, row: NodeId, n: usize) -> NodeId {
        let ones = g.constant(Array2::ones((n, 1)));
        g.matmul(ones, row)
    }

    /// `q` is `1 × d`, `groups` is `N × d`.
    pub fn recognize_persona_node(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: NodeId,
        groups: NodeId,
    ) -> Result<GaussianNodes> {
        check_dim("recognize_persona_group (q)", self.d, g.shape(q).1)?;
        check_dim("recognize_persona_group (P_g)", self.d, g.shape(groups).1)?;
        let n = g.shape(groups).0;
        let qs = Self::repeat_rows(g, q, n);
        let x = g.concat_cols(&[qs, groups]);
        let out = self.recognition_persona.forward(g, store, x);
        Ok(self.split(g, out))
    }

    pub fn recognize_response_node(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: NodeId,
        r: NodeId,
    ) -> Result<GaussianNodes> {
        check_dim("recognize_response (q)", self.d, g.shape(q).1)?;
        check_dim("recognize_response (r)", self.d, g.shape(r).1)?;
        let x = g.concat_cols(&[q, r]);
        let out = self.recognition_response.forward(g, store, x);
        Ok(self.split(g, out))
    }

    pub fn prior_persona_node(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: NodeId,
        masks: &[AugmentMask],
    ) -> Result<GaussianNodes> {
        check_dim("prior_persona_group (q)", self.d, g.shape(q).1)?;
        if let Some(m) = masks.first() {
            check_dim("prior_persona_group (mask)", self.d, m.c.len())?;
        }
        let qs = Self::repeat_rows(g, q, masks.len());
        let c = g.constant(mask_matrix(masks));
        let shifted = g.add(qs, c);
        let x = g.concat_cols(&[shifted, c]);
        let out = self.prior_persona.forward(g, store, x);
        Ok(self.split(g, out))
    }

    pub fn prior_response_node(&self, g: &mut Graph, store: &ParamStore, q: NodeId) -> Result<GaussianNodes> {
        check_dim("prior_response (q)", self.d, g.shape(q).1)?;
        let out = self.prior_response.forward(g, store, q);
        Ok(self.split(g, out))
    }

    pub fn recognize_persona_group(
        &self,
        store: &ParamStore,
        q: &HiddenVector,
        groups: &GroupedPersona,
    ) -> Result<Vec<GaussianParams>> {
        let mut g = Graph::inference();
        let qn = g.constant(q.as_row());
        let pn = g.constant(groups.rows.clone());
        Ok(self.recognize_persona_node(&mut g, store, qn, pn)?.to_params(&g))
    }

    pub fn recognize_response(
        &self,
        store: &ParamStore,
        q: &HiddenVector,
        r: &HiddenVector,
    ) -> Result<GaussianParams> {
        let mut g = Graph::inference();
        let qn = g.constant(q.as_row());
        let rn = g.constant(r.as_row());
        Ok(self.recognize_response_node(&mut g, store, qn, rn)?.to_params(&g).remove(0))
    }

    pub fn prior_persona_group(
        &self,
        store: &ParamStore,
        q: &HiddenVector,
        masks: &[AugmentMask],
    ) -> Result<Vec<GaussianParams>> {
        let mut g = Graph::inference();
        let qn = g.constant(q.as_row());
        Ok(self.prior_persona_node(&mut g, store, qn, masks)?.to_params(&g))
    }

    pub fn prior_response(&self, store: &ParamStore, q: &HiddenVector) -> Result<GaussianParams> {
        let mut g = Graph::inference();
        let qn = g.constant(q.as_row());
        Ok(self.prior_response_node(&mut g, store, qn)?.to_params(&g).remove(0))
    }
}
