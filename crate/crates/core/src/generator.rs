//! Latent-conditioned decoding: teacher-forced loss and nucleus sampling.
//!
//! The decoder reads `query ++ [bos] ++ response[..n-1]` and predicts the
//! response tokens (ending in eos) at the positions from `bos` on. The latent
//! `z` enters as a single memory slot that every block cross-attends to.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::corpus::{BOS, EOS, PAD};
use crate::encoder::{Affine, Mode, Trunk};
use crate::error::{check_dim, ClvError, Result};
use crate::latent::LatentSample;
use crate::params::{ParamGroup, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub top_p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Argmax decoding; sampling settings are ignored.
    pub greedy: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            top_p: 0.9,
            temperature: 1.0,
            max_new_tokens: 32,
            seed: 0,
            greedy: false,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(ClvError::Config {
                field: field.into(),
                message: message.into(),
            })
        };
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p", "must lie in (0, 1]");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature", "must be positive");
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens", "must be at least 1");
        }
        Ok(())
    }

    /// The RNG for one example: the configured seed, on the example's stream.
    pub fn rng_for(&self, example_index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(example_index);
        rng
    }
}

/// The single cross-attention slot (`1 × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMemory {
    pub slots: Array2<f64>,
}

/// Keeps the smallest probability-sorted prefix whose mass reaches `top_p`
/// (ties by ascending id) and renormalizes it. Returns `(id, prob)` pairs in
/// that order.
pub fn nucleus_filter(probs: &[f64], top_p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for id in order {
        if probs[id] <= 0.0 && !kept.is_empty() {
            break;
        }
        kept.push((id, probs[id]));
        mass += probs[id];
        if mass >= top_p - 1e-12 {
            break;
        }
    }
    kept.into_iter().map(|(id, p)| (id, p / mass)).collect()
}

#[derive(Debug, Clone)]
pub struct Generator {
    trunk: Trunk,
    projection: Option<Affine>,
    z_dim: usize,
}

impl Generator {
    /// `trunk` must have been built with cross-attention. A projection from
    /// `z_dim` to `d` is added only when they differ.
    pub fn new<R: Rng>(store: &mut ParamStore, trunk: Trunk, z_dim: usize, rng: &mut R) -> Self {
        assert!(trunk.has_cross_attention(), "generator trunk needs cross-attention");
        let d = trunk.config().d;
        let projection = (z_dim != d).then(|| {
            Affine::new(store, "generator.latent_projection", ParamGroup::Trunk, z_dim, d, 0.02, rng)
        });
        Generator {
            trunk,
            projection,
            z_dim,
        }
    }

    pub fn trunk(&self) -> &Trunk {
        &self.trunk
    }

    pub fn memory_node(&self, g: &mut Graph, store: &ParamStore, z: NodeId) -> Result<NodeId> {
        check_dim("inject_latent", self.z_dim, g.shape(z).1)?;
        Ok(match &self.projection {
            Some(p) => p.forward(g, store, z),
            None => z,
        })
    }

    pub fn inject_latent(&self, store: &ParamStore, z: &LatentSample) -> Result<LatentMemory> {
        let mut g = Graph::inference();
        let zn = g.row_constant(&z.z);
        let m = self.memory_node(&mut g, store, zn)?;
        Ok(LatentMemory {
            slots: g.value(m).clone(),
        })
    }

    fn check_response(response: &[usize]) -> Result<()> {
        if response.is_empty() || response.iter().all(|&t| t == EOS || t == PAD) {
            return Err(ClvError::EmptySequence);
        }
        Ok(())
    }

    /// Response-position logits (`n × V`) under teacher forcing.
    pub fn response_logits_node(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        memory: NodeId,
        query: &[usize],
        response: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<NodeId> {
        Self::check_response(response)?;
        if query.is_empty() {
            return Err(ClvError::EmptySequence);
        }
        let mut input = Vec::with_capacity(query.len() + response.len());
        input.extend_from_slice(query);
        input.push(BOS);
        input.extend_from_slice(&response[..response.len() - 1]);
        let h = self.trunk.forward(g, store, &input, Some(memory), mode)?;
        let h = g.slice_rows(h, query.len(), response.len());
        Ok(self.trunk.logits(g, store, h))
    }

    /// Mean next-token cross-entropy over the response positions.
    pub fn decode_loss_node(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        memory: NodeId,
        query: &[usize],
        response: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<NodeId> {
        let logits = self.response_logits_node(g, store, memory, query, response, mode)?;
        Ok(g.cross_entropy(logits, response))
    }

    pub fn decode_loss(
        &self,
        store: &ParamStore,
        memory: &LatentMemory,
        query: &[usize],
        response: &[usize],
    ) -> Result<f64> {
        let mut g = Graph::inference();
        let m = g.constant(memory.slots.clone());
        let l = self.decode_loss_node(&mut g, store, m, query, response, &mut Mode::Eval)?;
        Ok(g.scalar(l))
    }

    /// Teacher-forced logits at every response position.
    pub fn response_logits(
        &self,
        store: &ParamStore,
        memory: &LatentMemory,
        query: &[usize],
        response: &[usize],
    ) -> Result<Array2<f64>> {
        let mut g = Graph::inference();
        let m = g.constant(memory.slots.clone());
        let l = self.response_logits_node(&mut g, store, m, query, response, &mut Mode::Eval)?;
        Ok(g.value(l).clone())
    }

    fn next_logits(&self, store: &ParamStore, memory: &LatentMemory, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let m = g.constant(memory.slots.clone());
        let h = self.trunk.forward(&mut g, store, prefix, Some(m), &mut Mode::Eval)?;
        let last = g.slice_rows(h, prefix.len() - 1, 1);
        let logits = self.trunk.logits(&mut g, store, last);
        Ok(g.value(logits).iter().copied().collect())
    }

    /// Samples with the configured seed on stream 0.
    pub fn generate(
        &self,
        store: &ParamStore,
        memory: &LatentMemory,
        query: &[usize],
        config: &GenerationConfig,
    ) -> Result<Vec<usize>> {
        self.generate_with_rng(store, memory, query, config, &mut config.rng_for(0))
    }

    /// Generated ids, without the terminating eos.
    pub fn generate_with_rng<R: Rng>(
        &self,
        store: &ParamStore,
        memory: &LatentMemory,
        query: &[usize],
        config: &GenerationConfig,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        config.validate()?;
        if query.is_empty() {
            return Err(ClvError::EmptySequence);
        }
        let mut prefix = query.to_vec();
        prefix.push(BOS);
        let room = self.trunk.config().max_position.saturating_sub(prefix.len() - 1);
        let budget = config.max_new_tokens.min(room);
        let mut out = Vec::new();
        while out.len() < budget {
            let mut logits = self.next_logits(store, memory, &prefix)?;
            logits[PAD] = f64::NEG_INFINITY;
            logits[BOS] = f64::NEG_INFINITY;
            let next = if config.greedy {
                argmax(&logits)
            } else {
                sample_nucleus(&logits, config, rng)
            };
            if next == EOS {
                break;
            }
            out.push(next);
            prefix.push(next);
        }
        Ok(out)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_nucleus<R: Rng>(logits: &[f64], config: &GenerationConfig, rng: &mut R) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| ((l - max) / config.temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    let probs: Vec<f64> = e.iter().map(|v| v / s).collect();
    let kept = nucleus_filter(&probs, config.top_p);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(id, p) in &kept {
        acc += p;
        if u < acc {
            return id;
        }
    }
    kept.last().map(|&(id, _)| id).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GradMode;
    use crate::encoder::EncoderConfig;
    use crate::gradcheck::{max_relative_error, numeric_gradient};
    use crate::latent::LatentSource;
    use proptest::prelude::*;

    fn tiny(seed: u64, vocab: usize) -> (ParamStore, Generator) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = EncoderConfig {
            d: 8,
            layers: 1,
            heads: 2,
            dropout: 0.0,
            max_position: 32,
        };
        let trunk = Trunk::new(&mut store, "trunk", ParamGroup::Trunk, config, vocab, true, &mut rng);
        let gen = Generator::new(&mut store, trunk, 8, &mut rng);
        (store, gen)
    }

    fn memory(v: f64) -> LatentMemory {
        LatentMemory {
            slots: Array2::from_elem((1, 8), v),
        }
    }

    #[test]
    fn nucleus_hand_example() {
        let kept = nucleus_filter(&[0.5, 0.3, 0.15, 0.05], 0.8);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].0, 0);
        assert_eq!(kept[1].0, 1);
        assert!((kept[0].1 - 0.625).abs() < 1e-12);
        assert!((kept[1].1 - 0.375).abs() < 1e-12);
        let all = nucleus_filter(&[0.5, 0.3, 0.15, 0.05], 1.0);
        assert_eq!(all.len(), 4);
        assert!((all[3].1 - 0.05).abs() < 1e-12);
    }

    #[test]
    fn nucleus_ties_prefer_lower_ids() {
        let kept = nucleus_filter(&[0.25, 0.25, 0.25, 0.25], 0.5);
        assert_eq!(kept.iter().map(|k| k.0).collect::<Vec<_>>(), vec![0, 1]);
    }

    proptest! {
        #[test]
        fn nucleus_keeps_the_mode(
            raw in proptest::collection::vec(0.0f64..1.0, 1..20),
            top_p in 1e-6f64..1.0,
        ) {
            let s: f64 = raw.iter().sum::<f64>() + 1e-9;
            let probs: Vec<f64> = raw.iter().map(|v| (v + 1e-9 / raw.len() as f64) / s).collect();
            let kept = nucleus_filter(&probs, top_p);
            let mode = argmax(&probs);
            prop_assert!(!kept.is_empty());
            prop_assert_eq!(kept[0].0, mode);
            prop_assert!((kept.iter().map(|k| k.1).sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_injection() {
        let (store, gen) = tiny(0, 12);
        let z = LatentSample {
            z: (0..8).map(|i| i as f64 * 0.5).collect(),
            source: LatentSource::Prior,
        };
        let m = gen.inject_latent(&store, &z).unwrap();
        assert_eq!(m.slots.dim(), (1, 8));
        assert_eq!(m.slots.row(0).to_vec(), z.z);
        let zero = LatentSample {
            z: vec![0.0; 8],
            source: LatentSource::Prior,
        };
        assert!(gen.inject_latent(&store, &zero).unwrap().slots.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn projected_injection_has_model_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trunk = Trunk::new(&mut store, "t", ParamGroup::Trunk, EncoderConfig { d: 8, layers: 1, heads: 2, dropout: 0.0, max_position: 16 }, 10, true, &mut rng);
        let gen = Generator::new(&mut store, trunk, 3, &mut rng);
        let z = LatentSample { z: vec![1.0, 2.0, 3.0], source: LatentSource::Recognition };
        assert_eq!(gen.inject_latent(&store, &z).unwrap().slots.dim(), (1, 8));
    }

    #[test]
    fn uniform_output_gives_log_vocab() {
        let (mut store, gen) = tiny(1, 12);
        store.value_mut(gen.trunk.token_embedding).fill(0.0);
        let l = gen.decode_loss(&store, &memory(0.3), &[4, 5, EOS], &[6, 7, EOS]).unwrap();
        assert!((l - 12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_is_nonnegative_and_stateless() {
        let (store, gen) = tiny(2, 12);
        let a = gen.decode_loss(&store, &memory(0.1), &[4, 5, EOS], &[6, 7, EOS]).unwrap();
        let _ = gen.decode_loss(&store, &memory(-2.0), &[9, EOS], &[8, EOS]).unwrap();
        let b = gen.decode_loss(&store, &memory(0.1), &[4, 5, EOS], &[6, 7, EOS]).unwrap();
        assert!(a >= 0.0);
        assert_eq!(a, b);
        assert!(matches!(gen.decode_loss(&store, &memory(0.1), &[4, EOS], &[EOS]), Err(ClvError::EmptySequence)));
    }

    #[test]
    fn logits_are_causal() {
        let (store, gen) = tiny(3, 14);
        let q = [4, 5, 6, EOS];
        let r1 = [7, 8, 9, 10, EOS];
        let r2 = [7, 8, 11, 12, 13];
        let a = gen.response_logits(&store, &memory(0.2), &q, &r1).unwrap();
        let b = gen.response_logits(&store, &memory(0.2), &q, &r2).unwrap();
        // position t sees bos and response[..t], so rows 0..=2 share inputs
        for t in 0..=2 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn memory_gradient_matches_finite_differences() {
        let (store, gen) = tiny(4, 12);
        let m0 = Array2::from_shape_fn((1, 8), |(_, j)| (j as f64 * 0.7).sin());
        let q = [4, 5, EOS];
        let r = [6, 7, 8, EOS];
        let mut g = Graph::new(GradMode::All);
        let m = g.variable(m0.clone());
        let l = gen.decode_loss_node(&mut g, &store, m, &q, &r, &mut Mode::Eval).unwrap();
        let analytic = g.backward(l).node(m).unwrap().clone();
        let numeric = numeric_gradient(&m0, 1e-5, |x| {
            gen.decode_loss(&store, &LatentMemory { slots: x.clone() }, &q, &r).unwrap()
        });
        assert!(max_relative_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn generation_is_seeded_and_bounded() {
        let (store, gen) = tiny(5, 12);
        let cfg = GenerationConfig { max_new_tokens: 6, seed: 9, top_p: 1.0, ..Default::default() };
        let a = gen.generate(&store, &memory(0.5), &[4, 5, EOS], &cfg).unwrap();
        let b = gen.generate(&store, &memory(0.5), &[4, 5, EOS], &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6);
        assert!(a.iter().all(|&t| t != PAD && t != BOS && t != EOS));
        let greedy = GenerationConfig { greedy: true, ..cfg };
        assert!(gen.generate(&store, &memory(0.5), &[4, 5, EOS], &greedy).unwrap().len() <= 6);
    }

    #[test]
    fn generation_never_emits_pad_across_seeds() {
        let (store, gen) = tiny(6, 6);
        for seed in 0..30 {
            let cfg = GenerationConfig { max_new_tokens: 8, seed, top_p: 1.0, temperature: 3.0, greedy: false };
            let out = gen.generate(&store, &memory(0.0), &[4, EOS], &cfg).unwrap();
            assert!(out.len() <= 8);
            assert!(out.iter().all(|&t| t != PAD && t != BOS));
        }
    }
}
