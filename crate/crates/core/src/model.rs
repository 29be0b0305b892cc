//! The assembled model: encoder, persona separation, latent heads, decider
//! and generator over one parameter store.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::config::{Ablation, ModelConfig};
use crate::corpus::Vocabulary;
use crate::decider::{
    pseudo_label_from_losses, select_latent, select_latent_node, weights_from_logits, Decider, DeciderWeights,
    PseudoLabel,
};
use crate::encoder::{HiddenVector, Mode, Trunk};
use crate::error::{ClvError, Result};
use crate::generator::{GenerationConfig, Generator, LatentMemory};
use crate::latent::{
    combine_latents, kl_node, reparameterize, reparameterize_node, GaussianNodes, GaussianParams, GroupedLatents,
    KlAggregation, KlDirection, LatentNetworks, LatentSample, LatentSource,
};
use crate::params::{ParamGroup, ParamStore};
use crate::separation::{AugmentMask, PersonaSeparator};

pub(crate) fn standard_normal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// One line of generation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persona: Option<String>,
    pub samples: Vec<String>,
    pub latent_source: LatentSource,
    pub decider_weights: Vec<f64>,
}

/// Token ids of one example, each ending in eos.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub persona: Vec<usize>,
    pub query: Vec<usize>,
    pub response: Vec<usize>,
}

/// Nodes and values of one example's generation objective.
pub(crate) struct GenerationTerms {
    pub loss: NodeId,
    pub reconstruction: f64,
    pub kl_persona: Option<f64>,
    pub kl_response: f64,
    pub weights: Option<DeciderWeights>,
}

/// Grouped latents and the response latent for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    pub persona: Option<GroupedLatents>,
    pub response: LatentSample,
}

#[derive(Debug, Clone)]
pub struct ClvModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    encoder: Trunk,
    generator: Generator,
    separator: PersonaSeparator,
    latent: LatentNetworks,
    decider: Decider,
}

impl ClvModel {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = config.encoder;
        let d = enc.d;
        let v = vocab.len();
        let trunk = Trunk::new(&mut store, "trunk", ParamGroup::Trunk, enc, v, true, &mut rng);
        let encoder = if config.share_trunk {
            trunk.clone()
        } else {
            Trunk::new(&mut store, "encoder", ParamGroup::Encoder, enc, v, false, &mut rng)
        };
        let generator = Generator::new(&mut store, trunk, config.z_dim, &mut rng);
        let separator = PersonaSeparator::new(&mut store, d, config.n_groups(), &mut rng)?;
        let latent = LatentNetworks::new(&mut store, d, config.z_dim, &mut rng);
        let decider = Decider::new(
            &mut store,
            config.n_groups(),
            config.z_dim,
            d,
            config.include_null_persona,
            &mut rng,
        );
        Ok(ClvModel {
            config,
            vocab,
            store,
            encoder,
            generator,
            separator,
            latent,
            decider,
        })
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn decider(&self) -> &Decider {
        &self.decider
    }

    pub fn latent_networks(&self) -> &LatentNetworks {
        &self.latent
    }

    pub fn separator(&self) -> &PersonaSeparator {
        &self.separator
    }

    pub fn masks(&self) -> &[AugmentMask] {
        self.separator.masks()
    }

    pub fn n_candidates(&self) -> usize {
        self.decider.n_candidates()
    }

    fn uses_persona(&self) -> bool {
        !self.config.has(Ablation::NoSelfSeparation)
    }

    /// Groups that belong to the generation side of the alternation.
    pub fn generation_groups(&self) -> Vec<ParamGroup> {
        vec![ParamGroup::Trunk, ParamGroup::Encoder, ParamGroup::Separation, ParamGroup::Latent]
    }

    /// Groups the contrastive objective updates in its own step. With a shared
    /// trunk the encoder is the generator, which that step must leave alone.
    pub fn contrastive_groups(&self) -> Vec<ParamGroup> {
        if self.config.share_trunk {
            vec![ParamGroup::Separation]
        } else {
            vec![ParamGroup::Separation, ParamGroup::Encoder]
        }
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        self.vocab.encode_sequence(text, self.config.max_len)
    }

    pub fn encode_example(&self, persona: &str, query: &str, response: &str) -> EncodedExample {
        EncodedExample {
            persona: self.encode_text(persona),
            query: self.encode_text(query),
            response: self.encode_text(response),
        }
    }

    pub fn encode_node(&self, g: &mut Graph, tokens: &[usize], mode: &mut Mode<'_>) -> Result<NodeId> {
        self.encoder.encode_node(g, &self.store, tokens, mode)
    }

    pub fn encode(&self, tokens: &[usize]) -> Result<HiddenVector> {
        self.encoder.encode(&self.store, tokens, &mut Mode::Eval)
    }

    /// Separated persona rows (`N × d`) for one persona sequence.
    pub fn grouped_persona_node(&self, g: &mut Graph, persona: &[usize], mode: &mut Mode<'_>) -> Result<NodeId> {
        let p = self.encode_node(g, persona, mode)?;
        self.separator.separate_node(g, &self.store, p)
    }

    fn candidate_weights(&self, latents: &GroupedLatents, q: &HiddenVector) -> Result<DeciderWeights> {
        if self.config.has(Ablation::NoDecider) {
            Ok(DeciderWeights::uniform(self.n_candidates()))
        } else {
            self.decider.decide(&self.store, latents, q)
        }
    }

    /// The per-example generation objective, recognition path, reparameterized.
    /// `noise(rows, cols)` supplies the standard-normal draws.
    pub(crate) fn generation_terms(
        &self,
        g: &mut Graph,
        ex: &EncodedExample,
        beta: f64,
        mode: &mut Mode<'_>,
        noise: &mut dyn FnMut(usize, usize) -> Array2<f64>,
    ) -> Result<GenerationTerms> {
        let z_dim = self.config.z_dim;
        let q = self.encode_node(g, &ex.query, mode)?;
        let r = self.encode_node(g, &ex.response, mode)?;
        let rec_r = self.latent.recognize_response_node(g, &self.store, q, r)?;
        let prior_r = self.latent.prior_response_node(g, &self.store, q)?;
        let z_r = reparameterize_node(g, rec_r, noise(1, z_dim));
        let kl_r = self.kl(g, rec_r, prior_r);

        let (z, kl_p, weights) = if self.uses_persona() {
            let pg = self.grouped_persona_node(g, &ex.persona, mode)?;
            let rec_p = self.latent.recognize_persona_node(g, &self.store, q, pg)?;
            let prior_p = self.latent.prior_persona_node(g, &self.store, q, self.masks())?;
            let n = self.config.n_groups();
            let zs = reparameterize_node(g, rec_p, noise(n, z_dim));
            let weights = if self.config.has(Ablation::NoDecider) {
                DeciderWeights::uniform(self.n_candidates())
            } else {
                let zc = g.detach(zs);
                let qc = g.detach(q);
                let logits = self.decider.logits_node(g, &self.store, zc, qc)?;
                weights_from_logits(g.value(logits).as_slice().unwrap())
            };
            let z_p = select_latent_node(g, &weights, zs);
            let z = g.add(z_p, z_r);
            let kl_rows = self.kl(g, rec_p, prior_p);
            let agg = self.kl_weights(&weights);
            let agg = g.constant(Array2::from_shape_vec((1, n), agg).unwrap());
            let kl_p = g.matmul(agg, kl_rows);
            (z, Some(kl_p), Some(weights))
        } else {
            (z_r, None, None)
        };

        let memory = self.generator.memory_node(g, &self.store, z)?;
        let rec = self
            .generator
            .decode_loss_node(g, &self.store, memory, &ex.query, &ex.response, mode)?;
        let kl_total = match kl_p {
            Some(k) => g.add(k, kl_r),
            None => kl_r,
        };
        let kl_scaled = g.scale(kl_total, beta);
        let loss = g.add(rec, kl_scaled);
        Ok(GenerationTerms {
            loss,
            reconstruction: g.scalar(rec),
            kl_persona: kl_p.map(|k| g.scalar(k)),
            kl_response: g.scalar(kl_r),
            weights,
        })
    }

    fn kl(&self, g: &mut Graph, recognition: GaussianNodes, prior: GaussianNodes) -> NodeId {
        match self.config.kl_direction {
            KlDirection::Standard => kl_node(g, recognition, prior),
            KlDirection::Paper => kl_node(g, prior, recognition),
        }
    }

    fn kl_weights(&self, w: &DeciderWeights) -> Vec<f64> {
        let n = self.config.n_groups();
        match self.config.kl_aggregation {
            KlAggregation::Weighted => w.as_slice()[..n].to_vec(),
            KlAggregation::Uniform => vec![1.0 / n as f64; n],
            KlAggregation::Selected => {
                let k = w.argmax();
                (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
            }
        }
    }

    fn sample_or_mean<R: Rng>(params: &GaussianParams, mean_only: bool, source: LatentSource, rng: &mut R) -> Result<LatentSample> {
        if mean_only {
            return Ok(LatentSample {
                z: params.mu.clone(),
                source,
            });
        }
        let noise: Vec<f64> = (0..params.dim()).map(|_| StandardNormal.sample(rng)).collect();
        reparameterize(params, &noise, source)
    }

    fn stack(samples: Vec<LatentSample>, source: LatentSource) -> GroupedLatents {
        let n = samples.len();
        let z_dim = samples[0].z.len();
        let flat: Vec<f64> = samples.into_iter().flat_map(|s| s.z).collect();
        GroupedLatents {
            rows: Array2::from_shape_vec((n, z_dim), flat).unwrap(),
            source,
        }
    }

    /// Latents drawn from the prior networks. Only the query is read.
    pub fn prior_latents<R: Rng>(&self, query: &[usize], mean_only: bool, rng: &mut R) -> Result<(HiddenVector, Latents)> {
        let q = self.encode(query)?;
        let src = LatentSource::Prior;
        let persona = if self.uses_persona() {
            let priors = self.latent.prior_persona_group(&self.store, &q, self.masks())?;
            let rows = priors
                .iter()
                .map(|p| Self::sample_or_mean(p, mean_only, src, rng))
                .collect::<Result<Vec<_>>>()?;
            Some(Self::stack(rows, src))
        } else {
            None
        };
        let prior_r = self.latent.prior_response(&self.store, &q)?;
        let response = Self::sample_or_mean(&prior_r, mean_only, src, rng)?;
        Ok((q, Latents { persona, response }))
    }

    /// Latents drawn from the recognition networks, which read the persona
    /// and the gold response.
    pub fn recognition_latents<R: Rng>(
        &self,
        ex: &EncodedExample,
        mean_only: bool,
        rng: &mut R,
    ) -> Result<(HiddenVector, Latents)> {
        let q = self.encode(&ex.query)?;
        let src = LatentSource::Recognition;
        let persona = if self.uses_persona() {
            let p = self.encode(&ex.persona)?;
            let pg = self.separator.separate(&self.store, &p)?;
            let rec = self.latent.recognize_persona_group(&self.store, &q, &pg)?;
            let rows = rec
                .iter()
                .map(|p| Self::sample_or_mean(p, mean_only, src, rng))
                .collect::<Result<Vec<_>>>()?;
            Some(Self::stack(rows, src))
        } else {
            None
        };
        let r = self.encode(&ex.response)?;
        let rec_r = self.latent.recognize_response(&self.store, &q, &r)?;
        let response = Self::sample_or_mean(&rec_r, mean_only, src, rng)?;
        Ok((q, Latents { persona, response }))
    }

    /// `z = z_p + z_r` with `z_p` selected by the decider (or uniformly).
    pub fn compose(&self, q: &HiddenVector, latents: &Latents) -> Result<(LatentSample, Option<DeciderWeights>)> {
        match &latents.persona {
            Some(z_g) => {
                let w = self.candidate_weights(z_g, q)?;
                let z_p = select_latent(&w, z_g)?;
                Ok((combine_latents(&z_p, &latents.response)?, Some(w)))
            }
            None => Ok((latents.response.clone(), None)),
        }
    }

    /// Teacher-forced decode loss of every candidate: `Z[k] + z_r` for each
    /// group, then `z_r` alone when the null candidate is enabled.
    pub fn candidate_losses(&self, latents: &GroupedLatents, z_r: &LatentSample, ex: &EncodedExample) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(self.n_candidates());
        for k in 0..latents.n_groups() {
            let z = combine_latents(&latents.row(k), z_r)?;
            losses.push(self.decode_loss(&z, ex)?);
        }
        if self.config.include_null_persona {
            losses.push(self.decode_loss(z_r, ex)?);
        }
        Ok(losses)
    }

    pub fn pseudo_label(&self, latents: &GroupedLatents, z_r: &LatentSample, ex: &EncodedExample) -> Result<PseudoLabel> {
        Ok(pseudo_label_from_losses(&self.candidate_losses(latents, z_r, ex)?))
    }

    pub fn decode_loss(&self, z: &LatentSample, ex: &EncodedExample) -> Result<f64> {
        let memory = self.generator.inject_latent(&self.store, z)?;
        self.generator.decode_loss(&self.store, &memory, &ex.query, &ex.response)
    }

    pub fn memory(&self, z: &LatentSample) -> Result<LatentMemory> {
        self.generator.inject_latent(&self.store, z)
    }

    /// Draws `n_samples` responses for one input. The prior path reads only
    /// `query`; the recognition path needs persona and response text. Each
    /// sample draws fresh latents; the reported weights are the first
    /// sample's.
    pub fn generate_record(
        &self,
        query: &str,
        recognition: Option<(&str, &str)>,
        persona_field: Option<String>,
        n_samples: usize,
        config: &GenerationConfig,
        example_index: u64,
    ) -> Result<GenerationRecord> {
        if n_samples == 0 {
            return Err(ClvError::InvalidArgument("at least one sample is required".into()));
        }
        let mut rng = config.rng_for(example_index);
        let query_ids = self.encode_text(query);
        let encoded = recognition.map(|(p, r)| self.encode_example(p, query, r));
        let mut samples = Vec::with_capacity(n_samples);
        let mut weights = None;
        for _ in 0..n_samples {
            let (q, latents) = match &encoded {
                Some(ex) => self.recognition_latents(ex, config.greedy, &mut rng)?,
                None => self.prior_latents(&query_ids, config.greedy, &mut rng)?,
            };
            let (z, w) = self.compose(&q, &latents)?;
            let memory = self.memory(&z)?;
            let ids = self
                .generator
                .generate_with_rng(&self.store, &memory, &query_ids, config, &mut rng)?;
            samples.push(self.vocab.decode(&ids));
            if weights.is_none() {
                weights = Some(w.map(|w| w.as_slice().to_vec()).unwrap_or_default());
            }
        }
        Ok(GenerationRecord {
            query: query.to_string(),
            persona: persona_field,
            samples,
            latent_source: if encoded.is_some() {
                LatentSource::Recognition
            } else {
                LatentSource::Prior
            },
            decider_weights: weights.unwrap_or_default(),
        })
    }
}
