//! Alternating optimization of the contrastive, decider and generation
//! objectives.
//!
//! Each iteration runs two steps. The first updates the separation MLP under
//! the contrastive loss, then the decider against pseudo-labels computed with
//! the generator held fixed. The second updates everything on the generation
//! side under `L_g`. When the encoder shares the generator's trunk, the
//! trunk's share of the contrastive gradient is applied in the second step,
//! so the first step never moves generator weights.

use std::collections::HashMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph};
use crate::checkpoint::{self, TrainingState};
use crate::config::{Ablation, Alternation, Config};
use crate::corpus::{make_batches, Batch, DialogueExample, Vocabulary};
use crate::decider::decider_loss_node;
use crate::encoder::Mode;
use crate::error::{ClvError, Result};
use crate::model::{standard_normal, ClvModel, EncodedExample};
use crate::optim::{clip_global_norm, Adam, AdamConfig, BetaSchedule, WarmupSchedule};
use crate::params::{ParamGroup, ParamId};
use crate::separation::batch_contrastive_loss_node;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Both steps of one alternating iteration.
    Joint,
    ContrastiveDecider,
    Generation,
    /// The single decider pass that follows training without alternation.
    Decider,
}

/// One row of the loss log. Absent components were not computed.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub l_c: Option<f64>,
    pub l_d: Option<f64>,
    pub l_g: Option<f64>,
    pub reconstruction: Option<f64>,
    pub kl_persona: Option<f64>,
    pub kl_response: Option<f64>,
    pub beta: f64,
    pub lr: f64,
    /// Batch mean of the weights used in the generation step.
    pub decider_weights: Vec<f64>,
}

impl LossReport {
    fn empty(step: usize, epoch: usize, phase: Phase, beta: f64, lr: f64) -> Self {
        LossReport {
            step,
            epoch,
            phase,
            l_c: None,
            l_d: None,
            l_g: None,
            reconstruction: None,
            kl_persona: None,
            kl_response: None,
            beta,
            lr,
            decider_weights: Vec::new(),
        }
    }

    fn merge_first_step(&mut self, s: &StepOne) {
        self.l_c = s.l_c;
        self.l_d = s.l_d;
    }

    fn merge_second_step(&mut self, s: &StepTwo) {
        self.l_g = Some(s.l_g);
        self.reconstruction = Some(s.reconstruction);
        self.kl_persona = s.kl_persona;
        self.kl_response = Some(s.kl_response);
        self.decider_weights = s.decider_weights.clone();
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    step: usize,
    epoch: usize,
    phase: Phase,
    l_c: Option<f64>,
    l_d: Option<f64>,
    l_g: Option<f64>,
    reconstruction: Option<f64>,
    kl_persona: Option<f64>,
    kl_response: Option<f64>,
    beta: f64,
    lr: f64,
    decider_weights: String,
}

impl From<&LossReport> for CsvRow {
    fn from(r: &LossReport) -> Self {
        CsvRow {
            step: r.step,
            epoch: r.epoch,
            phase: r.phase,
            l_c: r.l_c,
            l_d: r.l_d,
            l_g: r.l_g,
            reconstruction: r.reconstruction,
            kl_persona: r.kl_persona,
            kl_response: r.kl_response,
            beta: r.beta,
            lr: r.lr,
            decider_weights: r
                .decider_weights
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        }
    }
}

impl CsvRow {
    fn into_report(self) -> Result<LossReport> {
        let decider_weights = if self.decider_weights.is_empty() {
            Vec::new()
        } else {
            self.decider_weights
                .split(';')
                .map(|s| s.parse::<f64>().map_err(|e| ClvError::InvalidArgument(format!("bad weight `{s}`: {e}"))))
                .collect::<Result<_>>()?
        };
        Ok(LossReport {
            step: self.step,
            epoch: self.epoch,
            phase: self.phase,
            l_c: self.l_c,
            l_d: self.l_d,
            l_g: self.l_g,
            reconstruction: self.reconstruction,
            kl_persona: self.kl_persona,
            kl_response: self.kl_response,
            beta: self.beta,
            lr: self.lr,
            decider_weights,
        })
    }
}

/// Incremental CSV writer for [`LossReport`] rows.
pub struct LossLog {
    writer: csv::Writer<File>,
}

impl LossLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(LossLog {
            writer: csv::Writer::from_path(path)?,
        })
    }

    pub fn append(&mut self, report: &LossReport) -> Result<()> {
        self.writer.serialize(CsvRow::from(report))?;
        self.writer.flush()?;
        Ok(())
    }
}

pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<LossReport>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize::<CsvRow>()
        .map(|row| row.map_err(ClvError::from).and_then(CsvRow::into_report))
        .collect()
}

/// Result of the contrastive/decider step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOne {
    pub l_c: Option<f64>,
    pub l_d: Option<f64>,
}

/// Result of the generation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTwo {
    pub l_g: f64,
    pub reconstruction: f64,
    pub kl_persona: Option<f64>,
    pub kl_response: f64,
    pub decider_weights: Vec<f64>,
    pub beta: f64,
    pub lr: f64,
}

pub fn examples_of(batch: &Batch) -> Vec<EncodedExample> {
    (0..batch.len())
        .map(|i| EncodedExample {
            persona: batch.persona(i),
            query: batch.query(i),
            response: batch.response(i),
        })
        .collect()
}

fn owned(grads: &Gradients) -> Vec<(ParamId, Array2<f64>)> {
    grads.params().into_iter().map(|(id, g)| (id, g.clone())).collect()
}

fn check_finite(value: f64, step: usize, component: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(ClvError::NonFinite {
            step,
            component: component.into(),
        })
    }
}

pub struct Trainer {
    pub config: Config,
    pub model: ClvModel,
    optimizer: Adam,
    noise_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    lr: WarmupSchedule,
    beta: BetaSchedule,
    step: usize,
}

impl Trainer {
    /// `total_steps` is the number of generation steps the schedules span.
    pub fn new(config: Config, vocab: Vocabulary, total_steps: usize) -> Result<Self> {
        config.validate()?;
        let model = ClvModel::new(config.model(), vocab, config.seed)?;
        let stream = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(config.seed);
            r.set_stream(s);
            r
        };
        Ok(Trainer {
            optimizer: Adam::new(
                AdamConfig {
                    weight_decay: config.weight_decay,
                    ..Default::default()
                },
                &[ParamGroup::Trunk],
            ),
            noise_rng: stream(1),
            dropout_rng: stream(2),
            lr: WarmupSchedule::new(config.max_learning_rate, config.warmup_fraction, total_steps),
            beta: BetaSchedule::new(config.beta_anneal_fraction, total_steps),
            step: 0,
            model,
            config,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.lr.at(self.step)
    }

    pub fn current_beta(&self) -> f64 {
        self.beta.at(self.step)
    }

    fn contrastive_enabled(&self) -> bool {
        !self.config.has(Ablation::NoContrastive) && !self.config.has(Ablation::NoSelfSeparation)
    }

    fn decider_enabled(&self) -> bool {
        !self.config.has(Ablation::NoDecider) && !self.config.has(Ablation::NoSelfSeparation)
    }

    fn apply(&mut self, mut grads: Vec<(ParamId, Array2<f64>)>) {
        clip_global_norm(&mut grads, self.config.grad_clip);
        let lr = self.current_lr();
        self.optimizer.step(&mut self.model.store, &grads, lr);
    }

    /// Contrastive loss over the batch's persona groups, differentiable in `groups`.
    fn contrastive_gradients(&mut self, batch: &[EncodedExample], groups: &[ParamGroup]) -> Result<(f64, Gradients)> {
        let Trainer {
            model, dropout_rng, config, ..
        } = self;
        let mut g = Graph::trainable(groups);
        let mut mode = if config.dropout > 0.0 {
            Mode::Train(dropout_rng)
        } else {
            Mode::Eval
        };
        let pgs = batch
            .iter()
            .map(|ex| model.grouped_persona_node(&mut g, &ex.persona, &mut mode))
            .collect::<Result<Vec<_>>>()?;
        let lc = batch_contrastive_loss_node(&mut g, &pgs, config.tau)?;
        let value = g.scalar(lc);
        let scaled = g.scale(lc, config.contrastive_weight);
        Ok((value, g.backward(scaled)))
    }

    /// Step one: contrastive update, then the decider update against
    /// pseudo-labels. Generator and latent heads are not touched.
    pub fn step_contrastive_and_decider(&mut self, batch: &[EncodedExample], train_decider: bool) -> Result<StepOne> {
        let mut out = StepOne::default();
        if self.contrastive_enabled() {
            if batch.len() < 2 {
                log::warn!("step {}: batch of one, contrastive update skipped", self.step);
            } else {
                let groups = self.model.contrastive_groups();
                let (lc, grads) = self.contrastive_gradients(batch, &groups)?;
                check_finite(lc, self.step, "l_c")?;
                self.apply(owned(&grads));
                out.l_c = Some(lc);
            }
        }
        if train_decider && self.decider_enabled() {
            out.l_d = Some(self.decider_update(batch)?);
        }
        Ok(out)
    }

    fn decider_update(&mut self, batch: &[EncodedExample]) -> Result<f64> {
        let model = &self.model;
        let mut g = Graph::trainable(&[ParamGroup::Decider]);
        let mut losses = Vec::with_capacity(batch.len());
        for ex in batch {
            let (q, latents) = model.recognition_latents(ex, false, &mut self.noise_rng)?;
            let z_g = latents.persona.expect("persona latents");
            let y = model.pseudo_label(&z_g, &latents.response, ex)?;
            let zn = g.constant(z_g.rows);
            let qn = g.constant(q.as_row());
            let logits = model.decider().logits_node(&mut g, &model.store, zn, qn)?;
            losses.push(decider_loss_node(&mut g, logits, y));
        }
        let stacked = g.concat_cols(&losses);
        let ld = g.mean(stacked);
        let value = g.scalar(ld);
        check_finite(value, self.step, "l_d")?;
        let grads = owned(&g.backward(ld));
        self.apply(grads);
        Ok(value)
    }

    /// Step two: `L_g` over the batch, updating trunk, encoder, separation
    /// and latent heads. The decider's weights enter as constants.
    pub fn step_generation(&mut self, batch: &[EncodedExample]) -> Result<StepTwo> {
        if batch.is_empty() {
            return Err(ClvError::InvalidArgument("empty batch".into()));
        }
        let beta = self.current_beta();
        let lr = self.current_lr();
        let groups = self.model.generation_groups();
        let Trainer {
            model,
            noise_rng,
            dropout_rng,
            config,
            ..
        } = self;
        let mut g = Graph::trainable(&groups);
        let mut mode = if config.dropout > 0.0 {
            Mode::Train(dropout_rng)
        } else {
            Mode::Eval
        };
        let b = batch.len() as f64;
        let (mut rec, mut klr) = (0.0, 0.0);
        let mut klp: Option<f64> = None;
        let mut weight_sum: Vec<f64> = Vec::new();
        let mut losses = Vec::with_capacity(batch.len());
        for ex in batch {
            let t = model.generation_terms(&mut g, ex, beta, &mut mode, &mut |r, c| standard_normal(noise_rng, r, c))?;
            losses.push(t.loss);
            rec += t.reconstruction / b;
            klr += t.kl_response / b;
            if let Some(k) = t.kl_persona {
                *klp.get_or_insert(0.0) += k / b;
            }
            if let Some(w) = t.weights {
                weight_sum.resize(w.len(), 0.0);
                weight_sum.iter_mut().zip(w.as_slice()).for_each(|(s, v)| *s += v);
            }
        }
        let stacked = g.concat_cols(&losses);
        let lg = g.mean(stacked);
        let l_g = g.scalar(lg);
        check_finite(l_g, self.step, "l_g")?;
        let mut grads = owned(&g.backward(lg));

        if self.model.config.share_trunk && self.contrastive_enabled() && batch.len() >= 2 {
            let (_, trunk_grads) = self.contrastive_gradients(batch, &[ParamGroup::Trunk])?;
            let mut index: HashMap<usize, usize> = grads.iter().enumerate().map(|(i, (id, _))| (id.0, i)).collect();
            for (id, gr) in trunk_grads.params() {
                match index.get(&id.0) {
                    Some(&i) => grads[i].1 += gr,
                    None => {
                        index.insert(id.0, grads.len());
                        grads.push((id, gr.clone()));
                    }
                }
            }
        }
        self.apply(grads);

        let decider_weights = if self.config.has(Ablation::NoDecider) && !weight_sum.is_empty() {
            vec![1.0 / weight_sum.len() as f64; weight_sum.len()]
        } else {
            weight_sum.iter().map(|s| s / b).collect()
        };
        self.step += 1;
        Ok(StepTwo {
            l_g,
            reconstruction: rec,
            kl_persona: klp,
            kl_response: klr,
            decider_weights,
            beta,
            lr,
        })
    }

    /// Mean `L_g` (β = 1, zero noise) over `examples`, without updates.
    pub fn validation_loss(&self, examples: &[EncodedExample]) -> Result<f64> {
        let mut total = 0.0;
        for ex in examples {
            let mut g = Graph::inference();
            let t = self
                .model
                .generation_terms(&mut g, ex, 1.0, &mut Mode::Eval, &mut |r, c| Array2::zeros((r, c)))?;
            total += g.scalar(t.loss);
        }
        Ok(total / examples.len() as f64)
    }
}

/// What a finished run leaves behind.
pub struct TrainOutcome {
    pub model: ClvModel,
    pub log: Vec<LossReport>,
    /// Epoch of the lowest validation `L_g` (0 is the initialization).
    pub best_epoch: usize,
    pub best_valid_loss: f64,
}

/// Files a run writes into its output directory.
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn losses(&self) -> PathBuf {
        self.dir.join("losses.csv")
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("checkpoint_epoch{epoch}.clv"))
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.clv")
    }
    pub fn abort_snapshot(&self) -> PathBuf {
        self.dir.join("abort_snapshot.clv")
    }
}

/// Trains from scratch. With `out_dir` set, writes the resolved config, the
/// loss CSV, one checkpoint per epoch (plus the initialization) and `best.clv`.
pub fn train(
    config: &Config,
    train_set: &[DialogueExample],
    valid_set: Option<&[DialogueExample]>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(ClvError::EmptyCorpus);
    }
    let vocab = Vocabulary::build(train_set, config.min_count)?;
    let n_batches = train_set.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * n_batches;
    let mut trainer = Trainer::new(config.clone(), vocab, total_steps)?;
    let files = out_dir.map(|d| RunFiles { dir: d.to_path_buf() });
    let mut csv = match &files {
        Some(f) => {
            fs::create_dir_all(&f.dir)?;
            fs::write(f.config(), config.to_toml_string())?;
            Some(LossLog::create(f.losses())?)
        }
        None => None,
    };
    let encode_all = |set: &[DialogueExample], model: &ClvModel| -> Vec<EncodedExample> {
        set.iter()
            .map(|e| model.encode_example(&e.persona_text, &e.query, &e.response))
            .collect()
    };
    let valid = encode_all(valid_set.unwrap_or(train_set), &trainer.model);

    let save = |trainer: &Trainer, path: PathBuf, epoch: usize| -> Result<()> {
        checkpoint::save(
            path,
            &trainer.model,
            &TrainingState {
                epoch,
                step: trainer.step(),
            },
        )
    };
    let mut best_epoch = 0;
    let mut best_valid_loss = trainer.validation_loss(&valid)?;
    if let Some(f) = &files {
        save(&trainer, f.epoch_checkpoint(0), 0)?;
        save(&trainer, f.best(), 0)?;
    }

    let joint = !config.has(Ablation::NoJointTraining);
    let mut log = Vec::new();
    let mut record = |r: LossReport, log: &mut Vec<LossReport>| -> Result<()> {
        if let Some(c) = csv.as_mut() {
            c.append(&r)?;
        }
        log.push(r);
        Ok(())
    };

    let outcome = (|| -> Result<()> {
        for epoch in 1..=config.epochs {
            let batches = make_batches(
                train_set,
                &trainer.model.vocab,
                config.batch_size,
                config.seed.wrapping_add(epoch as u64),
                config.max_len,
            )?;
            let batches: Vec<Vec<EncodedExample>> = batches.iter().map(examples_of).collect();
            match config.alternation {
                Alternation::Batch => {
                    for b in &batches {
                        let (step, beta, lr) = (trainer.step(), trainer.current_beta(), trainer.current_lr());
                        let mut r = LossReport::empty(step, epoch, Phase::Joint, beta, lr);
                        let one = trainer.step_contrastive_and_decider(b, joint)?;
                        r.merge_first_step(&one);
                        let two = trainer.step_generation(b)?;
                        r.merge_second_step(&two);
                        record(r, &mut log)?;
                    }
                }
                Alternation::Epoch => {
                    for b in &batches {
                        let (step, beta, lr) = (trainer.step(), trainer.current_beta(), trainer.current_lr());
                        let mut r = LossReport::empty(step, epoch, Phase::ContrastiveDecider, beta, lr);
                        r.merge_first_step(&trainer.step_contrastive_and_decider(b, joint)?);
                        record(r, &mut log)?;
                    }
                    for b in &batches {
                        let (step, beta, lr) = (trainer.step(), trainer.current_beta(), trainer.current_lr());
                        let mut r = LossReport::empty(step, epoch, Phase::Generation, beta, lr);
                        r.merge_second_step(&trainer.step_generation(b)?);
                        record(r, &mut log)?;
                    }
                }
            }
            let v = trainer.validation_loss(&valid)?;
            check_finite(v, trainer.step(), "validation l_g")?;
            log::info!("epoch {epoch}: validation l_g {v:.4}");
            if let Some(f) = &files {
                save(&trainer, f.epoch_checkpoint(epoch), epoch)?;
            }
            if v < best_valid_loss {
                best_valid_loss = v;
                best_epoch = epoch;
                if let Some(f) = &files {
                    save(&trainer, f.best(), epoch)?;
                }
            }
        }
        if !joint && config.epochs > 0 && trainer.decider_enabled() {
            // one decider pass over the converged generator
            let batches = make_batches(
                train_set,
                &trainer.model.vocab,
                config.batch_size,
                config.seed.wrapping_add(config.epochs as u64 + 1),
                config.max_len,
            )?;
            for b in batches.iter().map(examples_of) {
                let step = trainer.step();
                let mut r = LossReport::empty(step, config.epochs, Phase::Decider, trainer.current_beta(), trainer.current_lr());
                r.l_d = Some(trainer.decider_update(&b)?);
                record(r, &mut log)?;
            }
            best_valid_loss = trainer.validation_loss(&valid)?;
            best_epoch = config.epochs;
            if let Some(f) = &files {
                save(&trainer, f.epoch_checkpoint(config.epochs), config.epochs)?;
                save(&trainer, f.best(), config.epochs)?;
            }
        }
        Ok(())
    })();

    if let Err(e) = outcome {
        if let (ClvError::NonFinite { .. }, Some(f)) = (&e, &files) {
            log::error!("{e}; writing {}", f.abort_snapshot().display());
            save(&trainer, f.abort_snapshot(), 0)?;
        }
        return Err(e);
    }
    Ok(TrainOutcome {
        model: trainer.model,
        log,
        best_epoch,
        best_valid_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Vec<DialogueExample> {
        vec![
            DialogueExample::new(&["i like tea"], "what do you drink", "tea mostly"),
            DialogueExample::new(&["i have a dog"], "any pets", "a dog named rex"),
            DialogueExample::new(&["i live in paris"], "where do you live", "paris"),
            DialogueExample::new(&["i play chess"], "hobbies", "chess every day"),
        ]
    }

    fn config(extra: &[&str]) -> Config {
        let mut o: Vec<String> = [
            "d=16", "layers=1", "heads=2", "n_groups=2", "max_position=40", "max_len=12", "batch_size=2", "epochs=2",
            "max_learning_rate=0.003",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        o.extend(extra.iter().map(|s| s.to_string()));
        Config::from_toml_str("", &o).unwrap()
    }

    fn batch(t: &Trainer) -> Vec<EncodedExample> {
        corpus()
            .iter()
            .take(3)
            .map(|e| t.model.encode_example(&e.persona_text, &e.query, &e.response))
            .collect()
    }

    fn trainer(extra: &[&str]) -> Trainer {
        let c = config(extra);
        let vocab = Vocabulary::build(&corpus(), 1).unwrap();
        Trainer::new(c, vocab, 10).unwrap()
    }

    const GENERATION_SIDE: [ParamGroup; 2] = [ParamGroup::Trunk, ParamGroup::Latent];

    #[test]
    fn first_step_leaves_generator_and_latent_heads_alone() {
        for share in ["share_trunk=true", "share_trunk=false"] {
            let mut t = trainer(&[share]);
            let b = batch(&t);
            let before = t.model.store.checksum(&GENERATION_SIDE);
            let sep = t.model.store.checksum(&[ParamGroup::Separation]);
            let dec = t.model.store.checksum(&[ParamGroup::Decider]);
            let r = t.step_contrastive_and_decider(&b, true).unwrap();
            assert!(r.l_c.is_some() && r.l_d.is_some());
            assert_eq!(t.model.store.checksum(&GENERATION_SIDE), before);
            assert_ne!(t.model.store.checksum(&[ParamGroup::Separation]), sep);
            assert_ne!(t.model.store.checksum(&[ParamGroup::Decider]), dec);
        }
    }

    #[test]
    fn second_step_leaves_decider_alone() {
        let mut t = trainer(&[]);
        let b = batch(&t);
        let dec = t.model.store.checksum(&[ParamGroup::Decider]);
        let gen = t.model.store.checksum(&GENERATION_SIDE);
        let r = t.step_generation(&b).unwrap();
        assert!(r.l_g.is_finite());
        assert_eq!(t.model.store.checksum(&[ParamGroup::Decider]), dec);
        assert_ne!(t.model.store.checksum(&GENERATION_SIDE), gen);
        assert_eq!(r.beta, 0.0);
    }

    #[test]
    fn batch_of_one_skips_contrastive() {
        let mut t = trainer(&[]);
        let b = batch(&t);
        let r = t.step_contrastive_and_decider(&b[..1], true).unwrap();
        assert!(r.l_c.is_none());
        assert!(r.l_d.is_some());
    }

    #[test]
    fn ablations_disable_their_paths() {
        let mut t = trainer(&["ablation=no_contrastive"]);
        let b = batch(&t);
        assert!(t.step_contrastive_and_decider(&b, true).unwrap().l_c.is_none());

        let mut t = trainer(&["ablation=no_decider", "n_groups=3"]);
        let b = batch(&t);
        assert!(t.step_contrastive_and_decider(&b, true).unwrap().l_d.is_none());
        let w = t.step_generation(&b).unwrap().decider_weights;
        assert_eq!(w, vec![1.0 / 3.0; 3]);

        let mut t = trainer(&["ablation=no_self_separation"]);
        let b = batch(&t);
        assert_eq!(t.step_contrastive_and_decider(&b, true).unwrap(), StepOne::default());
        let two = t.step_generation(&b).unwrap();
        assert!(two.kl_persona.is_none());
        assert!(two.decider_weights.is_empty());
    }

    #[test]
    fn runs_are_reproducible_and_logged() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(&[]);
        let a = train(&c, &corpus(), None, Some(dir.path())).unwrap();
        let b = train(&c, &corpus(), None, None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 4);
        let files = RunFiles { dir: dir.path().to_path_buf() };
        assert_eq!(read_loss_log(files.losses()).unwrap(), a.log);
        for e in 0..=2 {
            assert!(files.epoch_checkpoint(e).exists());
        }
        assert!(files.best().exists());
        let snapshot = Config::load(files.config(), &[]).unwrap();
        assert_eq!(snapshot, c);
    }

    #[test]
    fn zero_epochs_only_write_the_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&config(&["epochs=0"]), &corpus(), None, Some(dir.path())).unwrap();
        assert!(out.log.is_empty());
        let files = RunFiles { dir: dir.path().to_path_buf() };
        assert!(files.epoch_checkpoint(0).exists());
        assert!(!files.epoch_checkpoint(1).exists());
    }

    #[test]
    fn no_joint_training_runs_decider_afterwards() {
        let out = train(&config(&["ablation=no_joint_training"]), &corpus(), None, None).unwrap();
        let (main, post): (Vec<_>, Vec<_>) = out.log.iter().partition(|r| r.phase == Phase::Joint);
        assert!(main.iter().all(|r| r.l_d.is_none() && r.l_c.is_some()));
        assert_eq!(post.len(), 2);
        assert!(post.iter().all(|r| r.phase == Phase::Decider && r.l_d.is_some() && r.l_g.is_none()));
    }

    #[test]
    fn epoch_alternation_logs_both_phases() {
        let out = train(&config(&["alternation=\"epoch\"", "epochs=1"]), &corpus(), None, None).unwrap();
        let phases: Vec<Phase> = out.log.iter().map(|r| r.phase).collect();
        assert_eq!(
            phases,
            vec![Phase::ContrastiveDecider, Phase::ContrastiveDecider, Phase::Generation, Phase::Generation]
        );
    }

    #[test]
    fn warmup_reaches_configured_peak() {
        let out = train(&config(&["epochs=4", "warmup_fraction=0.25"]), &corpus(), None, None).unwrap();
        assert!(out.log[0].lr < 0.003);
        assert_eq!(out.log.last().unwrap().lr, 0.003);
        assert_eq!(out.log[0].beta, 0.0);
        assert_eq!(out.log.last().unwrap().beta, 1.0);
    }
}
