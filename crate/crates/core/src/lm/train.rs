//! The training loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::lm::corpus::{MarkovCorpus, Split, TokenStream};
use crate::lm::model::{Batch, TransformerLm};
use crate::lm::optim::{clip_factor, schedule, Adam, AdamSettings};
use crate::table::ADAGRAD_EPS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Sequences per step.
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm bound, bigram table included.
    pub clip_norm: f64,
    pub warmup: usize,
    /// Adagrad rate of the bigram table, scaled by the same schedule.
    pub table_lr: f64,
    /// Freeze the codebook when training ends.
    pub freeze_codebook: bool,
    /// Seeds the training token stream.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            steps: 1000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-10,
            clip_norm: 5.0,
            warmup: 100,
            table_lr: 0.1,
            freeze_codebook: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |x: f64| x >= 0.0 && x.is_finite();
        if self.batch == 0 {
            return Err(Error::Config("train batch must be >= 1".into()));
        }
        if !nonneg(self.lr) || !nonneg(self.table_lr) {
            return Err(Error::Config(format!("learning rates must be >= 0 (lr={}, table_lr={})", self.lr, self.table_lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!("adam betas must be in [0, 1) (beta1={}, beta2={})", self.beta1, self.beta2)));
        }
        if !(self.adam_eps > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("adam_eps and clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Global norm before clipping.
    pub grad_norm: f64,
    pub wall_ms: f64,
}

impl StepRecord {
    /// `step<TAB>loss<TAB>grad_norm<TAB>wall_ms`.
    pub fn tsv(&self) -> String {
        format!("{}\t{:.6}\t{:.6}\t{:.3}", self.step, self.loss, self.grad_norm, self.wall_ms)
    }
}

/// Optimizer and data-stream state for stepping a model.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    adam: Adam,
    stream: TokenStream,
    step: usize,
}

impl Trainer {
    pub fn new(model: &TransformerLm, corpus: &MarkovCorpus, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if corpus.vocab() != model.config().vocab {
            return Err(Error::Config(format!(
                "corpus vocab {} differs from model vocab {}",
                corpus.vocab(),
                model.config().vocab
            )));
        }
        let mut sizes: Vec<usize> = model.params().iter().map(|p| p.value.numel()).collect();
        if let Some(ng) = model.ngrammer() {
            let (d, db) = (ng.config().dim, ng.config().bigram_dim);
            sizes.extend([d, d, db, db]);
        }
        let settings = AdamSettings {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        };
        Ok(Self {
            cfg: cfg.clone(),
            adam: Adam::new(settings, sizes),
            stream: TokenStream::new(corpus, cfg.seed, Split::Train),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    /// Draws a batch and takes one optimization step on it.
    pub fn step(&mut self, model: &mut TransformerLm, corpus: &MarkovCorpus) -> Result<StepRecord> {
        let seqs = self
            .stream
            .sequences(corpus, self.cfg.batch, model.config().seq_len + 1);
        let batch = Batch::from_sequences(&seqs)?;
        self.step_on(model, &batch)
    }

    /// One optimization step on a given batch.
    pub fn step_on(&mut self, model: &mut TransformerLm, batch: &Batch) -> Result<StepRecord> {
        let start = Instant::now();
        let mut tape = Tape::new();
        let fwd = model.forward_train(&mut tape, batch)?;
        let loss = tape.value(fwd.loss).item().expect("scalar loss");
        let mut record = StepRecord {
            step: self.step,
            loss,
            grad_norm: f64::NAN,
            wall_ms: 0.0,
        };
        if !loss.is_finite() {
            record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
            return Err(Error::Numeric(format!("non-finite loss at step {}: {}", record.step, record.tsv())));
        }
        let grads = tape.backward(fwd.loss)?;
        let mut g = model.collect_grads(&grads, &fwd);
        record.grad_norm = g.norm();
        if !record.grad_norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm at step {}", record.step)));
        }
        g.scale(clip_factor(record.grad_norm, self.cfg.clip_norm));

        let rate = schedule(self.step, self.cfg.warmup);
        let mut grad_refs: Vec<&[f64]> = g.dense.iter().map(Vec::as_slice).collect();
        if let Some(ng) = &g.ngrammer {
            grad_refs.extend([&ng.uni_gain, &ng.uni_bias, &ng.bi_gain, &ng.bi_bias].map(Vec::as_slice));
        }
        {
            let (mut slots, layer) = model.split_params_mut();
            if let Some(layer) = layer {
                slots.extend(layer.dense_params_mut().into_iter().map(Vec::as_mut_slice));
            }
            self.adam.step(&mut slots, &grad_refs, self.cfg.lr * rate)?;
        }
        if let (Some(layer), Some(ng)) = (model.ngrammer_mut(), &g.ngrammer) {
            layer.table_mut().adagrad_update(&ng.table, self.cfg.table_lr * rate, ADAGRAD_EPS)?;
        }
        self.step += 1;
        record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(record)
    }
}

/// Trains for `cfg.steps` steps, reporting every record to `on_step`, and
/// freezes the codebook afterwards when configured to.
///
/// A non-finite loss aborts with a numeric error carrying the step record.
pub fn train(
    model: &mut TransformerLm,
    corpus: &MarkovCorpus,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    let mut trainer = Trainer::new(model, corpus, cfg)?;
    let mut log = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let record = trainer.step(model, corpus)?;
        on_step(&record);
        log.push(record);
    }
    if model.ngrammer().is_some_and(|ng| ng.codebook().is_none()) {
        // Zero-step runs still leave a usable layer behind.
        model.prime_codebook_from_embeddings()?;
    }
    if cfg.freeze_codebook {
        model.freeze()?;
    }
    Ok(log)
}
