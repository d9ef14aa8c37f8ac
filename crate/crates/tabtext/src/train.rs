//! Masked-language-model pretraining and supervised fine-tuning.
//!
//! Both loops share the same machinery: per-sample forward/backward passes
//! with gradient accumulation over a batch, Adam with decoupled weight decay
//! and a linear warmup / linear decay schedule, and generators derived from
//! the run seed by purpose-specific stream counters so every random draw is
//! reproducible and independent of execution order. Fine-tuning holds out a
//! seeded validation split, scores it with ROC-AUC on a schedule, and returns
//! the parameters from the best-scoring step (ties go to the earliest).

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{roc_auc, EvalError};
use crate::model::{positive_probability, Model, ModelError, Parameters};
use crate::tensor::{Tape, Tensor, TensorError, IGNORE_INDEX};
use crate::tokenizer::{MASK, NUM_SPECIALS};

const STEP_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 1 << 48;
const EPOCH_STREAM: u64 = 1 << 56;
/// Dropout streams are spaced by this, so batches up to this size never
/// collide across steps.
const MAX_BATCH: u64 = 1 << 16;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    BadConfig(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("dataset of {0} samples is too small to split")]
    DatasetTooSmall(usize),
    #[error("validation split has a single class; reseed the split or enlarge the validation fraction")]
    SingleClassValidation,
    #[error("loss became non-finite ({loss}) at step {step}; lower the learning rate")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("validation scoring: {0}")]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Probability that a non-special token becomes a loss position.
    pub mask_prob: f64,
    /// Of the loss positions: fraction replaced by the mask token.
    pub mask_token_frac: f64,
    /// Of the loss positions: fraction replaced by a random token; the
    /// remainder is left unchanged.
    pub random_frac: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.15,
            mask_token_frac: 0.8,
            random_frac: 0.1,
            steps: 1000,
            batch_size: 16,
            lr: 3e-4,
            warmup_frac: 0.06,
            weight_decay: 0.01,
            log_every: 50,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return bad(format!("mask_prob {} outside [0, 1]", self.mask_prob));
        }
        if !(0.0..=1.0).contains(&self.mask_token_frac)
            || !(0.0..=1.0).contains(&self.random_frac)
            || self.mask_token_frac + self.random_frac > 1.0
        {
            return bad(format!(
                "replacement fractions {} + {} must each lie in [0, 1] and sum to at most 1",
                self.mask_token_frac, self.random_frac
            ));
        }
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return bad("steps, batch_size, and log_every must be positive".into());
        }
        if self.batch_size as u64 > MAX_BATCH {
            return bad(format!("batch_size {} above {}", self.batch_size, MAX_BATCH));
        }
        validate_opt(self.lr, self.warmup_frac, self.weight_decay)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub eval_every: usize,
    pub val_fraction: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            eval_every: 500,
            val_fraction: 0.02,
            batch_size: 16,
            lr: 3e-4,
            warmup_frac: 0.06,
            weight_decay: 0.01,
            log_every: 50,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        if self.epochs == 0 || self.eval_every == 0 || self.batch_size == 0 || self.log_every == 0
        {
            return bad("epochs, eval_every, batch_size, and log_every must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        if self.batch_size as u64 > MAX_BATCH {
            return bad(format!("batch_size {} above {}", self.batch_size, MAX_BATCH));
        }
        validate_opt(self.lr, self.warmup_frac, self.weight_decay)
    }
}

fn validate_opt(lr: f64, warmup_frac: f64, weight_decay: f64) -> Result<(), TrainError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(TrainError::BadConfig(format!("lr {lr} must be positive")));
    }
    if !(0.0..1.0).contains(&warmup_frac) {
        return Err(TrainError::BadConfig(format!(
            "warmup_frac {warmup_frac} outside [0, 1)"
        )));
    }
    if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
        return Err(TrainError::BadConfig(format!(
            "weight_decay {weight_decay} must be nonnegative"
        )));
    }
    Ok(())
}

/// One record of the training trajectory, emitted as JSON lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub split: String,
    pub loss: f64,
    pub auc: Option<f64>,
}

/// A tokenized sample with its binary label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub ids: Vec<u32>,
    pub label: u8,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Apply the masking recipe to one sequence. Returns (inputs, targets) where
/// targets carry the original token at loss positions and the ignore marker
/// everywhere else. Special tokens are never selected.
pub fn mask_for_mlm<R: Rng>(
    ids: &[u32],
    vocab_size: usize,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> (Vec<u32>, Vec<u32>) {
    let mut inputs = ids.to_vec();
    let mut targets = vec![IGNORE_INDEX; ids.len()];
    let plain_tokens = NUM_SPECIALS as usize..vocab_size;
    for (i, &id) in ids.iter().enumerate() {
        if id < NUM_SPECIALS {
            continue;
        }
        if rng.random::<f64>() >= cfg.mask_prob {
            continue;
        }
        targets[i] = id;
        let roll = rng.random::<f64>();
        if roll < cfg.mask_token_frac {
            inputs[i] = MASK;
        } else if roll < cfg.mask_token_frac + cfg.random_frac {
            inputs[i] = rng.random_range(plain_tokens.clone()) as u32;
        }
    }
    (inputs, targets)
}

/// Adam with decoupled weight decay and a linear warmup / linear decay
/// learning-rate schedule reaching zero at the final step.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    warmup_steps: usize,
    total_steps: usize,
    t: usize,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, warmup_frac: f64, weight_decay: f64, total_steps: usize) -> Self {
        let warmup_steps = ((total_steps as f64 * warmup_frac).round() as usize)
            .min(total_steps.saturating_sub(1));
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            warmup_steps,
            total_steps,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// Learning rate at 0-based step index.
    pub fn lr_at(&self, t: usize) -> f64 {
        if t < self.warmup_steps {
            self.lr * (t + 1) as f64 / self.warmup_steps as f64
        } else {
            let span = (self.total_steps - self.warmup_steps).max(1) as f64;
            self.lr * (self.total_steps - t.min(self.total_steps)) as f64 / span
        }
    }

    /// One update from accumulated gradients (mean over the batch). Missing
    /// entries are treated as zero gradients; weight decay applies to every
    /// parameter regardless.
    pub fn step(&mut self, params: &mut Parameters, grads: &IndexMap<String, Tensor>) {
        let lr_t = self.lr_at(self.t);
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let g = grads.get(name);
            let ms = m.data_mut();
            let vs = v.data_mut();
            let ps = p.data_mut();
            for i in 0..ps.len() {
                let gi = g.map_or(0.0, |t| t.data()[i]);
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * gi;
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ps[i] -= lr_t * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * ps[i]);
            }
        }
    }
}

struct GradAccumulator {
    grads: IndexMap<String, Tensor>,
    count: usize,
}

impl GradAccumulator {
    fn new() -> Self {
        Self {
            grads: IndexMap::new(),
            count: 0,
        }
    }

    fn add_sample(&mut self, pairs: impl Iterator<Item = (String, Tensor)>) {
        self.count += 1;
        for (name, g) in pairs {
            match self.grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.grads.insert(name, g);
                }
            }
        }
    }

    fn into_mean(mut self) -> IndexMap<String, Tensor> {
        let scale = 1.0 / self.count.max(1) as f64;
        for g in self.grads.values_mut() {
            g.scale_assign(scale);
        }
        self.grads
    }
}

/// MLM-train the model in place; returns the loss trajectory.
pub fn pretrain(
    model: &mut Model,
    corpus: &[Vec<u32>],
    cfg: &PretrainConfig,
) -> Result<Vec<StepLog>, TrainError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let vocab_size = model.config.vocab;
    let mut opt = AdamW::new(cfg.lr, cfg.warmup_frac, cfg.weight_decay, cfg.steps);
    let mut history = Vec::new();
    for step in 0..cfg.steps as u64 {
        let mut step_rng = stream_rng(cfg.seed, STEP_STREAM + step);
        let mut acc = GradAccumulator::new();
        let mut loss_sum = 0.0;
        for j in 0..cfg.batch_size as u64 {
            let sample = &corpus[step_rng.random_range(0..corpus.len())];
            let (inputs, targets) = mask_for_mlm(sample, vocab_size, cfg, &mut step_rng);
            let tape = Tape::new();
            let fwd = model.bind_training(
                &tape,
                stream_rng(cfg.seed, DROPOUT_STREAM + step * MAX_BATCH + j),
            );
            let e = fwd.embed(&inputs)?;
            let h = fwd.encode_from_embeddings(e, &vec![1; inputs.len()])?;
            let logits = fwd.mlm_logits(h)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            loss_sum += tape.value(loss).item();
            let grads = tape.backward(loss)?;
            acc.add_sample(fwd.param_vars().filter_map(|(name, var)| {
                grads.get(var).map(|g| (name.to_string(), g.clone()))
            }));
        }
        let mean_loss = loss_sum / cfg.batch_size as f64;
        if !mean_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                loss: mean_loss,
            });
        }
        if step % cfg.log_every as u64 == 0 || step + 1 == cfg.steps as u64 {
            history.push(StepLog {
                step,
                split: "train".into(),
                loss: mean_loss,
                auc: None,
            });
        }
        opt.step(&mut model.params, &acc.into_mean());
    }
    Ok(history)
}

/// Seeded shuffle split; the second part holds `floor(n * fraction)` samples.
pub fn split_train_val<T: Clone>(
    data: &[T],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>), TrainError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(TrainError::BadConfig(format!(
            "split fraction {fraction} outside (0, 1)"
        )));
    }
    if data.len() < 2 {
        return Err(TrainError::DatasetTooSmall(data.len()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val_count = (data.len() as f64 * fraction).floor() as usize;
    let val = order[..val_count].iter().map(|&i| data[i].clone()).collect();
    let train = order[val_count..].iter().map(|&i| data[i].clone()).collect();
    Ok((train, val))
}

/// Result of fine-tuning: the model restored to its best validation step.
#[derive(Debug)]
pub struct FinetuneOutcome {
    pub model: Model,
    pub best_step: u64,
    pub best_auc: f64,
    pub history: Vec<StepLog>,
}

/// Positive-class probability for each sequence, in deterministic eval mode.
pub fn classification_scores(
    model: &Model,
    sequences: &[Vec<u32>],
) -> Result<Vec<f64>, TrainError> {
    let mut scores = Vec::with_capacity(sequences.len());
    for ids in sequences {
        let tape = Tape::eval();
        let fwd = model.bind(&tape);
        let logits = fwd.classify(ids, &vec![1; ids.len()])?;
        scores.push(positive_probability(&tape.value(logits)));
    }
    Ok(scores)
}

fn validation_pass(model: &Model, val: &[LabeledSequence]) -> Result<(f64, f64), TrainError> {
    let mut loss_sum = 0.0;
    let mut scores = Vec::with_capacity(val.len());
    let labels: Vec<u8> = val.iter().map(|s| s.label).collect();
    for sample in val {
        let tape = Tape::eval();
        let fwd = model.bind(&tape);
        let logits = fwd.classify(&sample.ids, &vec![1; sample.ids.len()])?;
        let loss = tape.cross_entropy(logits, &[sample.label as u32])?;
        loss_sum += tape.value(loss).item();
        scores.push(positive_probability(&tape.value(logits)));
    }
    let auc = roc_auc(&scores, &labels)?;
    Ok((loss_sum / val.len() as f64, auc))
}

/// Supervised training with periodic validation scoring. Consumes the model
/// and returns it loaded with the parameters of the best validation step.
pub fn finetune(
    mut model: Model,
    data: &[LabeledSequence],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome, TrainError> {
    cfg.validate()?;
    let (train, val) = split_train_val(data, cfg.val_fraction, cfg.seed)?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::SingleClassValidation);
    }
    if !val.iter().any(|s| s.label == 0) || !val.iter().any(|s| s.label == 1) {
        return Err(TrainError::SingleClassValidation);
    }
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut opt = AdamW::new(cfg.lr, cfg.warmup_frac, cfg.weight_decay, total_steps);
    let mut history = Vec::new();
    let mut best: Option<(f64, u64, Parameters)> = None;

    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs as u64 {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, EPOCH_STREAM + epoch));
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let mut acc = GradAccumulator::new();
            let mut loss_sum = 0.0;
            for (j, &idx) in chunk.iter().enumerate() {
                let sample = &train[idx];
                let tape = Tape::new();
                let fwd = model.bind_training(
                    &tape,
                    stream_rng(cfg.seed, DROPOUT_STREAM + step * MAX_BATCH + j as u64),
                );
                let logits = fwd.classify(&sample.ids, &vec![1; sample.ids.len()])?;
                let loss = tape.cross_entropy(logits, &[sample.label as u32])?;
                loss_sum += tape.value(loss).item();
                let grads = tape.backward(loss)?;
                acc.add_sample(fwd.param_vars().filter_map(|(name, var)| {
                    grads.get(var).map(|g| (name.to_string(), g.clone()))
                }));
            }
            let mean_loss = loss_sum / chunk.len() as f64;
            if !mean_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    loss: mean_loss,
                });
            }
            opt.step(&mut model.params, &acc.into_mean());
            if step % cfg.log_every as u64 == 0 {
                history.push(StepLog {
                    step,
                    split: "train".into(),
                    loss: mean_loss,
                    auc: None,
                });
            }
            if step % cfg.eval_every as u64 == 0 {
                let (val_loss, auc) = validation_pass(&model, &val)?;
                history.push(StepLog {
                    step,
                    split: "val".into(),
                    loss: val_loss,
                    auc: Some(auc),
                });
                if best.as_ref().is_none_or(|(b, _, _)| auc > *b) {
                    best = Some((auc, step, model.params.clone()));
                }
            }
        }
    }
    let (val_loss, auc) = validation_pass(&model, &val)?;
    history.push(StepLog {
        step,
        split: "val".into(),
        loss: val_loss,
        auc: Some(auc),
    });
    if best.as_ref().is_none_or(|(b, _, _)| auc > *b) {
        best = Some((auc, step, model.params.clone()));
    }
    let (best_auc, best_step, best_params) = best.expect("at least the final evaluation ran");
    model.params = best_params;
    Ok(FinetuneOutcome {
        model,
        best_step,
        best_auc,
        history,
    })
}
