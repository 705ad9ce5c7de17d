//! Masked-language-model pretraining.
//!
//! All randomness is drawn from named sub-streams of the run seed and keyed
//! by step, so a run restarted from a checkpoint replays exactly the batches,
//! masks and dropout patterns the uninterrupted run would have seen.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::model::{Model, ModelConfig, ModelError};
use crate::rng;
use crate::tensor::{Reduction, Tape, Tensor};
use crate::tokenizer::{SpecialTokens, TokenizerModel};

/// Label value for positions that do not contribute to the loss.
pub const IGNORE_INDEX: i64 = -100;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("corpus yields {sequences} sequences, fewer than one batch of {batch_size}")]
    CorpusTooSmall { sequences: usize, batch_size: usize },
    #[error("non-finite loss at step {step} (lr {lr:e}); gradient norms: {grad_norms}")]
    NonFinite { step: u64, lr: f64, grad_norms: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the corpus is cut into training sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Packing {
    /// Documents (lines) wrapped in begin/end markers, concatenated and chunked to `seq_len`.
    #[default]
    Concat,
    /// One line per sequence, truncated to `seq_len`.
    Sentence,
}

impl std::str::FromStr for Packing {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "concat" => Ok(Packing::Concat),
            "sentence" => Ok(Packing::Sentence),
            other => Err(format!("unknown packing {other:?} (expected concat or sentence)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub max_steps: u64,
    pub mask_prob: f64,
    /// Share of selected positions replaced by the mask token.
    pub mask_token_frac: f64,
    /// Share of selected positions replaced by a random token.
    pub random_token_frac: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub packing: Packing,
    /// Compute per-sequence gradients on the rayon pool.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 96,
            seq_len: 128,
            lr_peak: 1e-4,
            warmup_steps: 0,
            weight_decay: 0.1,
            max_steps: 62_000,
            mask_prob: 0.15,
            mask_token_frac: 0.8,
            random_token_frac: 0.1,
            seed: 0,
            checkpoint_every: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            packing: Packing::Concat,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return fail("mask_prob must lie strictly between 0 and 1");
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.checkpoint_every == 0 {
            return fail("batch_size, max_steps and checkpoint_every must be positive");
        }
        if self.seq_len < 3 {
            return fail("seq_len must leave room for the begin/end markers and one token");
        }
        let (a, b) = (self.mask_token_frac, self.random_token_frac);
        if !(a >= 0.0 && b >= 0.0 && a + b <= 1.0) {
            return fail("mask_token_frac and random_token_frac must be non-negative and sum to at most 1");
        }
        if self.warmup_steps > self.max_steps {
            return fail("warmup_steps must not exceed max_steps");
        }
        if !(self.lr_peak >= 0.0 && self.weight_decay >= 0.0) {
            return fail("lr_peak and weight_decay must be non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return fail("beta1 and beta2 must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }

    pub fn mask_policy(&self) -> MaskPolicy {
        MaskPolicy {
            mask_prob: self.mask_prob,
            mask_token_frac: self.mask_token_frac,
            random_token_frac: self.random_token_frac,
        }
    }
}

/// Linear decay from `lr_peak` at the end of warmup to zero at `max_steps`
/// (linear ramp during warmup). Steps past the end give zero.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step >= cfg.max_steps {
        return 0.0;
    }
    if step < cfg.warmup_steps {
        return cfg.lr_peak * (step as f64 / cfg.warmup_steps as f64);
    }
    cfg.lr_peak * ((cfg.max_steps - step) as f64 / (cfg.max_steps - cfg.warmup_steps) as f64)
}

/// Sequences padded to a common length.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<Vec<u32>>,
    pub pad_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn from_sequences(seqs: &[Vec<u32>], pad_id: u32) -> Self {
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let ids = seqs
            .iter()
            .map(|s| {
                let mut row = s.clone();
                row.resize(width, pad_id);
                row
            })
            .collect();
        let pad_mask = seqs.iter().map(|s| (0..width).map(|i| i >= s.len()).collect()).collect();
        Self { ids, pad_mask }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub input_ids: Vec<Vec<u32>>,
    /// Original id at selected positions, [`IGNORE_INDEX`] elsewhere.
    pub labels: Vec<Vec<i64>>,
    pub pad_mask: Vec<Vec<bool>>,
}

impl MaskedBatch {
    pub fn labeled(&self) -> usize {
        self.labels.iter().flatten().filter(|&&l| l != IGNORE_INDEX).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskPolicy {
    pub mask_prob: f64,
    pub mask_token_frac: f64,
    pub random_token_frac: f64,
}

impl MaskPolicy {
    /// 80% mask token, 10% random token, 10% unchanged.
    pub fn standard(mask_prob: f64) -> Self {
        Self { mask_prob, mask_token_frac: 0.8, random_token_frac: 0.1 }
    }
}

/// Selects each non-pad, non-special position independently with
/// probability `mask_prob` and corrupts the selection. Random replacements
/// are drawn uniformly from the non-special ids.
pub fn mask_batch(batch: &Batch, policy: &MaskPolicy, vocab_size: usize, seed: u64) -> MaskedBatch {
    let specials = SpecialTokens::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input_ids = batch.ids.clone();
    let mut labels = Vec::with_capacity(batch.ids.len());
    for (row, pads) in input_ids.iter_mut().zip(&batch.pad_mask) {
        let mut row_labels = vec![IGNORE_INDEX; row.len()];
        for (i, id) in row.iter_mut().enumerate() {
            if pads[i] || specials.is_special(*id) {
                continue;
            }
            if rng.gen::<f64>() >= policy.mask_prob {
                continue;
            }
            row_labels[i] = i64::from(*id);
            let r: f64 = rng.gen();
            if r < policy.mask_token_frac {
                *id = specials.mask;
            } else if r < policy.mask_token_frac + policy.random_token_frac {
                *id = rng.gen_range(SpecialTokens::COUNT as u32..vocab_size as u32);
            }
        }
        labels.push(row_labels);
    }
    MaskedBatch { input_ids, labels, pad_mask: batch.pad_mask.clone() }
}

/// Cuts tokenized lines into training sequences. Blank lines are skipped.
pub fn prepare_sequences<S: AsRef<str>>(
    lines: &[S],
    tokenizer: &TokenizerModel,
    seq_len: usize,
    packing: Packing,
) -> Vec<Vec<u32>> {
    let docs = lines.iter().map(AsRef::as_ref).filter(|l| !l.trim().is_empty());
    match packing {
        Packing::Concat => {
            let stream: Vec<u32> = docs.flat_map(|l| tokenizer.encode_sentence(l)).collect();
            stream.chunks(seq_len).map(<[u32]>::to_vec).collect()
        }
        Packing::Sentence => docs
            .map(|l| {
                let mut ids = tokenizer.encode_sentence(l);
                if ids.len() > seq_len {
                    ids.truncate(seq_len - 1);
                    ids.push(tokenizer.specials().eos);
                }
                ids
            })
            .collect(),
    }
}

/// Seeded order over sequences: each pass is a fresh permutation and steps
/// read consecutive slices of the passes laid end to end.
#[derive(Debug, Clone)]
pub struct DataOrder {
    len: usize,
    batch_size: usize,
    seed: u64,
}

impl DataOrder {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self, TrainError> {
        if len < batch_size {
            return Err(TrainError::CorpusTooSmall { sequences: len, batch_size });
        }
        Ok(Self { len, batch_size, seed })
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.len).collect();
        perm.shuffle(&mut rng::stream(self.seed, rng::DATA_ORDER, epoch));
        perm
    }

    pub fn indices(&self, step: u64) -> Vec<usize> {
        let start = step as usize * self.batch_size;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (start..start + self.batch_size)
            .map(|k| {
                let epoch = (k / self.len) as u64;
                if cached.as_ref().map_or(true, |(e, _)| *e != epoch) {
                    cached = Some((epoch, self.permutation(epoch)));
                }
                cached.as_ref().unwrap().1[k % self.len]
            })
            .collect()
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self::from_state(cfg, 0, zeros(), zeros())
    }

    pub fn from_state(cfg: &TrainConfig, t: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Self {
        Self { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, weight_decay: cfg.weight_decay, t, m, v }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// One update. Decay applies to parameters whose `decay` flag is set.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], decay: &[bool], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let shrink = if decay[k] { 1.0 - lr * self.weight_decay } else { 1.0 };
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, (x, g)) in p.data_mut().iter_mut().zip(grads[k].data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *x = *x * shrink - lr * update;
            }
        }
    }
}

/// Per-step record written to the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Completed steps after this one.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tokens_per_sec: f64,
    #[serde(skip)]
    pub labeled: usize,
    #[serde(skip)]
    pub grad_norm: f64,
}

/// Summed cross-entropy, labeled count and summed gradients for a batch.
/// Sequences are independent graphs; their gradients are added in batch order.
pub fn batch_gradients(
    model: &Model,
    batch: &MaskedBatch,
    dropout_seed: Option<u64>,
    parallel: bool,
) -> Result<(f64, usize, Vec<Tensor>), ModelError> {
    let one = |i: usize| -> Result<Option<(f64, Vec<Tensor>)>, ModelError> {
        let labels = &batch.labels[i];
        if labels.iter().all(|&l| l == IGNORE_INDEX) {
            return Ok(None);
        }
        let tape = Tape::new();
        let vars = model.leaves(&tape);
        let mut rng = dropout_seed.map(|s| rng::stream(s, "sequence", i as u64));
        let g = model.graph(&tape, &vars, &batch.input_ids[i], &batch.pad_mask[i], rng.as_mut())?;
        let loss = g.logits.cross_entropy(labels, IGNORE_INDEX, Reduction::Sum)?;
        tape.backward(&loss)?;
        let grads = vars.iter().map(|v| tape.grad(v).expect("leaf")).collect();
        Ok(Some((loss.item(), grads)))
    };
    let n = batch.input_ids.len();
    let parts: Vec<_> = if parallel {
        (0..n).into_par_iter().map(one).collect::<Result<_, _>>()?
    } else {
        (0..n).map(one).collect::<Result<_, _>>()?
    };
    let mut total = 0.0;
    let mut grads: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
    for (loss, g) in parts.into_iter().flatten() {
        total += loss;
        for (acc, g) in grads.iter_mut().zip(g) {
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
    }
    Ok((total, batch.labeled(), grads))
}

/// Mean masked-token cross-entropy and one optimizer update. A batch with no
/// labeled positions has loss 0 and leaves the model untouched.
pub fn train_step(
    model: &mut Model,
    batch: &MaskedBatch,
    optimizer: &mut AdamW,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepStats, TrainError> {
    let lr = lr_at(step, cfg);
    let mut stats = StepStats { step: step + 1, loss: 0.0, lr, tokens_per_sec: 0.0, labeled: 0, grad_norm: 0.0 };
    if batch.labeled() == 0 {
        return Ok(stats);
    }
    let dropout_seed = rng::derive_seed(cfg.seed, rng::DROPOUT, step);
    let (sum, labeled, mut grads) = batch_gradients(model, batch, Some(dropout_seed), cfg.parallel)?;
    let scale = 1.0 / labeled as f64;
    grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= scale));
    let norms: Vec<f64> = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let loss = sum * scale;
    let grad_norm = norms.iter().map(|n| n * n).sum::<f64>().sqrt();
    if !loss.is_finite() || !grad_norm.is_finite() {
        let mut named: Vec<(&str, f64)> = model.specs().iter().map(|s| s.name.as_str()).zip(norms).collect();
        named.sort_by(|a, b| b.1.total_cmp(&a.1));
        let grad_norms = named.iter().take(8).map(|(n, v)| format!("{n}={v:e}")).collect::<Vec<_>>().join(", ");
        return Err(TrainError::NonFinite { step, lr, grad_norms: format!("total={grad_norm:e}; {grad_norms}") });
    }
    let decay: Vec<bool> = model.specs().iter().map(|s| s.decay).collect();
    optimizer.step(model.params_mut(), &grads, &decay, lr);
    stats.loss = loss;
    stats.labeled = labeled;
    stats.grad_norm = grad_norm;
    Ok(stats)
}

/// Owns the model, optimizer and data order of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Model,
    optimizer: AdamW,
    cfg: TrainConfig,
    sequences: Vec<Vec<u32>>,
    order: DataOrder,
    step: u64,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: TrainConfig, sequences: Vec<Vec<u32>>) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model = Model::new(model_cfg.clone(), cfg.seed)?;
        let optimizer = AdamW::new(&cfg, model.params());
        Self::assemble(model, optimizer, cfg, sequences, 0)
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint, sequences: Vec<Vec<u32>>) -> Result<Self, TrainError> {
        let cfg = ckpt
            .train_config
            .ok_or_else(|| TrainError::Config("checkpoint has no training configuration".into()))?;
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| TrainError::Config("checkpoint has no optimizer state".into()))?;
        Self::assemble(ckpt.model, optimizer, cfg, sequences, ckpt.step)
    }

    fn assemble(
        model: Model,
        optimizer: AdamW,
        cfg: TrainConfig,
        sequences: Vec<Vec<u32>>,
        step: u64,
    ) -> Result<Self, TrainError> {
        let max_len = model.config().max_seq_len;
        if let Some(s) = sequences.iter().find(|s| s.len() > max_len) {
            return Err(TrainError::Config(format!(
                "sequence of length {} exceeds the model's max_seq_len {max_len}",
                s.len()
            )));
        }
        let order = DataOrder::new(sequences.len(), cfg.batch_size, cfg.seed)?;
        Ok(Self { model, optimizer, cfg, sequences, order, step })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Completed steps.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.cfg.max_steps
    }

    /// The masked batch a given step trains on.
    pub fn batch_for(&self, step: u64) -> MaskedBatch {
        let seqs: Vec<Vec<u32>> = self.order.indices(step).into_iter().map(|i| self.sequences[i].clone()).collect();
        let batch = Batch::from_sequences(&seqs, SpecialTokens::standard().pad);
        let seed = rng::derive_seed(self.cfg.seed, rng::MASKING, step);
        mask_batch(&batch, &self.cfg.mask_policy(), self.model.config().vocab_size, seed)
    }

    pub fn step(&mut self) -> Result<StepStats, TrainError> {
        let start = Instant::now();
        let batch = self.batch_for(self.step);
        let mut stats = train_step(&mut self.model, &batch, &mut self.optimizer, &self.cfg, self.step)?;
        let tokens = batch.pad_mask.iter().flatten().filter(|&&p| !p).count();
        stats.tokens_per_sec = tokens as f64 / start.elapsed().as_secs_f64().max(1e-9);
        self.step += 1;
        Ok(stats)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train_config: Some(self.cfg.clone()),
            seed: self.cfg.seed,
            step: self.step,
            optimizer: Some(self.optimizer.clone()),
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<StepStats>,
    pub final_checkpoint: PathBuf,
}

/// Runs `trainer` to `max_steps`, appending one JSON line per step to
/// `out_dir/metrics.ndjson` and writing `step-<n>.ckpt` every
/// `checkpoint_every` steps plus `final.ckpt` at the end.
pub fn run_training(mut trainer: Trainer, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.ndjson");
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(trainer.steps_done() > 0)
        .truncate(trainer.steps_done() == 0)
        .open(&metrics_path)?;
    let mut log = BufWriter::new(file);
    let mut metrics = Vec::new();
    while !trainer.is_finished() {
        let stats = trainer.step()?;
        writeln!(log, "{}", serde_json::to_string(&stats).expect("plain record"))?;
        log.flush()?;
        log::info!("step {} loss {:.4} lr {:.3e}", stats.step, stats.loss, stats.lr);
        if stats.step % trainer.config().checkpoint_every == 0 && !trainer.is_finished() {
            trainer.checkpoint().save(&out_dir.join(format!("step-{}.ckpt", stats.step)))?;
        }
        metrics.push(stats);
    }
    let final_checkpoint = out_dir.join("final.ckpt");
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainOutcome { model: trainer.into_model(), metrics, final_checkpoint })
}

/// Tokenizes `lines`, builds a fresh model and trains it to completion.
pub fn train_loop<S: AsRef<str>>(
    lines: &[S],
    tokenizer: &TokenizerModel,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    let seq_len = cfg.seq_len.min(model_cfg.max_seq_len);
    let sequences = prepare_sequences(lines, tokenizer, seq_len, cfg.packing);
    let trainer = Trainer::new(model_cfg, cfg.clone(), sequences)?;
    run_training(trainer, out_dir)
}
