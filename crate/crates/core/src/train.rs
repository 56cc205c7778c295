//! Mini-batch training: decoupled-weight-decay adaptive optimizer, linear
//! warmup/decay schedule, seeded batch assembly, periodic validation with
//! best-checkpoint tracking, and a finite-difference gradient-check harness.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::encoder::{ChunkEncoder, VectorArchive};
use crate::metrics::{prf1, ScoreMatrix};
use crate::model::{bce_loss, forward, ModelConfig, ModelError, ModelParams};
use crate::params::ParamSet;
use crate::tensor::{Tape, TensorError};
use crate::textprep::ChunkedDocument;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite gradient in {name} at step {step}")]
    NonFiniteGrad { name: String, step: usize },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub dropout_p: f64,
    pub seed: u64,
    /// Parallel forward/backward workers. 1 keeps training bit-deterministic.
    pub workers: usize,
    /// Validation cadence in steps (0 disables validation).
    pub val_every: usize,
}

impl TrainConfig {
    /// The published fine-tuning configuration.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 5e-5,
            weight_decay: 0.1,
            total_steps: 2500,
            warmup_steps: 500,
            dropout_p: 0.1,
            seed: 42,
            workers: 1,
            val_every: 100,
        }
    }

    /// Desk-scale profile: small corpora, from-scratch embeddings, CPU.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 3e-3,
            weight_decay: 0.01,
            total_steps: 500,
            warmup_steps: 50,
            dropout_p: 0.1,
            seed: 42,
            workers: 1,
            val_every: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(TrainError::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return Err(TrainError::Config("rates must be positive".into()));
        }
        if self.batch_size == 0 || self.workers == 0 {
            return Err(TrainError::Config("batch_size and workers must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

/// Linear ramp from 0 to `base` over the warmup, then linear decay to 0 at
/// `total`. Steps are 1-based.
pub fn lr_schedule(step: usize, warmup: usize, total: usize, base: f64) -> Result<f64> {
    if step < 1 || step > total {
        return Err(TrainError::Config(format!("step {step} outside 1..={total}")));
    }
    if step <= warmup {
        Ok(base * step as f64 / warmup as f64)
    } else {
        Ok(base * (total - step) as f64 / (total - warmup) as f64)
    }
}

/// Adam with decoupled weight decay. Moment state is kept per parameter,
/// aligned with the parameter set's order; frozen tensors are skipped.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(set: &ParamSet) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: set.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: set.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// One update from the gradients currently accumulated on `set`.
    pub fn step(&mut self, set: &mut ParamSet, lr_t: f64, weight_decay: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, p) in set.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteGrad { name: p.name.clone(), step: self.step });
            }
            let m = &mut self.first[idx];
            let v = &mut self.second[idx];
            for j in 0..p.len() {
                let g = p.grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p.values[j] -= lr_t * (m_hat / (v_hat.sqrt() + self.eps) + weight_decay * p.values[j]);
            }
        }
        Ok(())
    }
}

/// What a training run produced.
pub struct TrainOutcome {
    /// Parameters at the last completed step (last good step on abort).
    pub params: ModelParams,
    /// Best-on-validation snapshot, when a validation split was supplied.
    pub best: Option<BestCheckpoint>,
    /// Line-delimited log: step, lr, loss, optional validation metrics.
    pub log: String,
    /// Step at which a non-finite loss aborted training, if any.
    pub aborted_at: Option<usize>,
}

pub struct BestCheckpoint {
    pub step: usize,
    pub val_micro_f1: f64,
    pub params: ModelParams,
}

/// Run `cfg.total_steps` mini-batch updates. Batches are drawn from a
/// seeded shuffle that reshuffles each epoch; datasets smaller than the
/// batch size are resampled. With `archive`, encoder outputs come from the
/// external vectors instead of the trainable embedding encoder.
pub fn train(
    mut params: ModelParams,
    dataset: &[ChunkedDocument],
    val: Option<&[ChunkedDocument]>,
    archive: Option<&VectorArchive>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Config("training dataset is empty".into()));
    }
    let mut optimizer = AdamW::new(&params.set);
    let mut log = String::new();
    let mut best: Option<BestCheckpoint> = None;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for step in 1..=cfg.total_steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| {
                if cursor == order.len() {
                    order.shuffle(&mut shuffle_rng);
                    cursor = 0;
                }
                let i = order[cursor];
                cursor += 1;
                i
            })
            .collect();

        params.set.zero_grads();
        let loss = match accumulate_batch(&mut params, dataset, &batch, archive, cfg, step) {
            Ok(loss) => loss,
            Err(TrainError::Tensor(TensorError::NonFinite { .. })) | Err(TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))) => {
                log.push_str(&format!("step={step} aborted=non_finite_loss\n"));
                return Ok(TrainOutcome { params, best, log, aborted_at: Some(step) });
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            log.push_str(&format!("step={step} aborted=non_finite_loss\n"));
            return Ok(TrainOutcome { params, best, log, aborted_at: Some(step) });
        }

        let lr_t = lr_schedule(step, cfg.warmup_steps, cfg.total_steps, cfg.learning_rate)?;
        match optimizer.step(&mut params.set, lr_t, cfg.weight_decay) {
            Ok(()) => {}
            Err(TrainError::NonFiniteGrad { .. }) => {
                log.push_str(&format!("step={step} aborted=non_finite_grad\n"));
                return Ok(TrainOutcome { params, best, log, aborted_at: Some(step) });
            }
            Err(e) => return Err(e),
        }

        let mut line = format!("step={step} lr={lr_t:.6e} loss={loss:.6}");
        if cfg.val_every > 0 && step % cfg.val_every == 0 {
            if let Some(val_docs) = val {
                let f1 = validation_micro_f1(&params, val_docs, archive)?;
                line.push_str(&format!(" val_micro_f1={f1:.6}"));
                if best.as_ref().map_or(true, |b| f1 > b.val_micro_f1) {
                    best = Some(BestCheckpoint { step, val_micro_f1: f1, params: params.clone() });
                }
            }
        }
        line.push('\n');
        log.push_str(&line);
    }
    Ok(TrainOutcome { params, best, log, aborted_at: None })
}

/// Forward/backward over one batch, accumulating mean gradients into the
/// parameter set. Returns the mean per-example loss.
fn accumulate_batch(
    params: &mut ModelParams,
    dataset: &[ChunkedDocument],
    batch: &[usize],
    archive: Option<&VectorArchive>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    let scale = 1.0 / batch.len() as f64;
    if cfg.workers <= 1 {
        let mut loss_sum = 0.0;
        for (slot, &doc_idx) in batch.iter().enumerate() {
            let (loss, grads) = example_pass(params, &dataset[doc_idx], archive, cfg, step, slot)?;
            loss_sum += loss;
            add_grads(&mut params.set, &grads, scale);
        }
        return Ok(loss_sum * scale);
    }

    let results: Vec<Result<Vec<(f64, Vec<Vec<f64>>)>>> = std::thread::scope(|scope| {
        let shards: Vec<Vec<(usize, usize)>> = (0..cfg.workers)
            .map(|w| {
                batch
                    .iter()
                    .enumerate()
                    .filter(|(slot, _)| slot % cfg.workers == w)
                    .map(|(slot, &doc_idx)| (slot, doc_idx))
                    .collect()
            })
            .collect();
        let params_ref = &*params;
        shards
            .into_iter()
            .map(|shard| {
                scope.spawn(move || {
                    shard
                        .into_iter()
                        .map(|(slot, doc_idx)| {
                            example_pass(params_ref, &dataset[doc_idx], archive, cfg, step, slot)
                        })
                        .collect()
                })
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });

    let mut loss_sum = 0.0;
    for worker_result in results {
        for (loss, grads) in worker_result? {
            loss_sum += loss;
            add_grads(&mut params.set, &grads, scale);
        }
    }
    Ok(loss_sum * scale)
}

/// One example's loss and per-parameter gradients (in set order).
fn example_pass(
    params: &ModelParams,
    doc: &ChunkedDocument,
    archive: Option<&VectorArchive>,
    cfg: &TrainConfig,
    step: usize,
    batch_slot: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let bound = params.set.bind(&tape)?;
    let mut dropout_rng = example_rng(cfg.seed, step, batch_slot);
    let dropout = (cfg.dropout_p > 0.0).then_some((cfg.dropout_p, &mut dropout_rng));
    let enc = match archive {
        Some(a) => ChunkEncoder::External(a),
        None => ChunkEncoder::Trainable { mixing: params.config.mixing },
    };
    let pass = forward(&tape, &bound, &params.config, &enc, doc, dropout, false)?;
    let loss = bce_loss(&pass.y_hat, &doc.labels, params.config.clip_eps)?;
    let loss_value = loss.scalar_value();
    loss.backward()?;

    let grads = params
        .set
        .iter()
        .map(|p| {
            if p.frozen {
                Vec::new()
            } else {
                bound
                    .get(&p.name)
                    .ok()
                    .and_then(|t| t.grad())
                    .unwrap_or_else(|| vec![0.0; p.len()])
            }
        })
        .collect();
    Ok((loss_value, grads))
}

fn add_grads(set: &mut ParamSet, grads: &[Vec<f64>], scale: f64) {
    for (p, g) in set.iter_mut().zip(grads) {
        if p.frozen || g.is_empty() {
            continue;
        }
        for (acc, &gi) in p.grad.iter_mut().zip(g) {
            *acc += scale * gi;
        }
    }
}

fn example_rng(seed: u64, step: usize, batch_slot: usize) -> ChaCha8Rng {
    let key = seed ^ (step as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ (batch_slot as u64).wrapping_mul(0x517cc1b727220a95);
    ChaCha8Rng::seed_from_u64(key)
}

fn validation_micro_f1(params: &ModelParams, docs: &[ChunkedDocument], archive: Option<&VectorArchive>) -> Result<f64> {
    let scores = score_documents(params, docs, archive)?;
    Ok(prf1(&scores, params.config.threshold).micro.f1)
}

/// Inference probabilities over a document list (no dropout, no recording).
pub fn score_documents(
    params: &ModelParams,
    docs: &[ChunkedDocument],
    archive: Option<&VectorArchive>,
) -> Result<ScoreMatrix> {
    let mut probs = Vec::with_capacity(docs.len());
    let mut gold = Vec::with_capacity(docs.len());
    for doc in docs {
        let tape = Tape::new();
        let bound = params.set.bind(&tape)?;
        let enc = match archive {
            Some(a) => ChunkEncoder::External(a),
            None => ChunkEncoder::Trainable { mixing: params.config.mixing },
        };
        let pass = forward(&tape, &bound, &params.config, &enc, doc, None, false)?;
        probs.push(pass.prediction.probs);
        gold.push(doc.labels.clone());
    }
    Ok(ScoreMatrix::new(probs, gold).expect("aligned by construction"))
}

// ── Checkpoint glue ─────────────────────────────────────────────────────

pub fn save_checkpoint(params: &ModelParams, path: &std::path::Path) -> Result<()> {
    params.to_checkpoint().write(path)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path, base: &ModelConfig) -> Result<ModelParams> {
    let ck = Checkpoint::read(path)?;
    Ok(ModelParams::from_checkpoint(&ck, base)?)
}

// ── Gradient checking ───────────────────────────────────────────────────

pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: (String, usize),
}

/// Compare analytic gradients of the full forward+loss against central
/// finite differences on `coords` sampled coordinates. Sampling is
/// stratified so every non-frozen tensor contributes. `corrupt_tanh`
/// deliberately breaks the tanh backward rule to prove the harness detects
/// a wrong derivative.
pub fn grad_check(
    params: &ModelParams,
    doc: &ChunkedDocument,
    eps: f64,
    coords: usize,
    seed: u64,
    corrupt_tanh: bool,
) -> Result<GradCheckReport> {
    let loss_with = |set: &ParamSet| -> Result<f64> {
        let tape = Tape::new();
        let bound = set.bind(&tape)?;
        let enc = ChunkEncoder::Trainable { mixing: params.config.mixing };
        let pass = forward(&tape, &bound, &params.config, &enc, doc, None, false)?;
        Ok(bce_loss(&pass.y_hat, &doc.labels, params.config.clip_eps)?.scalar_value())
    };

    // Analytic gradients.
    let tape = Tape::new();
    tape.set_corrupt_tanh(corrupt_tanh);
    let bound = params.set.bind(&tape)?;
    let enc = ChunkEncoder::Trainable { mixing: params.config.mixing };
    let pass = forward(&tape, &bound, &params.config, &enc, doc, None, false)?;
    let loss = bce_loss(&pass.y_hat, &doc.labels, params.config.clip_eps)?;
    loss.backward()?;
    let analytic: Vec<(String, Vec<f64>)> = params
        .set
        .iter()
        .filter(|p| !p.frozen)
        .map(|p| {
            let g = bound
                .get(&p.name)
                .ok()
                .and_then(|t| t.grad())
                .unwrap_or_else(|| vec![0.0; p.len()]);
            (p.name.clone(), g)
        })
        .collect();

    // Stratified coordinate sample.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let live: Vec<(&str, usize)> = params
        .set
        .iter()
        .filter(|p| !p.frozen)
        .map(|p| (p.name.as_str(), p.len()))
        .collect();
    let total: usize = live.iter().map(|(_, n)| n).sum();
    let mut sample: Vec<(String, usize)> = Vec::with_capacity(coords);
    for &(name, n) in &live {
        let share = ((coords * n) / total).max(1).min(n);
        for _ in 0..share {
            sample.push((name.to_string(), rng.gen_range(0..n)));
        }
    }
    while sample.len() < coords {
        let &(name, n) = &live[rng.gen_range(0..live.len())];
        sample.push((name.to_string(), rng.gen_range(0..n)));
    }

    let mut worst = (0.0f64, (String::new(), 0usize));
    let mut working = params.set.clone();
    for (name, j) in &sample {
        let orig = working.get(name).unwrap().values[*j];
        working.get_mut(name).unwrap().values[*j] = orig + eps;
        let plus = loss_with(&working)?;
        working.get_mut(name).unwrap().values[*j] = orig - eps;
        let minus = loss_with(&working)?;
        working.get_mut(name).unwrap().values[*j] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.iter().find(|(n, _)| n == name).map(|(_, g)| g[*j]).unwrap_or(0.0);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > worst.0 {
            worst = (rel, (name.clone(), *j));
        }
    }
    Ok(GradCheckReport { max_rel_err: worst.0, coords_checked: sample.len(), worst: worst.1 })
}
