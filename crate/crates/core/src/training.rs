//! Full-batch AdamW training with periodic evaluation and grok detection.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::checkpoint::{self, CheckpointError};
use crate::model::{build_forward, init_params, ModelConfig, ModelError, ParamVars, Params, Positions};
use crate::tasks::{Split, TaskDataset};
use crate::tensor::{Scalar, Tensor, TensorError};

pub const METRICS_HEADER: &str = "epoch,train_loss,test_loss,train_acc,test_acc,res_norm,max_logit";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("dataset vocab {dataset} does not match model vocab {model}")]
    Vocab { dataset: usize, model: usize },
    #[error("non-finite gradient for {0}")]
    NonFiniteGrad(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("metrics I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: u64,
    pub eval_every: u64,
    pub grok_threshold: f64,
    /// Recorded for provenance; full-batch training draws no random numbers.
    pub train_seed: u64,
    /// Stop after the first evaluation whose test accuracy reaches this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halt_at_test_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 15_000,
            eval_every: 100,
            grok_threshold: 0.99,
            train_seed: 0,
            halt_at_test_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be ≥ 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be ≥ 0, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be ≥ 1".into());
        }
        if !(self.grok_threshold > 0.0 && self.grok_threshold <= 1.0) {
            return fail(format!("grok_threshold must lie in (0, 1], got {}", self.grok_threshold));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay applied to every tensor:
/// `θ ← θ − lr·(m̂ / (√v̂ + eps) + λ·θ)`.
pub struct AdamW<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(shapes: &[usize]) -> Self {
        AdamW {
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn for_params(params: &Params<T>) -> Self {
        let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
        AdamW::new(&sizes)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update; `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], cfg: &TrainConfig) -> Result<(), TrainError> {
        assert_eq!(params.len(), self.m.len(), "parameter count");
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        for (i, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGrad(format!("tensor #{i}")));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
        let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
        let lr = T::from_f64(cfg.learning_rate);
        let wd = T::from_f64(cfg.weight_decay);
        let eps = T::from_f64(cfg.adam_eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.numel() != g.numel() {
                return Err(TrainError::Config(format!("gradient #{i} shape mismatch")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi * inv_bc1;
                let v_hat = *vi * inv_bc2;
                *theta = *theta - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *theta);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub loss: f64,
    pub accuracy: f64,
    /// Mean L2 norm of the residual stream leaving the block at the final position.
    pub res_norm: f64,
    pub max_logit: f64,
    pub count: usize,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Loss and accuracy of logits `[n × classes]` against labels.
pub fn score_logits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (f64, f64) {
    let c = logits.last_dim();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (r, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.data()[r * c..(r + 1) * c].iter().map(|v| v.as_f64()).collect();
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += lse - row[y];
        if argmax(&row) == y {
            correct += 1;
        }
    }
    let n = labels.len() as f64;
    (loss / n, correct as f64 / n)
}

fn stats_from_graph<T: Scalar>(logits: &Tensor<T>, stream_out: &Tensor<T>, labels: &[usize]) -> EvalStats {
    let (loss, accuracy) = score_logits(logits, labels);
    let res_norm = (0..stream_out.rows())
        .map(|r| stream_out.row(r).iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
        .sum::<f64>()
        / stream_out.rows() as f64;
    EvalStats {
        loss,
        accuracy,
        res_norm,
        max_logit: logits.max_abs().as_f64(),
        count: labels.len(),
    }
}

/// Loss, accuracy, residual norm and logit bound over one split.
pub fn evaluate<T: Scalar>(params: &Params<T>, config: &ModelConfig, dataset: &TaskDataset, split: Split) -> Result<EvalStats, TrainError> {
    let idx = dataset.indices(split);
    if idx.is_empty() {
        return Err(TrainError::EmptySplit(split.name()));
    }
    let (tokens, labels) = dataset.batch(idx);
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false)?;
    let g = build_forward(&mut tape, &vars, config, &tokens, Positions::Last)?;
    Ok(stats_from_graph(tape.value(g.logits), tape.value(g.stream_out), &labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: u64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub res_norm: f64,
    pub max_logit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: Vec<MetricRow>,
    pub grok_epoch: Option<u64>,
    pub peak_test_acc: f64,
    pub diverged: bool,
    pub wall_time_seconds: f64,
}

impl RunRecord {
    pub fn write_metrics_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{METRICS_HEADER}")?;
        for m in &self.metrics {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                m.epoch, m.train_loss, m.test_loss, m.train_acc, m.test_acc, m.res_norm, m.max_logit
            )?;
        }
        Ok(())
    }

    pub fn final_metrics(&self) -> Option<&MetricRow> {
        self.metrics.last()
    }
}

/// First recorded epoch whose test accuracy reaches `threshold`.
pub fn detect_grok(series: &[(u64, f64)], threshold: f64) -> Option<u64> {
    series.iter().find(|(_, acc)| *acc >= threshold).map(|(e, _)| *e)
}

pub struct TrainOutcome<T> {
    pub record: RunRecord,
    pub params: Params<T>,
}

pub const FINAL_CHECKPOINT: &str = "checkpoint_final.bin";
pub const GROK_CHECKPOINT: &str = "checkpoint_grok.bin";

/// Trains from a fresh seeded init. One AdamW step per epoch over the whole
/// training split; evaluation at epoch 0, every `eval_every` epochs and at
/// `max_epochs`. With `checkpoint_dir`, parameters are saved at the grok
/// epoch and at the end.
///
/// A non-finite loss, activation or gradient ends the run early with
/// `diverged = true` rather than returning an error.
pub fn train<T: Scalar>(
    model: &ModelConfig,
    dataset: &TaskDataset,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    model.validate()?;
    if dataset.vocab_size != model.vocab_size {
        return Err(TrainError::Vocab {
            dataset: dataset.vocab_size,
            model: model.vocab_size,
        });
    }
    for split in [Split::Train, Split::Test] {
        if dataset.indices(split).is_empty() {
            return Err(TrainError::EmptySplit(split.name()));
        }
    }
    let start = Instant::now();
    let mut params = init_params::<T>(model)?;
    let mut opt = AdamW::for_params(&params);
    let (train_tokens, train_labels) = dataset.batch(&dataset.train_idx);
    let mut metrics = Vec::new();
    let mut grok_epoch = None;
    let mut diverged = false;

    for epoch in 0..=cfg.max_epochs {
        let eval_now = epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs;
        let test = if eval_now {
            match divergence(evaluate(&params, model, dataset, Split::Test))? {
                Some(s) => Some(s),
                None => {
                    diverged = true;
                    break;
                }
            }
        } else {
            None
        };
        if let Some(t) = &test {
            if grok_epoch.is_none() && t.accuracy >= cfg.grok_threshold {
                grok_epoch = Some(epoch);
                if let Some(dir) = checkpoint_dir {
                    checkpoint::save(&dir.join(GROK_CHECKPOINT), &params)?;
                }
            }
        }
        // The step reports metrics of the parameters it started from.
        let train_stats = if epoch < cfg.max_epochs {
            divergence(train_step(&mut params, &mut opt, model, cfg, &train_tokens, &train_labels))?
        } else {
            divergence(evaluate(&params, model, dataset, Split::Train))?
        };
        let Some(train_stats) = train_stats else {
            diverged = true;
            break;
        };
        let Some(test) = test else { continue };
        let n = (train_stats.count + test.count) as f64;
        let row = MetricRow {
            epoch,
            train_loss: train_stats.loss,
            test_loss: test.loss,
            train_acc: train_stats.accuracy,
            test_acc: test.accuracy,
            res_norm: (train_stats.res_norm * train_stats.count as f64 + test.res_norm * test.count as f64) / n,
            max_logit: train_stats.max_logit.max(test.max_logit),
        };
        info!(
            "epoch {epoch}: train loss {:.4} acc {:.4} | test loss {:.4} acc {:.4}",
            row.train_loss, row.train_acc, row.test_loss, row.test_acc
        );
        let finite = row.train_loss.is_finite() && row.test_loss.is_finite();
        let halt = cfg.halt_at_test_acc.is_some_and(|h| row.test_acc >= h);
        metrics.push(row);
        if !finite {
            diverged = true;
            break;
        }
        if halt {
            break;
        }
    }
    if diverged {
        warn!("run diverged after {} optimizer steps", opt.steps());
    }
    if let Some(dir) = checkpoint_dir {
        if params.all_finite() {
            checkpoint::save(&dir.join(FINAL_CHECKPOINT), &params)?;
        }
    }
    let peak_test_acc = metrics.iter().map(|m| m.test_acc).fold(0.0, f64::max);
    Ok(TrainOutcome {
        record: RunRecord {
            model: model.clone(),
            train: cfg.clone(),
            metrics,
            grok_epoch,
            peak_test_acc,
            diverged,
            wall_time_seconds: start.elapsed().as_secs_f64(),
        },
        params,
    })
}

/// Maps numeric blow-ups to `Ok(None)`; every other error passes through.
fn divergence<S>(r: Result<S, TrainError>) -> Result<Option<S>, TrainError> {
    match r {
        Ok(s) => Ok(Some(s)),
        Err(TrainError::NonFiniteGrad(_)) | Err(TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Forward, backward and one AdamW update on the full training batch.
/// Returns the metrics of the parameters before the update.
pub fn train_step<T: Scalar>(
    params: &mut Params<T>,
    opt: &mut AdamW<T>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    tokens: &[usize],
    labels: &[usize],
) -> Result<EvalStats, TrainError> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, true)?;
    let g = build_forward(&mut tape, &vars, model, tokens, Positions::Last)?;
    let loss = tape.cross_entropy(g.logits, labels)?;
    let stats = stats_from_graph(tape.value(g.logits), tape.value(g.stream_out), labels);
    let mut grads = tape.backward(loss)?;
    let owned: Vec<Tensor<T>> = vars
        .0
        .iter()
        .zip(params.named())
        .map(|(v, (_, p))| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    let refs: Vec<&Tensor<T>> = owned.iter().collect();
    opt.step(&mut params.tensors_mut(), &refs, cfg)?;
    Ok(stats)
}
