//! Optimization loop: AdamW with decoupled weight decay, linear warmup to a
//! constant learning rate, global-norm gradient clipping, early stopping on
//! validation accuracy, and the ablation runner.
//!
//! Training is externally single-threaded and fully determined by the seed:
//! shuffles, dropout masks and stochastic-depth gates all derive from it.

use crate::metrics::{self, MetricsReport};
use crate::model::{Model, ModelConfig};
use crate::rng::{mix2, SplitMix64};
use crate::signal::{make_batch, DatasetSplit, Window};
use crate::tensor::kernels;
use crate::tensor::{Graph, GraphCtx, Scalar, Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: first non-finite tensor from {tensor}")]
    Diverged { tensor: String, step: u64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("data error: {0}")]
    Data(String),
}

/// Optimization hyperparameters. Defaults are the reference recipe: lr 4e-5,
/// weight decay 1e-4, batch 64, 30 epochs with a 5-epoch linear warmup,
/// clipping at 1.0, early stopping with patience 5 and min-delta 0.01.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub clip_norm: f64,
    pub early_stop_patience: usize,
    /// Absolute accuracy fraction required to count as an improvement.
    pub early_stop_min_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 4e-5,
            weight_decay: 1e-4,
            batch: 64,
            epochs: 30,
            warmup_epochs: 5,
            clip_norm: 1.0,
            early_stop_patience: 5,
            early_stop_min_delta: 0.01,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr < 0.0 || self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return Err(TrainError::Data("lr/weight_decay/clip_norm out of range".into()));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(TrainError::Data("batch and epochs must be positive".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(TrainError::Data(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

/// Linear warmup to the base rate, constant afterwards. `step` is 1-based;
/// at `step == warmup_steps` the rate is exactly `base`.
pub fn lr_at(base: f64, step: u64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        base
    } else {
        base * step as f64 / warmup_steps as f64
    }
}

/// Scale all gradients so their joint L2 norm is at most `clip`. Returns the
/// pre-clip norm. Gradients at or under the threshold are untouched.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], clip: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > clip {
        let scale = S::from_f64(clip / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = v.mul(scale);
            }
        }
    }
    norm
}

/// AdamW with decoupled weight decay (decay multiplied by the learning
/// rate), bias-corrected moments, beta = (0.9, 0.999), eps = 1e-8.
/// Moment state is kept in f64 regardless of the parameter precision.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(param_sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Open step `t + 1`; call once before the per-parameter updates.
    pub fn advance(&mut self) {
        self.t += 1;
    }

    /// Update one parameter (registry position `idx`) of the current step.
    pub fn update_param<S: Scalar>(
        &mut self,
        idx: usize,
        param: &mut Tensor<S>,
        grad: &Tensor<S>,
        lr: f64,
        weight_decay: f64,
    ) {
        debug_assert!(self.t >= 1, "advance() must precede updates");
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
        for (i, slot) in param.data_mut().iter_mut().enumerate() {
            let g = grad.data()[i].to_f64();
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let theta = slot.to_f64();
            let update = lr * mhat / (vhat.sqrt() + self.eps) + lr * weight_decay * theta;
            *slot = S::from_f64(theta - update);
        }
    }
}

/// One history row; the CSV schema is `epoch,split,loss,acc,f1,auroc`.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub auroc: Option<f64>,
}

pub fn history_to_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,split,loss,acc,f1,auroc\n");
    for row in history {
        let auroc = row.auroc.map_or("NA".into(), |v| format!("{v}"));
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.epoch, row.split, row.loss, row.accuracy, row.macro_f1, auroc
        ));
    }
    out
}

/// Output of a training run: the best-validation-epoch parameters, the
/// full per-epoch history and bookkeeping about how the run ended.
pub struct TrainOutcome<S> {
    pub model: Model<S>,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
}

/// Mean cross-entropy and metrics of a window subset in eval mode.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    windows: &[Window],
    indices: &[usize],
    batch_size: usize,
) -> Result<(f64, MetricsReport), TrainError> {
    let k = model.config.num_classes;
    let mut scores = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    let mut loss_sum = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = make_batch::<S>(windows, chunk);
        let logits = model.predict_logits(&batch.data)?;
        let mut probs = vec![S::ZERO; logits.numel()];
        kernels::softmax_rows(logits.data(), k, &mut probs);
        for (row, &label) in probs.chunks(k).zip(&batch.labels) {
            loss_sum -= row[label].to_f64().ln();
            scores.push(row.iter().map(|v| v.to_f64()).collect::<Vec<f64>>());
            labels.push(label);
        }
    }
    let loss = if labels.is_empty() { 0.0 } else { loss_sum / labels.len() as f64 };
    Ok((loss, metrics::evaluate_scores(&scores, &labels, k)))
}

/// Full training loop. Returns the parameters of the best validation epoch
/// (bit-exact snapshot) along with the history.
pub fn train<S: Scalar>(
    mut model: Model<S>,
    windows: &[Window],
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>, TrainError> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(TrainError::Data("training split is empty".into()));
    }
    let k = model.config.num_classes;
    let steps_per_epoch = split.train.len().div_ceil(cfg.batch) as u64;
    let warmup_steps = cfg.warmup_epochs as u64 * steps_per_epoch;

    let mut sizes = Vec::new();
    model.visit_params(&mut |_, t| sizes.push(t.numel()));
    let mut opt = AdamW::new(&sizes);

    let mut history = Vec::new();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Option<Model<S>> = None;
    let mut since_improvement = 0usize;
    let mut stopped_early = false;
    let mut global_step = 0u64;

    for epoch in 1..=cfg.epochs {
        let mut order = split.train.to_vec();
        let mut shuffle_rng = SplitMix64::new(mix2(mix2(cfg.seed, 0xE0), epoch as u64));
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut train_scores: Vec<Vec<f64>> = Vec::with_capacity(order.len());
        let mut train_labels: Vec<usize> = Vec::with_capacity(order.len());

        for chunk in order.chunks(cfg.batch) {
            let batch = make_batch::<S>(windows, chunk);
            let mut g = Graph::new(GraphCtx::train(cfg.seed, global_step));
            let (vars, named) = model.leaves(&mut g, true);
            let x = g.constant(batch.data);
            let (loss, logits) = model.loss(&mut g, &vars, x, &batch.labels).map_err(
                |e| match e {
                    TensorError::NonFinite { op, .. } => {
                        TrainError::Diverged { tensor: op.to_string(), step: global_step }
                    }
                    other => TrainError::Tensor(other),
                },
            )?;
            g.backward(loss)?;

            // Training-pass predictions feed the train-split history row.
            for (row, &label) in g.value(logits).data().chunks(k).zip(&batch.labels) {
                train_scores.push(row.iter().map(|v| v.to_f64()).collect());
                train_labels.push(label);
            }
            loss_sum += g.value(loss).item().to_f64() * chunk.len() as f64;
            seen += chunk.len();

            let mut grads: Vec<Tensor<S>> = named
                .iter()
                .map(|(name, var)| {
                    g.grad(*var).unwrap_or_else(|| panic!("no gradient for {name}"))
                })
                .collect();
            clip_global_norm(&mut grads, cfg.clip_norm);

            global_step += 1;
            let lr = lr_at(cfg.lr, global_step, warmup_steps);
            opt.advance();
            let mut idx = 0;
            // visit order matches the gradient (registry) order.
            model.visit_params_mut(&mut |_, t| {
                opt.update_param(idx, t, &grads[idx], lr, cfg.weight_decay);
                idx += 1;
            });
        }

        let train_report = metrics::evaluate_scores(&train_scores, &train_labels, k);
        history.push(EpochStats {
            epoch,
            split: "train".into(),
            loss: loss_sum / seen.max(1) as f64,
            accuracy: train_report.accuracy,
            macro_f1: train_report.macro_f1,
            auroc: train_report.auroc,
        });

        // Monitor validation accuracy; fall back to the training split when
        // no validation windows exist (degenerate desk-scale datasets).
        let monitor = if split.val.is_empty() { &split.train } else { &split.val };
        let (val_loss, val_report) = evaluate(&model, windows, monitor, cfg.batch)?;
        history.push(EpochStats {
            epoch,
            split: "val".into(),
            loss: val_loss,
            accuracy: val_report.accuracy,
            macro_f1: val_report.macro_f1,
            auroc: val_report.auroc,
        });

        if val_report.accuracy > best_acc + cfg.early_stop_min_delta {
            best_acc = val_report.accuracy;
            best_epoch = epoch;
            best_params = Some(model.clone());
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }

    let model = best_params.unwrap_or(model);
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_accuracy: best_acc,
        stopped_early,
    })
}

/// The three ablation variants, trained under identical seed and recipe,
/// evaluated on the test split.
pub fn ablation_run<S: Scalar>(
    base: &ModelConfig,
    cfg: &TrainConfig,
    windows: &[Window],
    split: &DatasetSplit,
) -> Result<Vec<(String, MetricsReport)>, TrainError> {
    let variants = [
        ("full", true, true),
        ("-waveletconv", false, true),
        ("-rope", true, false),
    ];
    let eval_on = if split.test.is_empty() { &split.val } else { &split.test };
    let mut out = Vec::new();
    for (name, use_wavelet, use_rope) in variants {
        let config = ModelConfig {
            use_waveletconv: use_wavelet,
            use_rope,
            ..base.clone()
        };
        let (model, _) = Model::<S>::init(config, cfg.seed)?;
        let outcome = train(model, windows, split, cfg)?;
        let (_, report) = evaluate(&outcome.model, windows, eval_on, cfg.batch)?;
        out.push((name.to_string(), report));
    }
    Ok(out)
}
