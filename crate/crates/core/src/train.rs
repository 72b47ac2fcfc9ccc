//! Supervised training: class-weighted cross-entropy over anticipation
//! targets, AdamW with decoupled weight decay, cosine learning-rate schedule,
//! seeded batching, and per-epoch metric reporting.
//!
//! Determinism: every source of randomness derives from `TrainConfig::seed`.
//! Epoch `e` uses its own RNG stream for batch shuffling and dropout, so a
//! run resumed from an epoch-boundary checkpoint reproduces the uninterrupted
//! run bit-exactly.

use crate::data::{class_frequencies, inverted_weights, TrainEpisode};
use crate::error::{AgaError, Result};
use crate::metrics::{accuracy, mean_top_k_recall, EvalRecord};
use crate::model::{AgaModel, RunOptions, StepNodes, StepOutput};
use crate::tensor::{NodeId, Tensor};
use crate::layers::Session;
use crate::scalar::fc;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub seed: u64,
    pub dropout: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Supervise only the last targeted timestep of each episode instead of
    /// every targeted timestep.
    pub supervise_final_only: bool,
    /// Classes excluded from supervision (weight forced to zero), e.g. a
    /// background class.
    pub zero_weight_classes: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr_peak: 2e-4,
            lr_min: 0.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            seed: 0,
            dropout: 0.1,
            grad_clip: 5.0,
            supervise_final_only: false,
            zero_weight_classes: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(AgaError::invalid("train config", "epochs and batch_size must be positive"));
        }
        if self.lr_peak <= 0.0 && self.epochs > 0 && self.lr_peak < 0.0 {
            return Err(AgaError::invalid("lr_peak", "must be nonnegative"));
        }
        if self.lr_min < 0.0 || self.lr_min > self.lr_peak.max(0.0) {
            return Err(AgaError::invalid("lr_min", "must lie in [0, lr_peak]"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(AgaError::invalid("betas", "must lie in [0, 1)"));
        }
        if self.eps_adam <= 0.0 {
            return Err(AgaError::invalid("eps_adam", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(AgaError::invalid("dropout", "must lie in [0, 1)"));
        }
        if self.grad_clip <= 0.0 {
            return Err(AgaError::invalid("grad_clip", "must be positive"));
        }
        Ok(())
    }
}

/// First/second moment buffers and the step counter, parallel to the model's
/// parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &AgaModel<f64>) -> Self {
        let m = model
            .params()
            .iter()
            .map(|p| vec![0.0; p.tensor.numel()])
            .collect::<Vec<_>>();
        OptimizerState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// Cosine schedule from `lr_peak` down to `lr_min`; steps beyond
/// `total_steps` clamp to `lr_min`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_peak: f64, lr_min: f64) -> f64 {
    if step >= total_steps {
        return lr_min;
    }
    let frac = step as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_peak - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Bias-corrected Adam update with decoupled weight decay:
/// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`.
pub fn adamw_step(
    model: &mut AgaModel<f64>,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (pi, param) in model.params_mut().into_iter().enumerate() {
        let g = &grads[pi];
        let m = &mut state.m[pi];
        let v = &mut state.v[pi];
        for (j, p) in param.tensor.data.iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + cfg.eps_adam) + cfg.weight_decay * *p);
        }
    }
}

/// Supervised timesteps of an episode: every targeted step, or only the last
/// one. Steps whose target class carries zero weight are excluded.
fn supervised_steps(targets: &[Option<usize>], weights: &[f64], final_only: bool) -> Vec<(usize, usize)> {
    let mut steps: Vec<(usize, usize)> = targets
        .iter()
        .enumerate()
        .filter_map(|(t, tgt)| tgt.map(|c| (t, c)))
        .filter(|&(_, c)| c < weights.len() && weights[c] > 0.0)
        .collect();
    if final_only && steps.len() > 1 {
        steps = vec![*steps.last().unwrap()];
    }
    steps
}

/// Mean class-weighted cross-entropy over the supervised timesteps, computed
/// from prediction distributions. Returns a scalar tensor.
pub fn sequence_loss(
    outputs: &[StepOutput<f64>],
    targets: &[Option<usize>],
    class_weights: &[f64],
) -> Result<Tensor<f64>> {
    if outputs.len() != targets.len() {
        return Err(AgaError::shape("sequence_loss", &[outputs.len()], &[targets.len()]));
    }
    let steps = supervised_steps(targets, class_weights, false);
    if steps.is_empty() {
        return Err(AgaError::NoSupervision);
    }
    let mut sum = 0.0;
    for &(t, c) in &steps {
        let p = outputs[t].prediction[c].max(f64::MIN_POSITIVE);
        sum += class_weights[c] * -p.ln();
    }
    Ok(Tensor::scalar(sum / steps.len() as f64))
}

/// Graph-level loss over one episode's step nodes.
pub fn sequence_loss_nodes(
    sess: &mut Session<f64>,
    steps: &[StepNodes],
    targets: &[Option<usize>],
    class_weights: &[f64],
    final_only: bool,
) -> Result<NodeId> {
    let picked = supervised_steps(targets, class_weights, final_only);
    if picked.is_empty() {
        return Err(AgaError::NoSupervision);
    }
    let terms: Vec<NodeId> = picked
        .iter()
        .map(|&(t, c)| {
            sess.graph
                .cross_entropy(steps[t].logits, c, fc(class_weights[c]))
        })
        .collect::<Result<_>>()?;
    let total = sess.graph.sum_n(&terms)?;
    Ok(sess.graph.scale(total, 1.0 / picked.len() as f64))
}

/// Per-epoch metric summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricSummary {
    pub top1_acc: f64,
    pub top5_acc: f64,
    pub mt5r: f64,
}

pub fn summarize(records: &[EvalRecord]) -> MetricSummary {
    MetricSummary {
        top1_acc: accuracy(records, 1),
        top5_acc: accuracy(records, 5),
        mt5r: mean_top_k_recall(records, 5),
    }
}

/// Run inference over episodes and pair each targeted timestep's prediction
/// with its target.
pub fn collect_records(
    model: &AgaModel<f64>,
    episodes: &[TrainEpisode],
    final_only: bool,
) -> Result<Vec<EvalRecord>> {
    collect_records_opts(model, episodes, final_only, &RunOptions::default(), &mut |_| {})
}

/// As [`collect_records`], with run options and a per-episode observer over
/// the raw step outputs.
pub fn collect_records_opts(
    model: &AgaModel<f64>,
    episodes: &[TrainEpisode],
    final_only: bool,
    opts: &RunOptions,
    observe: &mut dyn FnMut(&[StepOutput<f64>]),
) -> Result<Vec<EvalRecord>> {
    let mut records = Vec::new();
    for ep in episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let outs = model.forward_sequence_opts(&ep.features, Some(&ep.labels), false, &mut rng, opts)?;
        observe(&outs);
        let targeted: Vec<(usize, usize)> = ep
            .targets
            .iter()
            .enumerate()
            .filter_map(|(t, tgt)| tgt.map(|c| (t, c)))
            .collect();
        let chosen: Vec<(usize, usize)> = if final_only {
            targeted.last().copied().into_iter().collect()
        } else {
            targeted
        };
        for (t, c) in chosen {
            records.push(EvalRecord::new(outs[t].prediction.clone(), c));
        }
    }
    if records.is_empty() {
        return Err(AgaError::NoSupervision);
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub metrics: MetricSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub class_weights: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.epochs.first().map(|e| e.mean_loss).unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map(|e| e.mean_loss).unwrap_or(f64::NAN)
    }
}

/// Called after every epoch with the record, the model, and the optimizer
/// state (for checkpointing).
pub type EpochCallback<'a> =
    &'a mut dyn FnMut(&EpochRecord, &AgaModel<f64>, &OptimizerState) -> Result<()>;

/// Train from scratch.
pub fn train(
    model: &mut AgaModel<f64>,
    data: &[TrainEpisode],
    eval_data: Option<&[TrainEpisode]>,
    cfg: &TrainConfig,
    on_epoch: EpochCallback,
) -> Result<TrainReport> {
    let mut opt = OptimizerState::new(model);
    train_resume(model, &mut opt, 0, data, eval_data, cfg, on_epoch)
}

/// Continue training from `start_epoch` with an existing optimizer state.
/// With per-epoch RNG streams this reproduces an uninterrupted run exactly.
pub fn train_resume(
    model: &mut AgaModel<f64>,
    opt: &mut OptimizerState,
    start_epoch: usize,
    data: &[TrainEpisode],
    eval_data: Option<&[TrainEpisode]>,
    cfg: &TrainConfig,
    on_epoch: EpochCallback,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(AgaError::EmptyInput);
    }
    let n_c = model.cfg.n_c;
    let counts = class_frequencies(data, n_c);
    let mut weights = inverted_weights(&counts);
    for &c in &cfg.zero_weight_classes {
        if c < weights.len() {
            weights[c] = 0.0;
        }
    }
    let usable: Vec<usize> = (0..data.len())
        .filter(|&i| !supervised_steps(&data[i].targets, &weights, cfg.supervise_final_only).is_empty())
        .collect();
    if usable.is_empty() {
        return Err(AgaError::NoSupervision);
    }

    let batches_per_epoch = usable.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch) as u64;
    let n_params = model.param_count();
    let param_sizes: Vec<usize> = model.params().iter().map(|p| p.tensor.numel()).collect();

    let mut report = TrainReport {
        epochs: Vec::new(),
        class_weights: weights.clone(),
    };

    for epoch in start_epoch..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1_000 + epoch as u64);
        let mut order = usable.clone();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_examples = 0usize;
        let mut last_lr = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads: Vec<Vec<f64>> = param_sizes.iter().map(|&n| vec![0.0; n]).collect();
            let mut batch_loss = 0.0;
            for &ei in batch {
                let ep = &data[ei];
                let mut sess = model.new_session(true, true, rng.clone());
                let steps = model.run_episode(&mut sess, &ep.features, Some(&ep.labels), &RunOptions::default())?;
                let loss = sequence_loss_nodes(&mut sess, &steps, &ep.targets, &weights, cfg.supervise_final_only)?;
                let loss_value = sess.graph.data(loss)[0];
                batch_loss += loss_value;
                sess.graph.backward(loss)?;
                let params = model.params();
                for (pi, p) in params.iter().enumerate() {
                    if let Some(node) = sess.bound(p) {
                        if let Some(g) = sess.graph.grad(node) {
                            for (acc, &gv) in grads[pi].iter_mut().zip(g) {
                                *acc += gv;
                            }
                        }
                    }
                }
                rng = sess.rng;
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            let mean_batch_loss = batch_loss * scale;
            if !mean_batch_loss.is_finite() {
                return Err(AgaError::Diverged {
                    epoch,
                    step: batch_idx,
                    loss: mean_batch_loss,
                });
            }
            epoch_loss += batch_loss;
            epoch_examples += batch.len();

            clip_global_norm(&mut grads, cfg.grad_clip);
            let lr = cosine_lr(opt.step, total_steps, cfg.lr_peak, cfg.lr_min);
            last_lr = lr;
            adamw_step(model, &grads, opt, lr, cfg);
            if model.params().iter().any(|p| !p.tensor.is_finite()) {
                return Err(AgaError::Diverged {
                    epoch,
                    step: batch_idx,
                    loss: f64::NAN,
                });
            }
        }
        let _ = n_params;

        let eval_set = eval_data.unwrap_or(data);
        let records = collect_records(model, eval_set, false)?;
        let record = EpochRecord {
            epoch,
            mean_loss: epoch_loss / epoch_examples as f64,
            lr: last_lr,
            metrics: summarize(&records),
        };
        on_epoch(&record, model, opt)?;
        report.epochs.push(record);
    }
    Ok(report)
}

fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) {
    let sq: f64 = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
}
