//! Post-training analyses.
//!
//! - Forward analysis probes a trained model with one-hot action queries and
//!   candidate keys and reads the head-averaged attention weights.
//! - Backward analysis holds the model and frames fixed and runs plain
//!   gradient descent on the stored past-prediction sequence to make a
//!   counterfactual target action probable, reporting the loss trace and the
//!   per-entry changes.
//! - Gate traces record the mean gate value per timestep.
//! - The robustness sweep resets growing random subsets of stored guides to
//!   the uniform distribution and tracks the metric.
//! - The guidance comparison trains fresh models per (train, inference)
//!   guidance pair and tabulates their metrics.

use crate::data::TrainEpisode;
use crate::error::{AgaError, Result};
use crate::metrics::mean_top_k_recall;
use crate::model::{argmax_lowest, AgaModel, AgaState, GraphState, GuidanceMode, RunOptions};
use crate::tensor::Tensor;
use crate::train::{collect_records, collect_records_opts, summarize, train, MetricSummary, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::VecDeque;

// ── Forward analysis ────────────────────────────────────────────────────

/// A hypothetical context: query actions (single, or EMA-combined in order)
/// and a list of candidate past actions to weigh.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForwardProbe {
    pub query_actions: Vec<usize>,
    pub candidate_actions: Vec<usize>,
}

impl ForwardProbe {
    pub fn validate(&self, n_c: usize) -> Result<()> {
        if self.query_actions.is_empty() || self.candidate_actions.is_empty() {
            return Err(AgaError::invalid("probe", "query and candidate lists must be nonempty"));
        }
        for &a in self.query_actions.iter().chain(&self.candidate_actions) {
            if a >= n_c {
                return Err(AgaError::IndexOutOfRange { index: a, n_classes: n_c });
            }
        }
        Ok(())
    }
}

fn one_hot64(n: usize, idx: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[idx] = 1.0;
    v
}

/// Head-averaged attention weights the model assigns to each candidate
/// action under the probe's query. A single query action probes with its raw
/// one-hot; multiple query actions are EMA-combined in order, starting from
/// the zero vector, using the model's smoothing factor.
pub fn forward_analysis(model: &AgaModel<f64>, probe: &ForwardProbe) -> Result<Vec<f64>> {
    let n_c = model.cfg.n_c;
    probe.validate(n_c)?;
    let query = if probe.query_actions.len() == 1 {
        one_hot64(n_c, probe.query_actions[0])
    } else {
        let mut ema = vec![0.0; n_c];
        for &a in &probe.query_actions {
            let oh = one_hot64(n_c, a);
            ema = crate::model::ema_update(&ema, &oh, model.cfg.alpha)?;
        }
        ema
    };

    let mut sess = model.new_session(false, false, ChaCha8Rng::seed_from_u64(0));
    let q_in = {
        let t = Tensor::matrix(1, n_c, query);
        sess.graph.constant(t)
    };
    let k_in = {
        let mut data = Vec::with_capacity(probe.candidate_actions.len() * n_c);
        for &c in &probe.candidate_actions {
            data.extend(one_hot64(n_c, c));
        }
        let t = Tensor::matrix(probe.candidate_actions.len(), n_c, data);
        sess.graph.constant(t)
    };
    let (qn, kn) = model.encode_attention_inputs(&mut sess, q_in, k_in)?;
    let heads = model.attn.attention_weights(&mut sess, qn, kn)?;

    let s = probe.candidate_actions.len();
    let mut avg = vec![0.0; s];
    for w in &heads {
        for (a, &v) in avg.iter_mut().zip(sess.graph.data(*w)) {
            *a += v;
        }
    }
    for a in avg.iter_mut() {
        *a /= heads.len() as f64;
    }
    Ok(avg)
}

// ── Backward analysis ───────────────────────────────────────────────────

/// Gradient-descent configuration for the counterfactual optimization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BackwardConfig {
    /// Step size.
    pub eta: f64,
    /// Plateau threshold on successive loss values.
    pub eps: f64,
    /// Maximum number of descent steps.
    pub max_iter: usize,
    /// Counterfactual target class.
    pub target: usize,
}

impl BackwardConfig {
    pub fn with_target(target: usize) -> Self {
        BackwardConfig {
            eta: 1e2,
            eps: 1e-6,
            max_iter: 5000,
            target,
        }
    }

    pub fn validate(&self, n_c: usize) -> Result<()> {
        if self.eta <= 0.0 {
            return Err(AgaError::invalid("eta", "must be positive"));
        }
        if self.eps <= 0.0 {
            return Err(AgaError::invalid("eps", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(AgaError::invalid("iter", "must be at least 1"));
        }
        if self.target >= n_c {
            return Err(AgaError::IndexOutOfRange {
                index: self.target,
                n_classes: n_c,
            });
        }
        Ok(())
    }
}

/// Why the descent stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Successive losses differed by less than the threshold.
    Plateau,
    /// The iteration budget ran out.
    MaxIter,
    /// The loss left the finite range; the trace holds values up to failure.
    NonFinite,
}

/// Everything the optimization needs from one analyzed timestep: the encoded
/// queue embeddings, the stored guides (the optimization variable), the EMA
/// base from before the queue window, and the current frame.
#[derive(Debug, Clone)]
pub struct BackwardInstance {
    pub queue_embeddings: Vec<Vec<f64>>,
    pub y0: Vec<Vec<f64>>,
    pub ema_base: Vec<f64>,
    pub current_embedding: Vec<f64>,
    pub t: usize,
    pub original_prediction: Vec<f64>,
}

impl BackwardInstance {
    /// Run inference over an episode and capture the state feeding the
    /// prediction at timestep `t` (which must have a nonempty queue).
    pub fn capture(model: &AgaModel<f64>, episode: &TrainEpisode, t: usize) -> Result<Self> {
        if t == 0 || t >= episode.features.len() {
            return Err(AgaError::invalid(
                "analysis timestep",
                format!("t = {t} must lie in [1, {})", episode.features.len()),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut state = AgaState::initial(&model.cfg);
        let mut ema_history = vec![state.ema_query.clone()];
        let mut states = vec![state.clone()];
        let mut predictions: Vec<Vec<f64>> = Vec::new();
        for tt in 0..=t {
            let e = model.encode_value(&episode.features[tt], false, &mut rng)?;
            let guide = episode.labels.get(tt).copied().flatten().map(|l| one_hot64(model.cfg.n_c, l));
            let (out, next) = model.step(&state, &e, guide.as_deref(), false, &mut rng)?;
            predictions.push(out.prediction.clone());
            state = next;
            ema_history.push(state.ema_query.clone());
            states.push(state.clone());
        }
        let at_t = &states[t];
        let s = at_t.queue.len();
        Ok(BackwardInstance {
            queue_embeddings: at_t.queue.iter().map(|(e, _)| e.clone()).collect(),
            y0: at_t.queue.iter().map(|(_, g)| g.clone()).collect(),
            ema_base: ema_history[t - s].clone(),
            current_embedding: {
                let mut r = ChaCha8Rng::seed_from_u64(0);
                model.encode_value(&episode.features[t], false, &mut r)?
            },
            t,
            original_prediction: predictions[t].clone(),
        })
    }
}

/// Result of the counterfactual descent.
#[derive(Debug, Clone, Serialize)]
pub struct BackwardAnalysis {
    pub y_star: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
    pub trace: Vec<f64>,
    pub stopped: StopReason,
    pub steps_taken: usize,
    pub final_prediction: Vec<f64>,
}

impl BackwardAnalysis {
    pub fn initial_loss(&self) -> f64 {
        self.trace[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.trace.last().unwrap()
    }
}

fn loss_and_grads(
    model: &AgaModel<f64>,
    instance: &BackwardInstance,
    y: &[Vec<f64>],
    target: usize,
) -> Result<(f64, Vec<Vec<f64>>, Vec<f64>)> {
    let alpha = model.cfg.alpha;
    let mut sess = model.new_session(false, false, ChaCha8Rng::seed_from_u64(0));
    let y_nodes: Vec<_> = y
        .iter()
        .map(|row| sess.graph.leaf(Tensor::vector(row.clone()).with_grad()))
        .collect();
    let mut ema = sess.graph.constant_vec(instance.ema_base.clone());
    for &yn in &y_nodes {
        let a = sess.graph.scale(yn, alpha);
        let b = sess.graph.scale(ema, 1.0 - alpha);
        ema = sess.graph.add(a, b)?;
    }
    let queue: VecDeque<_> = instance
        .queue_embeddings
        .iter()
        .zip(&y_nodes)
        .map(|(e, &yn)| (sess.graph.constant_vec(e.clone()), yn))
        .collect();
    let mut gs = GraphState {
        queue,
        ema,
        t: instance.t,
    };
    let e_t = sess.graph.constant_vec(instance.current_embedding.clone());
    let nodes = model.step_nodes(&mut sess, &mut gs, e_t, None, GuidanceMode::SelfPredFull, false)?;
    let loss = sess.graph.cross_entropy(nodes.logits, target, 1.0)?;
    let loss_value = sess.graph.data(loss)[0];
    let prediction = sess.graph.data(nodes.prediction).to_vec();
    if !loss_value.is_finite() {
        return Ok((loss_value, Vec::new(), prediction));
    }
    sess.graph.backward(loss)?;
    let grads = y_nodes
        .iter()
        .map(|&yn| sess.graph.grad(yn).map(|g| g.to_vec()).unwrap_or_default())
        .collect();
    Ok((loss_value, grads, prediction))
}

/// Plain gradient descent on the past-prediction sequence with the model
/// frozen. Stops when successive losses differ by less than `eps`, when the
/// iteration budget runs out, or when the loss leaves the finite range.
/// The optimized sequence is reported as-is, without renormalization.
pub fn backward_analysis(
    model: &AgaModel<f64>,
    instance: &BackwardInstance,
    cfg: &BackwardConfig,
) -> Result<BackwardAnalysis> {
    cfg.validate(model.cfg.n_c)?;
    if instance.y0.is_empty() || instance.y0.len() > model.cfg.queue_len {
        return Err(AgaError::invalid(
            "backward instance",
            format!("queue length {} outside [1, {}]", instance.y0.len(), model.cfg.queue_len),
        ));
    }
    let mut y = instance.y0.clone();
    let (l0, mut grads, mut prediction) = loss_and_grads(model, instance, &y, cfg.target)?;
    let mut trace = vec![l0];
    if !l0.is_finite() {
        return Ok(finish(y, instance, trace, StopReason::NonFinite, 0, prediction));
    }
    let mut prev = l0;
    for j in 0..cfg.max_iter {
        for (row, g) in y.iter_mut().zip(&grads) {
            for (v, gv) in row.iter_mut().zip(g) {
                *v -= cfg.eta * gv;
            }
        }
        let (l, g_next, pred) = loss_and_grads(model, instance, &y, cfg.target)?;
        trace.push(l);
        prediction = pred;
        if !l.is_finite() {
            return Ok(finish(y, instance, trace, StopReason::NonFinite, j + 1, prediction));
        }
        if (l - prev).abs() < cfg.eps {
            return Ok(finish(y, instance, trace, StopReason::Plateau, j + 1, prediction));
        }
        prev = l;
        grads = g_next;
    }
    Ok(finish(
        y,
        instance,
        trace,
        StopReason::MaxIter,
        cfg.max_iter,
        prediction,
    ))
}

fn finish(
    y: Vec<Vec<f64>>,
    instance: &BackwardInstance,
    trace: Vec<f64>,
    stopped: StopReason,
    steps_taken: usize,
    final_prediction: Vec<f64>,
) -> BackwardAnalysis {
    let delta = y
        .iter()
        .zip(&instance.y0)
        .map(|(ys, y0)| ys.iter().zip(y0).map(|(a, b)| a - b).collect())
        .collect();
    BackwardAnalysis {
        y_star: y,
        delta,
        trace,
        stopped,
        steps_taken,
        final_prediction,
    }
}

/// Top promoted (most positive) and suppressed (most negative) classes per
/// queue entry of a delta sequence.
pub fn delta_summary(delta: &[Vec<f64>], top: usize) -> Vec<DeltaRow> {
    delta
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            let promoted = idx
                .iter()
                .take(top)
                .filter(|&&c| row[c] > 0.0)
                .map(|&c| (c, row[c]))
                .collect();
            let suppressed = idx
                .iter()
                .rev()
                .take(top)
                .filter(|&&c| row[c] < 0.0)
                .map(|&c| (c, row[c]))
                .collect();
            DeltaRow {
                entry: i,
                promoted,
                suppressed,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct DeltaRow {
    pub entry: usize,
    pub promoted: Vec<(usize, f64)>,
    pub suppressed: Vec<(usize, f64)>,
}

// ── Gate trace ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GatePoint {
    pub t: usize,
    pub action: Option<usize>,
    pub mean_gate: f64,
}

/// Mean gate value per timestep, paired with ground-truth actions when the
/// episode carries labels.
pub fn gate_trace(model: &AgaModel<f64>, episode: &TrainEpisode) -> Result<Vec<GatePoint>> {
    if !model.cfg.gating_enabled {
        return Err(AgaError::GatingDisabled);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let outs = model.forward_sequence(&episode.features, Some(&episode.labels), false, &mut rng)?;
    Ok(outs
        .iter()
        .enumerate()
        .map(|(t, out)| {
            let g = out.gate.as_ref().expect("gating enabled");
            GatePoint {
                t,
                action: episode.labels.get(t).copied().flatten(),
                mean_gate: g.iter().sum::<f64>() / g.len() as f64,
            }
        })
        .collect())
}

// ── Robustness sweep ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessRow {
    /// Number of timesteps whose stored guide was reset to uniform.
    pub k: usize,
    pub mt5r: f64,
}

/// For each episode draw one permutation of its frame indices; at level `k`
/// the guides at the first `k` permuted positions are replaced by the
/// uniform distribution during inference. Reports the class-mean top-5
/// recall per level, `k = 0..=T`.
pub fn robustness_sweep(
    model: &AgaModel<f64>,
    episodes: &[TrainEpisode],
    seed: u64,
) -> Result<Vec<RobustnessRow>> {
    if episodes.is_empty() {
        return Err(AgaError::EmptyInput);
    }
    let t_max = episodes.iter().map(|e| e.features.len()).max().unwrap();
    let perms: Vec<Vec<usize>> = episodes
        .iter()
        .enumerate()
        .map(|(i, ep)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut idx: Vec<usize> = (0..ep.features.len()).collect();
            idx.shuffle(&mut rng);
            idx
        })
        .collect();

    let mut rows = Vec::with_capacity(t_max + 1);
    for k in 0..=t_max {
        let mut records = Vec::new();
        for (ep, perm) in episodes.iter().zip(&perms) {
            let t = ep.features.len();
            let mut reset = vec![false; t];
            for &pos in perm.iter().take(k.min(t)) {
                reset[pos] = true;
            }
            let opts = RunOptions {
                guide_reset: Some(&reset),
            };
            let recs = collect_records_opts(model, std::slice::from_ref(ep), false, &opts, &mut |_| {})?;
            records.extend(recs);
        }
        rows.push(RobustnessRow {
            k,
            mt5r: mean_top_k_recall(&records, 5),
        });
    }
    Ok(rows)
}

// ── Guidance comparison ─────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GuidanceRow {
    pub train_mode: GuidanceMode,
    pub infer_mode: GuidanceMode,
    pub metrics: MetricSummary,
}

/// Train a fresh model per (train, inference) guidance pair with the same
/// seed and tabulate evaluation metrics.
pub fn guidance_comparison(
    base_cfg: &crate::model::AgaConfig,
    train_cfg: &TrainConfig,
    model_seed: u64,
    train_data: &[TrainEpisode],
    eval_data: &[TrainEpisode],
    pairs: &[(GuidanceMode, GuidanceMode)],
) -> Result<Vec<GuidanceRow>> {
    let mut rows = Vec::with_capacity(pairs.len());
    for &(train_mode, infer_mode) in pairs {
        let mut cfg = base_cfg.clone();
        cfg.guidance_train = train_mode;
        cfg.guidance_infer = infer_mode;
        let mut model = AgaModel::new(cfg, model_seed)?;
        train(&mut model, train_data, Some(eval_data), train_cfg, &mut |_, _, _| Ok(()))?;
        let records = collect_records(&model, eval_data, false)?;
        rows.push(GuidanceRow {
            train_mode,
            infer_mode,
            metrics: summarize(&records),
        });
    }
    Ok(rows)
}

// ── Reports ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Forward,
    Backward,
    GateTrace,
    Robustness,
    Guidance,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportPayload {
    Forward(Vec<ForwardRow>),
    Backward(BackwardReport),
    GateTrace(Vec<GatePoint>),
    Robustness(Vec<RobustnessRow>),
    Guidance(Vec<GuidanceRow>),
}

#[derive(Debug, Clone, Serialize)]
pub struct ForwardRow {
    pub query_actions: Vec<usize>,
    pub candidate_actions: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BackwardReport {
    pub target: usize,
    pub eta: f64,
    pub eps: f64,
    pub max_iter: usize,
    pub steps_taken: usize,
    pub stopped: StopReason,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub original_top1: usize,
    pub final_top1: usize,
    pub trace: Vec<f64>,
    pub delta_summary: Vec<DeltaRow>,
    pub y_star: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
}

impl BackwardReport {
    pub fn new(instance: &BackwardInstance, cfg: &BackwardConfig, result: &BackwardAnalysis) -> Self {
        BackwardReport {
            target: cfg.target,
            eta: cfg.eta,
            eps: cfg.eps,
            max_iter: cfg.max_iter,
            steps_taken: result.steps_taken,
            stopped: result.stopped,
            initial_loss: result.initial_loss(),
            final_loss: result.final_loss(),
            original_top1: argmax_lowest(&instance.original_prediction),
            final_top1: argmax_lowest(&result.final_prediction),
            trace: result.trace.clone(),
            delta_summary: delta_summary(&result.delta, 5),
            y_star: result.y_star.clone(),
            delta: result.delta.clone(),
        }
    }
}

/// Configuration and checkpoint identity an analysis ran against.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Provenance {
    pub config: String,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub kind: ReportKind,
    pub payload: ReportPayload,
    pub provenance: Provenance,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AgaConfig;

    fn tiny_model() -> AgaModel<f64> {
        let cfg = AgaConfig {
            queue_len: 4,
            n_c: 5,
            d_backbone: 6,
            d_model: 8,
            d_key: 4,
            n_heads: 2,
            dropout: 0.0,
            ..AgaConfig::desk_default()
        };
        AgaModel::new(cfg, 9).unwrap()
    }

    #[test]
    fn forward_single_candidate_gets_full_weight() {
        let model = tiny_model();
        let probe = ForwardProbe {
            query_actions: vec![1],
            candidate_actions: vec![3],
        };
        let w = forward_analysis(&model, &probe).unwrap();
        assert_eq!(w.len(), 1);
        assert!((w[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_identical_candidates_split_evenly() {
        let model = tiny_model();
        let probe = ForwardProbe {
            query_actions: vec![2],
            candidate_actions: vec![4, 4],
        };
        let w = forward_analysis(&model, &probe).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn forward_weights_sum_to_one() {
        let model = tiny_model();
        let probe = ForwardProbe {
            query_actions: vec![0, 2],
            candidate_actions: vec![1, 2, 3, 4],
        };
        let w = forward_analysis(&model, &probe).unwrap();
        let s: f64 = w.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(w.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn forward_probe_validates_indices() {
        let model = tiny_model();
        let probe = ForwardProbe {
            query_actions: vec![0],
            candidate_actions: vec![7],
        };
        assert!(forward_analysis(&model, &probe).is_err());
    }

    #[test]
    fn gate_trace_requires_gating() {
        let mut cfg = AgaConfig {
            queue_len: 4,
            n_c: 5,
            d_backbone: 6,
            d_model: 8,
            d_key: 4,
            n_heads: 2,
            dropout: 0.0,
            ..AgaConfig::desk_default()
        };
        cfg.gating_enabled = false;
        let model = AgaModel::new(cfg, 9).unwrap();
        let ep = TrainEpisode::from_labels(vec![vec![0.0; 6]; 4], vec![Some(0); 4], 1);
        assert!(matches!(gate_trace(&model, &ep), Err(AgaError::GatingDisabled)));
    }

    #[test]
    fn gate_trace_has_one_point_per_frame() {
        let model = tiny_model();
        let ep = TrainEpisode::from_labels(
            (0..6).map(|t| vec![0.1 * t as f64; 6]).collect(),
            vec![Some(1); 6],
            1,
        );
        let trace = gate_trace(&model, &ep).unwrap();
        assert_eq!(trace.len(), 6);
        for p in trace {
            assert!((0.0..=1.0).contains(&p.mean_gate));
        }
    }
}
