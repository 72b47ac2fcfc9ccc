//! The action-guided attention cell and full-sequence forward pass.
//!
//! Each timestep encodes the incoming frame feature, attends over a FIFO
//! queue of past (embedding, guide) pairs using an EMA-of-predictions query,
//! fuses the retrieved history with the current embedding through a sigmoid
//! gate, and classifies. The first frame bypasses attention entirely: the
//! history context is exactly the zero vector and no attention weights exist.
//!
//! Queries and keys are built from action-probability vectors (the guides),
//! values from frame embeddings. Query, key, and value rows are RMS-normalized
//! before attention, and the feedforward block applies its own RMS pre-norm
//! inside the residual.

use crate::error::{AgaError, Result};
use crate::layers::{InitCx, MlpBlock, MlpBuilder, MultiHeadAttention, MultiHeadConfig, Param, Session};
use crate::scalar::{fc, Scalar};
use crate::tensor::{NodeId, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Which vector is stored in the queue (and folded into the EMA query) as the
/// guidance signal for a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// The full self-predicted distribution.
    SelfPredFull,
    /// The self-prediction collapsed to a one-hot at its top class.
    SelfPredTop1Onehot,
    /// A caller-supplied one-hot of the frame's ground-truth label.
    GroundTruthOnehot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgaConfig {
    /// FIFO queue length S: how many past frames attention can reference.
    pub queue_len: usize,
    /// EMA smoothing factor for the query; 0 freezes the query at the zero
    /// vector's projection, 1 uses only the latest guide.
    pub alpha: f64,
    /// Number of action classes.
    pub n_c: usize,
    /// Dimensionality of the incoming (backbone) frame features.
    pub d_backbone: usize,
    /// Model width: embeddings, history context, gate, and values.
    pub d_model: usize,
    /// Width of the query/key space.
    pub d_key: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub gating_enabled: bool,
    pub guidance_train: GuidanceMode,
    pub guidance_infer: GuidanceMode,
    /// Seconds per frame.
    pub delta_t: f64,
    /// Anticipation index: the target at time t is the action at t + t_a.
    pub t_a: usize,
}

impl Default for AgaConfig {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl AgaConfig {
    /// Small configuration sized for CPU experiments.
    pub fn desk_default() -> Self {
        AgaConfig {
            queue_len: 16,
            alpha: 0.8,
            n_c: 13,
            d_backbone: 32,
            d_model: 64,
            d_key: 32,
            n_heads: 4,
            dropout: 0.1,
            gating_enabled: true,
            guidance_train: GuidanceMode::SelfPredFull,
            guidance_infer: GuidanceMode::SelfPredFull,
            delta_t: 1.0,
            t_a: 1,
        }
    }

    /// Full-size configuration: hidden size 2048, 16 heads, queue 16.
    pub fn full_scale(n_c: usize, d_backbone: usize) -> Self {
        AgaConfig {
            queue_len: 16,
            alpha: 0.8,
            n_c,
            d_backbone,
            d_model: 2048,
            d_key: 512,
            n_heads: 16,
            dropout: 0.6,
            ..Self::desk_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.queue_len == 0 {
            return Err(AgaError::invalid("queue_len", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(AgaError::invalid("alpha", "must lie in [0, 1]"));
        }
        if self.n_c == 0 {
            return Err(AgaError::invalid("n_c", "must be at least 1"));
        }
        if self.d_backbone == 0 {
            return Err(AgaError::invalid("d_backbone", "must be at least 1"));
        }
        if self.t_a == 0 {
            return Err(AgaError::invalid("t_a", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(AgaError::invalid("dropout", "must lie in [0, 1)"));
        }
        if self.delta_t <= 0.0 {
            return Err(AgaError::invalid("delta_t", "must be positive"));
        }
        self.attention_config().validate()
    }

    pub fn attention_config(&self) -> MultiHeadConfig {
        MultiHeadConfig {
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_key: self.d_key,
        }
    }

    /// Anticipation interval in seconds.
    pub fn tau_a(&self) -> f64 {
        self.t_a as f64 * self.delta_t
    }

    fn ffn_hidden(&self) -> usize {
        (self.d_model / 2).max(1)
    }

    fn gate_hidden(&self) -> usize {
        (self.d_model / 4).max(1)
    }
}

/// Per-sequence recurrent state as plain values: the FIFO queue of
/// (embedding, guide) pairs, the EMA query, and the timestep counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AgaState<F> {
    pub queue: VecDeque<(Vec<F>, Vec<F>)>,
    pub ema_query: Vec<F>,
    pub t: usize,
}

impl<F: Scalar> AgaState<F> {
    pub fn initial(cfg: &AgaConfig) -> Self {
        AgaState {
            queue: VecDeque::new(),
            ema_query: vec![F::zero(); cfg.n_c],
            t: 0,
        }
    }
}

/// Values produced by one timestep.
#[derive(Debug, Clone)]
pub struct StepOutput<F> {
    /// Probability distribution over the action classes.
    pub prediction: Vec<F>,
    /// Gate vector in [0,1]^d_model; absent when gating is disabled.
    pub gate: Option<Vec<F>>,
    /// Fused output o_t.
    pub fused: Vec<F>,
    /// History context (exactly zero at the first frame).
    pub history: Vec<F>,
    /// Per-head attention weights over the queue; absent at the first frame.
    pub attn_weights: Option<Vec<Vec<F>>>,
}

/// Graph nodes produced by one timestep; used to assemble losses.
#[derive(Debug, Clone)]
pub struct StepNodes {
    pub logits: NodeId,
    pub prediction: NodeId,
    pub history: NodeId,
    pub fused: NodeId,
    pub gate: Option<NodeId>,
    pub weights: Option<Vec<NodeId>>,
}

/// Recurrent state expressed as graph nodes, so gradients flow through the
/// queue and the EMA chain when training.
pub struct GraphState {
    pub queue: VecDeque<(NodeId, NodeId)>,
    pub ema: NodeId,
    pub t: usize,
}

/// Per-run switches for the inference path.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions<'a> {
    /// Timesteps whose stored guide is forcibly replaced by the uniform
    /// distribution (robustness harness).
    pub guide_reset: Option<&'a [bool]>,
}

/// EMA update: `alpha * latest + (1 - alpha) * previous`.
pub fn ema_update<F: Scalar>(previous: &[F], latest: &[F], alpha: f64) -> Result<Vec<F>> {
    if previous.len() != latest.len() {
        return Err(AgaError::shape("ema_update", &[previous.len()], &[latest.len()]));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(AgaError::invalid("alpha", "must lie in [0, 1]"));
    }
    let a = fc::<F>(alpha);
    let b = fc::<F>(1.0 - alpha);
    Ok(previous
        .iter()
        .zip(latest.iter())
        .map(|(&p, &l)| a * l + b * p)
        .collect())
}

fn one_hot<F: Scalar>(n: usize, idx: usize) -> Vec<F> {
    let mut v = vec![F::zero(); n];
    v[idx] = F::one();
    v
}

/// Index of the largest component, lowest index on ties.
pub fn argmax_lowest<F: Scalar>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// The full model: frame encoder, query/key/value encoders, attention, FFN,
/// gate, and classifier.
pub struct AgaModel<F> {
    pub cfg: AgaConfig,
    pub f_x: MlpBlock<F>,
    pub e_q: MlpBlock<F>,
    pub e_k: MlpBlock<F>,
    pub e_v: MlpBlock<F>,
    pub attn: MultiHeadAttention<F>,
    pub rms_q: Param<F>,
    pub rms_k: Param<F>,
    pub rms_v: Param<F>,
    pub rms_ffn: Param<F>,
    pub ffn: MlpBlock<F>,
    pub gate_mlp: MlpBlock<F>,
    pub classifier: MlpBlock<F>,
    param_count: usize,
}

impl<F: Scalar> AgaModel<F> {
    pub fn new(cfg: AgaConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut cx = InitCx::new(seed);
        let (nc, db, d, dk) = (cfg.n_c, cfg.d_backbone, cfg.d_model, cfg.d_key);
        let p = cfg.dropout;

        let f_x = MlpBuilder::new("f_x", &mut cx)
            .layer_norm(db)
            .relu()
            .dropout(p)
            .linear(db, d)
            .scale_norm(d)
            .build()?;
        let e_q = MlpBuilder::new("e_q", &mut cx)
            .layer_norm(nc)
            .relu()
            .dropout(p)
            .linear(nc, dk)
            .build()?;
        let e_k = MlpBuilder::new("e_k", &mut cx)
            .layer_norm(nc)
            .relu()
            .dropout(p)
            .linear(nc, dk)
            .build()?;
        let e_v = MlpBuilder::new("e_v", &mut cx)
            .layer_norm(d)
            .relu()
            .dropout(p)
            .linear(d, d)
            .build()?;
        let attn = MultiHeadAttention::new(cfg.attention_config(), &mut cx)?;
        let rms_q = cx.constant("rms_q.gain", vec![dk], 1.0);
        let rms_k = cx.constant("rms_k.gain", vec![dk], 1.0);
        let rms_v = cx.constant("rms_v.gain", vec![d], 1.0);
        let rms_ffn = cx.constant("rms_ffn.gain", vec![d], 1.0);
        let ffn = MlpBuilder::new("ffn", &mut cx)
            .linear(d, cfg.ffn_hidden())
            .gelu()
            .dropout(p)
            .linear(cfg.ffn_hidden(), d)
            .build()?;
        let gate_mlp = MlpBuilder::new("gate", &mut cx)
            .linear(2 * d, cfg.gate_hidden())
            .relu()
            .dropout(p)
            .linear(cfg.gate_hidden(), d)
            .build()?;
        let classifier = MlpBuilder::new("classifier", &mut cx)
            .layer_norm(d)
            .relu()
            .dropout(p)
            .linear(d, nc)
            .build()?;

        let param_count = cx.param_count();
        Ok(AgaModel {
            cfg,
            f_x,
            e_q,
            e_k,
            e_v,
            attn,
            rms_q,
            rms_k,
            rms_v,
            rms_ffn,
            ffn,
            gate_mlp,
            classifier,
            param_count,
        })
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// All parameters in a fixed, construction-stable order.
    pub fn params(&self) -> Vec<&Param<F>> {
        let mut out = Vec::new();
        out.extend(self.f_x.params());
        out.extend(self.e_q.params());
        out.extend(self.e_k.params());
        out.extend(self.e_v.params());
        out.extend(self.attn.params());
        out.push(&self.rms_q);
        out.push(&self.rms_k);
        out.push(&self.rms_v);
        out.push(&self.rms_ffn);
        out.extend(self.ffn.params());
        out.extend(self.gate_mlp.params());
        out.extend(self.classifier.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out: Vec<&mut Param<F>> = Vec::new();
        out.extend(self.f_x.params_mut());
        out.extend(self.e_q.params_mut());
        out.extend(self.e_k.params_mut());
        out.extend(self.e_v.params_mut());
        out.extend(self.attn.params_mut());
        out.push(&mut self.rms_q);
        out.push(&mut self.rms_k);
        out.push(&mut self.rms_v);
        out.push(&mut self.rms_ffn);
        out.extend(self.ffn.params_mut());
        out.extend(self.gate_mlp.params_mut());
        out.extend(self.classifier.params_mut());
        out
    }

    pub fn new_session(&self, training: bool, trainable: bool, rng: ChaCha8Rng) -> Session<F> {
        let mut sess = if trainable {
            Session::train(self.param_count, rng)
        } else {
            let mut s = Session::eval(self.param_count);
            s.training = training;
            s.rng = rng;
            s
        };
        sess.training = training;
        sess
    }

    /// Encode a backbone feature vector into the model space via `f_x`.
    pub fn encode_frame(&self, sess: &mut Session<F>, feature: NodeId) -> Result<NodeId> {
        let shape = sess.graph.shape(feature).to_vec();
        if shape != [self.cfg.d_backbone] {
            return Err(AgaError::shape("encode_frame", &shape, &[self.cfg.d_backbone]));
        }
        self.f_x.forward(sess, feature)
    }

    /// Value-level frame encoding.
    pub fn encode_value(&self, feature: &[F], training: bool, rng: &mut ChaCha8Rng) -> Result<Vec<F>> {
        let mut sess = self.new_session(training, false, rng.clone());
        let f = sess.graph.constant_vec(feature.to_vec());
        let e = self.encode_frame(&mut sess, f)?;
        let out = sess.graph.data(e).to_vec();
        *rng = sess.rng;
        Ok(out)
    }

    /// Encode and pre-normalize attention inputs: the query guide
    /// `[1, n_c]` through `e_q`, the key guides `[s, n_c]` through `e_k`,
    /// both RMS-normalized. Shared by the cell and the analysis probes.
    pub fn encode_attention_inputs(
        &self,
        sess: &mut Session<F>,
        q_in: NodeId,
        k_in: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let q_rows = self.e_q.forward(sess, q_in)?;
        let k_rows = self.e_k.forward(sess, k_in)?;
        let rq = sess.param(&self.rms_q);
        let rk = sess.param(&self.rms_k);
        let qn = sess.graph.rms_norm(q_rows, rq)?;
        let kn = sess.graph.rms_norm(k_rows, rk)?;
        Ok((qn, kn))
    }

    /// Sigmoid-gated fusion: `o = g * h + (1 - g) * e` with
    /// `g = sigmoid(MLP(h || e))`.
    pub fn gate_fuse(
        &self,
        sess: &mut Session<F>,
        h_tilde: NodeId,
        e: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let cat = sess.graph.concat(&[h_tilde, e], 0)?;
        let z = self.gate_mlp.forward(sess, cat)?;
        let g = sess.graph.sigmoid(z);
        let gh = sess.graph.mul(g, h_tilde)?;
        let one = sess.graph.constant(Tensor::scalar(F::one()));
        let inv = sess.graph.sub(one, g)?;
        let ge = sess.graph.mul(inv, e)?;
        let o = sess.graph.add(gh, ge)?;
        Ok((o, g))
    }

    /// One timestep at the graph level. `e_t` must already be encoded.
    pub fn step_nodes(
        &self,
        sess: &mut Session<F>,
        st: &mut GraphState,
        e_t: NodeId,
        supervision_guide: Option<&[F]>,
        mode: GuidanceMode,
        reset_guide: bool,
    ) -> Result<StepNodes> {
        let d = self.cfg.d_model;
        let nc = self.cfg.n_c;
        if sess.graph.shape(e_t) != [d] {
            return Err(AgaError::shape("step", sess.graph.shape(e_t), &[d]));
        }

        let (h_tilde, weights) = if st.queue.is_empty() {
            (sess.graph.zeros(vec![d]), None)
        } else {
            let guides: Vec<NodeId> = st.queue.iter().map(|&(_, g)| g).collect();
            let embeds: Vec<NodeId> = st.queue.iter().map(|&(e, _)| e).collect();
            let k_in = sess.graph.stack_rows(&guides)?;
            let v_in = sess.graph.stack_rows(&embeds)?;
            let q_in = sess.graph.reshape(st.ema, vec![1, nc])?;

            let (qn, kn) = self.encode_attention_inputs(sess, q_in, k_in)?;
            let v_rows = self.e_v.forward(sess, v_in)?;
            let rv = sess.param(&self.rms_v);
            let vn = sess.graph.rms_norm(v_rows, rv)?;

            let (h, w) = self.attn.forward(sess, qn, kn, vn)?;

            let rf = sess.param(&self.rms_ffn);
            let hn = sess.graph.rms_norm(h, rf)?;
            let ff = self.ffn.forward(sess, hn)?;
            let ht = sess.graph.add(h, ff)?;
            let ht = sess.graph.reshape(ht, vec![d])?;
            (ht, Some(w))
        };

        let (fused, gate) = if self.cfg.gating_enabled {
            let (o, g) = self.gate_fuse(sess, h_tilde, e_t)?;
            (o, Some(g))
        } else {
            (sess.graph.add(h_tilde, e_t)?, None)
        };

        let logits = self.classifier.forward(sess, fused)?;
        let prediction = sess.graph.softmax(logits, 0)?;

        let guide = if reset_guide {
            sess.graph.constant_vec(vec![fc::<F>(1.0 / nc as f64); nc])
        } else {
            match mode {
                GuidanceMode::SelfPredFull => prediction,
                GuidanceMode::SelfPredTop1Onehot => {
                    let top = argmax_lowest(sess.graph.data(prediction));
                    sess.graph.constant_vec(one_hot(nc, top))
                }
                GuidanceMode::GroundTruthOnehot => {
                    let v = supervision_guide.ok_or(AgaError::GuidanceMissing)?;
                    if v.len() != nc {
                        return Err(AgaError::shape("supervision guide", &[v.len()], &[nc]));
                    }
                    sess.graph.constant_vec(v.to_vec())
                }
            }
        };

        st.queue.push_back((e_t, guide));
        if st.queue.len() > self.cfg.queue_len {
            st.queue.pop_front();
        }
        let scaled_guide = sess.graph.scale(guide, fc::<F>(self.cfg.alpha));
        let scaled_prev = sess.graph.scale(st.ema, fc::<F>(1.0 - self.cfg.alpha));
        st.ema = sess.graph.add(scaled_guide, scaled_prev)?;
        st.t += 1;

        Ok(StepNodes {
            logits,
            prediction,
            history: h_tilde,
            fused,
            gate,
            weights,
        })
    }

    /// One timestep at the value level: loads the state as constants, runs
    /// the cell, and returns the outputs plus the advanced state.
    pub fn step(
        &self,
        state: &AgaState<F>,
        e_t: &[F],
        supervision_guide: Option<&[F]>,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(StepOutput<F>, AgaState<F>)> {
        let mode = if training {
            self.cfg.guidance_train
        } else {
            self.cfg.guidance_infer
        };
        let mut sess = self.new_session(training, false, rng.clone());
        let mut gs = GraphState {
            queue: state
                .queue
                .iter()
                .map(|(e, g)| {
                    (
                        sess.graph.constant_vec(e.clone()),
                        sess.graph.constant_vec(g.clone()),
                    )
                })
                .collect(),
            ema: sess.graph.constant_vec(state.ema_query.clone()),
            t: state.t,
        };
        let e = sess.graph.constant_vec(e_t.to_vec());
        let nodes = self.step_nodes(&mut sess, &mut gs, e, supervision_guide, mode, false)?;
        let out = extract_step(&sess, &nodes);
        let new_state = AgaState {
            queue: gs
                .queue
                .iter()
                .map(|&(e, g)| (sess.graph.data(e).to_vec(), sess.graph.data(g).to_vec()))
                .collect(),
            ema_query: sess.graph.data(gs.ema).to_vec(),
            t: gs.t,
        };
        *rng = sess.rng;
        Ok((out, new_state))
    }

    /// Run a whole episode inside one session, returning per-step nodes.
    /// `features` are backbone vectors; `labels` supply ground-truth guides.
    pub fn run_episode(
        &self,
        sess: &mut Session<F>,
        features: &[Vec<F>],
        labels: Option<&[Option<usize>]>,
        opts: &RunOptions,
    ) -> Result<Vec<StepNodes>> {
        if features.is_empty() {
            return Err(AgaError::EmptyInput);
        }
        let mode = if sess.training {
            self.cfg.guidance_train
        } else {
            self.cfg.guidance_infer
        };
        let nc = self.cfg.n_c;
        let mut st = GraphState {
            queue: VecDeque::new(),
            ema: sess.graph.zeros(vec![nc]),
            t: 0,
        };
        let mut steps = Vec::with_capacity(features.len());
        for (t, feat) in features.iter().enumerate() {
            let f = sess.graph.constant_vec(feat.clone());
            let e = self.encode_frame(sess, f)?;
            let guide_vec: Option<Vec<F>> = if mode == GuidanceMode::GroundTruthOnehot {
                let label = labels
                    .and_then(|ls| ls.get(t).copied().flatten())
                    .ok_or(AgaError::GuidanceMissing)?;
                if label >= nc {
                    return Err(AgaError::IndexOutOfRange {
                        index: label,
                        n_classes: nc,
                    });
                }
                Some(one_hot(nc, label))
            } else {
                None
            };
            let reset = opts
                .guide_reset
                .map(|r| r.get(t).copied().unwrap_or(false))
                .unwrap_or(false);
            let nodes = self.step_nodes(sess, &mut st, e, guide_vec.as_deref(), mode, reset)?;
            steps.push(nodes);
        }
        Ok(steps)
    }

    /// Whole-sequence forward pass at the value level.
    pub fn forward_sequence(
        &self,
        features: &[Vec<F>],
        labels: Option<&[Option<usize>]>,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<StepOutput<F>>> {
        self.forward_sequence_opts(features, labels, training, rng, &RunOptions::default())
    }

    pub fn forward_sequence_opts(
        &self,
        features: &[Vec<F>],
        labels: Option<&[Option<usize>]>,
        training: bool,
        rng: &mut ChaCha8Rng,
        opts: &RunOptions,
    ) -> Result<Vec<StepOutput<F>>> {
        let mut sess = self.new_session(training, false, rng.clone());
        let steps = self.run_episode(&mut sess, features, labels, opts)?;
        let out = steps.iter().map(|n| extract_step(&sess, n)).collect();
        *rng = sess.rng;
        Ok(out)
    }
}

/// Copy the values of one step's nodes out of the graph.
pub fn extract_step<F: Scalar>(sess: &Session<F>, nodes: &StepNodes) -> StepOutput<F> {
    StepOutput {
        prediction: sess.graph.data(nodes.prediction).to_vec(),
        gate: nodes.gate.map(|g| sess.graph.data(g).to_vec()),
        fused: sess.graph.data(nodes.fused).to_vec(),
        history: sess.graph.data(nodes.history).to_vec(),
        attn_weights: nodes
            .weights
            .as_ref()
            .map(|ws| ws.iter().map(|&w| sess.graph.data(w).to_vec()).collect()),
    }
}
