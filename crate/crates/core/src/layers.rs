//! Parameterized building blocks: MLP stacks, multi-head attention, and the
//! session machinery that binds named parameters into a computation graph.

use crate::error::{AgaError, Result};
use crate::scalar::{fc, Scalar};
use crate::tensor::{Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Named, uniquely numbered parameter tensor. Gradients accumulate in
/// `tensor.grad` across the episodes of a batch.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub id: usize,
    pub tensor: Tensor<F>,
}

/// Deterministic parameter initialization context. Weights draw from
/// `U[-1/sqrt(fan_in), +1/sqrt(fan_in)]`; norm gains start at one, biases at
/// zero, scale-norm at `sqrt(d)`.
pub struct InitCx {
    rng: ChaCha8Rng,
    next_id: usize,
}

impl InitCx {
    pub fn new(seed: u64) -> Self {
        InitCx {
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_id: 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.next_id
    }

    pub fn uniform_fan_in<F: Scalar>(&mut self, name: impl Into<String>, shape: Vec<usize>, fan_in: usize) -> Param<F> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n)
            .map(|_| fc::<F>(self.rng.gen_range(-bound..=bound)))
            .collect();
        self.mk(name.into(), Tensor::new(shape, data))
    }

    pub fn constant<F: Scalar>(&mut self, name: impl Into<String>, shape: Vec<usize>, v: f64) -> Param<F> {
        let n: usize = shape.iter().product();
        self.mk(name.into(), Tensor::new(shape, vec![fc::<F>(v); n]))
    }

    fn mk<F: Scalar>(&mut self, name: String, tensor: Tensor<F>) -> Param<F> {
        let id = self.next_id;
        self.next_id += 1;
        Param { name, id, tensor }
    }
}

/// One forward pass: a graph plus lazily created leaves for bound parameters.
pub struct Session<F> {
    pub graph: Graph<F>,
    binds: Vec<Option<NodeId>>,
    pub training: bool,
    pub trainable: bool,
    pub rng: ChaCha8Rng,
}

impl<F: Scalar> Session<F> {
    /// Training-mode session: parameters bind as gradient leaves and dropout
    /// draws from `rng`.
    pub fn train(param_count: usize, rng: ChaCha8Rng) -> Self {
        Session {
            graph: Graph::new(),
            binds: vec![None; param_count],
            training: true,
            trainable: true,
            rng,
        }
    }

    /// Inference-mode session: parameters bind as constants, dropout is the
    /// identity.
    pub fn eval(param_count: usize) -> Self {
        Session {
            graph: Graph::new(),
            binds: vec![None; param_count],
            training: false,
            trainable: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Bind a parameter into the graph, reusing the node on repeat binds.
    pub fn param(&mut self, p: &Param<F>) -> NodeId {
        if let Some(id) = self.binds[p.id] {
            return id;
        }
        let mut t = p.tensor.clone();
        t.requires_grad = self.trainable;
        t.grad = None;
        let id = self.graph.leaf(t);
        self.binds[p.id] = Some(id);
        id
    }

    /// Node a parameter was bound to in this session, if any.
    pub fn bound(&self, p: &Param<F>) -> Option<NodeId> {
        self.binds[p.id]
    }
}

// ── MLP blocks ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

/// One layer of an [`MlpBlock`] stack.
#[derive(Debug, Clone)]
pub enum Layer<F> {
    LayerNorm { gain: Param<F>, bias: Param<F> },
    Activation(Activation),
    Dropout { rate: f64 },
    Linear { w: Param<F>, b: Param<F>, inp: usize, out: usize },
    ScaleNorm { g: Param<F> },
}

impl<F> Layer<F> {
    fn describe(&self) -> String {
        match self {
            Layer::LayerNorm { .. } => "LayerNorm".into(),
            Layer::Activation(Activation::Relu) => "ReLU".into(),
            Layer::Activation(Activation::Gelu) => "GELU".into(),
            Layer::Dropout { rate } => format!("Dropout({rate})"),
            Layer::Linear { inp, out, .. } => format!("Linear({inp}, {out})"),
            Layer::ScaleNorm { .. } => "ScaleNorm".into(),
        }
    }
}

/// Ordered stack of norm / activation / dropout / linear layers applied over
/// the last axis of the input.
#[derive(Debug, Clone)]
pub struct MlpBlock<F> {
    pub name: String,
    pub layers: Vec<Layer<F>>,
}

/// Builder that threads the init context through the stack definition.
pub struct MlpBuilder<'a, F> {
    name: String,
    cx: &'a mut InitCx,
    layers: Vec<Layer<F>>,
    last_out: Option<usize>,
}

impl<'a, F: Scalar> MlpBuilder<'a, F> {
    pub fn new(name: impl Into<String>, cx: &'a mut InitCx) -> Self {
        MlpBuilder {
            name: name.into(),
            cx,
            layers: Vec::new(),
            last_out: None,
        }
    }

    pub fn layer_norm(mut self, d: usize) -> Self {
        let gain = self.cx.constant(format!("{}.ln{}.gain", self.name, self.layers.len()), vec![d], 1.0);
        let bias = self.cx.constant(format!("{}.ln{}.bias", self.name, self.layers.len()), vec![d], 0.0);
        self.layers.push(Layer::LayerNorm { gain, bias });
        self
    }

    pub fn relu(mut self) -> Self {
        self.layers.push(Layer::Activation(Activation::Relu));
        self
    }

    pub fn gelu(mut self) -> Self {
        self.layers.push(Layer::Activation(Activation::Gelu));
        self
    }

    pub fn dropout(mut self, rate: f64) -> Self {
        self.layers.push(Layer::Dropout { rate });
        self
    }

    pub fn linear(mut self, inp: usize, out: usize) -> Self {
        let w = self.cx.uniform_fan_in(
            format!("{}.linear{}.w", self.name, self.layers.len()),
            vec![inp, out],
            inp,
        );
        let b = self.cx.constant(format!("{}.linear{}.b", self.name, self.layers.len()), vec![out], 0.0);
        self.layers.push(Layer::Linear { w, b, inp, out });
        self.last_out = Some(out);
        self
    }

    pub fn scale_norm(mut self, d: usize) -> Self {
        let g = self.cx.constant(
            format!("{}.scale_norm{}.g", self.name, self.layers.len()),
            vec![1],
            (d as f64).sqrt(),
        );
        self.layers.push(Layer::ScaleNorm { g });
        self
    }

    pub fn build(self) -> Result<MlpBlock<F>> {
        let mut prev_out: Option<usize> = None;
        for layer in &self.layers {
            match layer {
                Layer::Linear { inp, .. } => {
                    if let Some(p) = prev_out {
                        if p != *inp {
                            return Err(AgaError::invalid(
                                format!("block '{}'", self.name),
                                format!("linear in-dim {inp} does not chain from previous out-dim {p}"),
                            ));
                        }
                    }
                    if let Layer::Linear { out, .. } = layer {
                        prev_out = Some(*out);
                    }
                }
                Layer::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(AgaError::invalid(
                            format!("block '{}'", self.name),
                            format!("dropout rate {rate} not in [0, 1)"),
                        ));
                    }
                }
                _ => {}
            }
        }
        Ok(MlpBlock {
            name: self.name,
            layers: self.layers,
        })
    }
}

impl<F: Scalar> MlpBlock<F> {
    /// Apply the stack in declaration order. `x` may be a vector or a matrix
    /// of row vectors.
    pub fn forward(&self, sess: &mut Session<F>, x: NodeId) -> Result<NodeId> {
        let mut cur = x;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = self.apply(sess, layer, cur).map_err(|e| match e {
                AgaError::ShapeMismatch { lhs, rhs, .. } => AgaError::ShapeMismatch {
                    op: format!("block '{}' layer {} ({})", self.name, i, layer.describe()),
                    lhs,
                    rhs,
                },
                other => other,
            })?;
        }
        Ok(cur)
    }

    fn apply(&self, sess: &mut Session<F>, layer: &Layer<F>, x: NodeId) -> Result<NodeId> {
        match layer {
            Layer::LayerNorm { gain, bias } => {
                let g = sess.param(gain);
                let b = sess.param(bias);
                sess.graph.layer_norm(x, g, b)
            }
            Layer::Activation(Activation::Relu) => Ok(sess.graph.relu(x)),
            Layer::Activation(Activation::Gelu) => Ok(sess.graph.gelu(x)),
            Layer::Dropout { rate } => {
                let training = sess.training;
                sess.graph.dropout(x, *rate, training, &mut sess.rng)
            }
            Layer::Linear { w, b, inp, .. } => {
                let shape = sess.graph.shape(x).to_vec();
                if shape.last() != Some(inp) {
                    return Err(AgaError::shape("linear", &shape, &[*inp]));
                }
                let wid = sess.param(w);
                let bid = sess.param(b);
                let (rows, flat) = match shape.len() {
                    1 => (1, true),
                    2 => (shape[0], false),
                    _ => return Err(AgaError::shape("linear", &shape, &[*inp])),
                };
                let xm = if flat {
                    sess.graph.reshape(x, vec![1, *inp])?
                } else {
                    x
                };
                let y = sess.graph.matmul(xm, wid)?;
                let y = sess.graph.add_bias(y, bid)?;
                if flat {
                    let d = sess.graph.shape(y)[1];
                    sess.graph.reshape(y, vec![d])
                } else {
                    let _ = rows;
                    Ok(y)
                }
            }
            Layer::ScaleNorm { g } => {
                let gid = sess.param(g);
                sess.graph.scale_norm(x, gid)
            }
        }
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::LayerNorm { gain, bias } => {
                    out.push(gain);
                    out.push(bias);
                }
                Layer::Linear { w, b, .. } => {
                    out.push(w);
                    out.push(b);
                }
                Layer::ScaleNorm { g } => out.push(g),
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::LayerNorm { gain, bias } => {
                    out.push(gain);
                    out.push(bias);
                }
                Layer::Linear { w, b, .. } => {
                    out.push(w);
                    out.push(b);
                }
                Layer::ScaleNorm { g } => out.push(g),
                _ => {}
            }
        }
        out
    }
}

// ── Multi-head attention ────────────────────────────────────────────────

/// Head layout for the attention primitive. Queries and keys live in a
/// `d_key`-dimensional space, values in `d_model`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MultiHeadConfig {
    pub n_heads: usize,
    pub d_model: usize,
    pub d_key: usize,
}

impl MultiHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_key == 0 {
            return Err(AgaError::invalid("attention config", "dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(AgaError::invalid(
                "attention config",
                format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        if self.d_key % self.n_heads != 0 {
            return Err(AgaError::invalid(
                "attention config",
                format!("d_key {} not divisible by {} heads", self.d_key, self.n_heads),
            ));
        }
        Ok(())
    }

    pub fn d_head_key(&self) -> usize {
        self.d_key / self.n_heads
    }

    pub fn d_head_value(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Scaled dot-product attention with per-head projection matrices and an
/// output projection. Scores scale by the square root of the per-head key
/// dimension.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<F> {
    pub cfg: MultiHeadConfig,
    pub w_q: Vec<Param<F>>,
    pub w_k: Vec<Param<F>>,
    pub w_v: Vec<Param<F>>,
    pub w_o: Param<F>,
}

impl<F: Scalar> MultiHeadAttention<F> {
    pub fn new(cfg: MultiHeadConfig, cx: &mut InitCx) -> Result<Self> {
        cfg.validate()?;
        let (dk, dhk, dhv) = (cfg.d_key, cfg.d_head_key(), cfg.d_head_value());
        let mk = |cx: &mut InitCx, kind: &str, i: usize, rows: usize, cols: usize| {
            cx.uniform_fan_in(format!("attn.{kind}{i}"), vec![rows, cols], rows)
        };
        let w_q = (0..cfg.n_heads).map(|i| mk(cx, "w_q", i, dk, dhk)).collect();
        let w_k = (0..cfg.n_heads).map(|i| mk(cx, "w_k", i, dk, dhk)).collect();
        let w_v = (0..cfg.n_heads)
            .map(|i| mk(cx, "w_v", i, cfg.d_model, dhv))
            .collect();
        let w_o = cx.uniform_fan_in("attn.w_o", vec![cfg.d_model, cfg.d_model], cfg.d_model);
        Ok(MultiHeadAttention { cfg, w_q, w_k, w_v, w_o })
    }

    /// Project the value rows per head: `v[s, d_model] -> h x [s, d_head]`.
    pub fn project_values(&self, sess: &mut Session<F>, v: NodeId) -> Result<Vec<NodeId>> {
        (0..self.cfg.n_heads)
            .map(|i| {
                let wv = sess.param(&self.w_v[i]);
                sess.graph.matmul(v, wv)
            })
            .collect()
    }

    /// Per-head attention weight matrices `[q, s]`: softmax of the scaled
    /// query/key dot products.
    pub fn attention_weights(
        &self,
        sess: &mut Session<F>,
        q: NodeId,
        k: NodeId,
    ) -> Result<Vec<NodeId>> {
        let s = sess.graph.shape(k)[0];
        if s == 0 {
            return Err(AgaError::EmptyHistory);
        }
        let scale = fc::<F>(1.0 / (self.cfg.d_head_key() as f64).sqrt());
        let mut weights = Vec::with_capacity(self.cfg.n_heads);
        for i in 0..self.cfg.n_heads {
            let wq = sess.param(&self.w_q[i]);
            let wk = sess.param(&self.w_k[i]);
            let qh = sess.graph.matmul(q, wq)?;
            let kh = sess.graph.matmul(k, wk)?;
            let scores = sess.graph.matmul_nt(qh, kh)?;
            let scores = sess.graph.scale(scores, scale);
            weights.push(sess.graph.softmax(scores, 1)?);
        }
        Ok(weights)
    }

    /// Attention over pre-projected values. Returns the output and the
    /// per-head weight matrices `[q, s]`.
    pub fn forward_projected(
        &self,
        sess: &mut Session<F>,
        q: NodeId,
        k: NodeId,
        v_proj: &[NodeId],
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let weights = self.attention_weights(sess, q, k)?;
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for (w, vp) in weights.iter().zip(v_proj) {
            heads.push(sess.graph.matmul(*w, *vp)?);
        }
        let cat = sess.graph.concat(&heads, 1)?;
        let wo = sess.param(&self.w_o);
        let out = sess.graph.matmul(cat, wo)?;
        Ok((out, weights))
    }

    /// Full attention: `q[q, d_key]`, `k[s, d_key]`, `v[s, d_model]`.
    pub fn forward(
        &self,
        sess: &mut Session<F>,
        q: NodeId,
        k: NodeId,
        v: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        if sess.graph.shape(v)[0] == 0 || sess.graph.shape(k)[0] == 0 {
            return Err(AgaError::EmptyHistory);
        }
        let v_proj = self.project_values(sess, v)?;
        self.forward_projected(sess, q, k, &v_proj)
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut out = Vec::new();
        out.extend(self.w_q.iter());
        out.extend(self.w_k.iter());
        out.extend(self.w_v.iter());
        out.push(&self.w_o);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out: Vec<&mut Param<F>> = Vec::new();
        out.extend(self.w_q.iter_mut());
        out.extend(self.w_k.iter_mut());
        out.extend(self.w_v.iter_mut());
        out.push(&mut self.w_o);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cx() -> InitCx {
        InitCx::new(42)
    }

    #[test]
    fn identity_relu_stack_passes_nonnegative_input() {
        let mut c = cx();
        let mut block: MlpBlock<f64> = MlpBuilder::new("id", &mut c)
            .relu()
            .dropout(0.0)
            .linear(3, 3)
            .build()
            .unwrap();
        // overwrite the linear with an exact identity
        for p in block.params_mut() {
            if p.name.contains(".w") {
                p.tensor.data = vec![1., 0., 0., 0., 1., 0., 0., 0., 1.];
            }
        }
        let mut sess = Session::eval(c.param_count());
        let x = sess.graph.constant_vec(vec![0.5, 0.0, 2.0]);
        let y = block.forward(&mut sess, x).unwrap();
        assert_eq!(sess.graph.data(y), &[0.5, 0.0, 2.0]);
    }

    #[test]
    fn linear_shape_error_names_the_layer() {
        let mut c = cx();
        let block: MlpBlock<f64> = MlpBuilder::new("enc", &mut c)
            .linear(4, 2)
            .build()
            .unwrap();
        let mut sess = Session::eval(c.param_count());
        let x = sess.graph.constant_vec(vec![1.0; 3]);
        let err = block.forward(&mut sess, x).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("enc") && msg.contains("Linear(4, 2)"), "{msg}");
    }

    #[test]
    fn builder_rejects_unchained_linears() {
        let mut c = cx();
        let r: Result<MlpBlock<f64>> = MlpBuilder::new("bad", &mut c)
            .linear(4, 2)
            .linear(3, 2)
            .build();
        assert!(r.is_err());
    }

    #[test]
    fn attention_single_key_weight_is_one() {
        let mut c = cx();
        let cfg = MultiHeadConfig { n_heads: 2, d_model: 8, d_key: 4 };
        let attn: MultiHeadAttention<f64> = MultiHeadAttention::new(cfg, &mut c).unwrap();
        let mut sess = Session::eval(c.param_count());
        let q = sess.graph.constant(Tensor::matrix(1, 4, vec![0.3, -0.7, 1.1, 0.2]));
        let k = sess.graph.constant(Tensor::matrix(1, 4, vec![0.9, 0.1, -0.4, 0.5]));
        let v = sess.graph.constant(Tensor::matrix(1, 8, (0..8).map(|i| i as f64 * 0.1).collect()));
        let (_, weights) = attn.forward(&mut sess, q, k, v).unwrap();
        for w in weights {
            assert_eq!(sess.graph.data(w), &[1.0]);
        }
    }

    #[test]
    fn attention_identical_keys_split_evenly() {
        let mut c = cx();
        let cfg = MultiHeadConfig { n_heads: 2, d_model: 8, d_key: 4 };
        let attn: MultiHeadAttention<f64> = MultiHeadAttention::new(cfg, &mut c).unwrap();
        let mut sess = Session::eval(c.param_count());
        let q = sess.graph.constant(Tensor::matrix(1, 4, vec![0.3, -0.7, 1.1, 0.2]));
        let krow = vec![0.9, 0.1, -0.4, 0.5];
        let k = sess.graph.constant(Tensor::matrix(2, 4, [krow.clone(), krow].concat()));
        let v = sess.graph.constant(Tensor::matrix(2, 8, (0..16).map(|i| i as f64 * 0.1).collect()));
        let (_, weights) = attn.forward(&mut sess, q, k, v).unwrap();
        for w in weights {
            let d = sess.graph.data(w);
            assert!((d[0] - 0.5).abs() < 1e-12 && (d[1] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_empty_history() {
        let mut c = cx();
        let cfg = MultiHeadConfig { n_heads: 1, d_model: 4, d_key: 2 };
        let attn: MultiHeadAttention<f64> = MultiHeadAttention::new(cfg, &mut c).unwrap();
        let mut sess = Session::eval(c.param_count());
        let q = sess.graph.constant(Tensor::matrix(1, 2, vec![0.1, 0.2]));
        let k = sess.graph.constant(Tensor::new(vec![0, 2], vec![]));
        let v = sess.graph.constant(Tensor::new(vec![0, 4], vec![]));
        assert!(matches!(
            attn.forward(&mut sess, q, k, v),
            Err(AgaError::EmptyHistory)
        ));
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = MultiHeadConfig { n_heads: 3, d_model: 8, d_key: 4 };
        assert!(cfg.validate().is_err());
    }
}
