//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The graph is built define-by-run: every operation appends a node holding
//! the result values plus an op record naming its inputs, so nodes are in
//! topological order by construction. [`Graph::backward`] walks the node list
//! in reverse and accumulates gradients into every node that requires them.
//!
//! Broadcasting in the elementwise ops is deliberately narrow: shapes must be
//! identical, or one side must be a single-element tensor. Row-broadcast of a
//! bias vector has its own op ([`Graph::add_bias`]).

use crate::error::{AgaError, Result};
use crate::scalar::{fc, Scalar};
use rand::Rng;

const RMS_NORM_EPS: f64 = 1e-6;
const LAYER_NORM_EPS: f64 = 1e-5;
const SCALE_NORM_EPS: f64 = 1e-6;
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC_COEF: f64 = 0.044_715;

/// Dense real-valued tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length must equal the product of the shape"
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![F::zero(); n])
    }

    pub fn scalar(v: F) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn vector(data: Vec<F>) -> Self {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    /// a[m,k] * b[n,k]^T
    MatMulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: F },
    AddBias { x: NodeId, bias: NodeId },
    Relu { x: NodeId },
    Gelu { x: NodeId },
    Sigmoid { x: NodeId },
    Softmax { x: NodeId, axis: usize },
    RmsNorm { x: NodeId, gain: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    ScaleNorm { x: NodeId, g: NodeId },
    Dropout { x: NodeId, mask: Vec<F> },
    Concat { parts: Vec<NodeId>, axis: usize },
    Reshape { x: NodeId },
    SumN { parts: Vec<NodeId> },
    CrossEntropy { logits: NodeId, target: usize, weight: F },
}

/// Define-by-run computation graph.
pub struct Graph<F> {
    nodes: Vec<Tensor<F>>,
    ops: Vec<Op<F>>,
    nonfinite: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            ops: Vec::new(),
            nonfinite: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True if any op ever produced a non-finite value in this graph.
    pub fn saw_nonfinite(&self) -> bool {
        self.nonfinite
    }

    pub fn leaf(&mut self, t: Tensor<F>) -> NodeId {
        self.push_node(t, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> NodeId {
        let mut t = t;
        t.requires_grad = false;
        self.push_node(t, Op::Leaf)
    }

    pub fn constant_vec(&mut self, data: Vec<F>) -> NodeId {
        self.constant(Tensor::vector(data))
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> NodeId {
        self.constant(Tensor::zeros(shape))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push_node(&mut self, t: Tensor<F>, op: Op<F>) -> NodeId {
        if !self.nonfinite && !t.is_finite() {
            self.nonfinite = true;
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(t);
        self.ops.push(op);
        id
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<F>, requires_grad: bool, op: Op<F>) -> NodeId {
        let mut t = Tensor::new(shape, data);
        t.requires_grad = requires_grad;
        self.push_node(t, op)
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Forward operations ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AgaError::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = mm(self.data(a), self.data(b), m, k, n);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push_op(vec![m, n], data, rg, Op::MatMul { a, b }))
    }

    /// `a[m,k] * b[n,k]^T -> [m,n]` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(AgaError::shape("matmul_nt", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let data = mm_nt(self.data(a), self.data(b), m, k, n);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push_op(vec![m, n], data, rg, Op::MatMulNT { a, b }))
    }

    fn elementwise(
        &mut self,
        name: &str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let (da, db) = (self.data(a), self.data(b));
        let n = out_shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let x = if da.len() == 1 { da[0] } else { da[i] };
            let y = if db.len() == 1 { db[0] } else { db[i] };
            data.push(f(x, y));
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push_op(out_shape, data, rg, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let shape = self.shape(a).to_vec();
        let data: Vec<F> = self.data(a).iter().map(|&x| x * c).collect();
        let rg = self.needs_grad(&[a]);
        self.push_op(shape, data, rg, Op::Scale { a, c })
    }

    /// Add a bias vector to every row of a 2-D tensor (or to a 1-D tensor).
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        let d = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != d || sx.is_empty() || sx.len() > 2 {
            return Err(AgaError::shape("add_bias", &sx, &sb));
        }
        let b = self.data(bias).to_vec();
        let data: Vec<F> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % d])
            .collect();
        let rg = self.needs_grad(&[x, bias]);
        Ok(self.push_op(sx, data, rg, Op::AddBias { x, bias }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let data: Vec<F> = self
            .data(x)
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let rg = self.needs_grad(&[x]);
        self.push_op(shape, data, rg, Op::Relu { x })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let data: Vec<F> = self.data(x).iter().map(|&v| gelu_tanh(v)).collect();
        let rg = self.needs_grad(&[x]);
        self.push_op(shape, data, rg, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let data: Vec<F> = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.needs_grad(&[x]);
        self.push_op(shape, data, rg, Op::Sigmoid { x })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(AgaError::invalid(
                "softmax axis",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let data = lanes_map(self.data(x), &shape, axis, |lane, out| {
            let mut max = lane[0];
            for &v in lane.iter() {
                if v > max {
                    max = v;
                }
            }
            let mut sum = F::zero();
            for (o, &v) in out.iter_mut().zip(lane.iter()) {
                *o = (v - max).exp();
                sum = sum + *o;
            }
            for o in out.iter_mut() {
                *o = *o / sum;
            }
        });
        let rg = self.needs_grad(&[x]);
        Ok(self.push_op(shape, data, rg, Op::Softmax { x, axis }))
    }

    /// RMS normalization over the last axis with a learnable gain.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let (sx, sg) = (self.shape(x).to_vec(), self.shape(gain).to_vec());
        let d = *sx.last().unwrap_or(&0);
        if sg.len() != 1 || sg[0] != d || d == 0 {
            return Err(AgaError::shape("rms_norm", &sx, &sg));
        }
        let g = self.data(gain).to_vec();
        let eps = fc::<F>(RMS_NORM_EPS);
        let data = rows_map(self.data(x), d, |row, out| {
            let ms = row.iter().map(|&v| v * v).sum::<F>() / fc::<F>(d as f64);
            let r = (ms + eps).sqrt().recip();
            for (j, o) in out.iter_mut().enumerate() {
                *o = row[j] * r * g[j];
            }
        });
        let rg = self.needs_grad(&[x, gain]);
        Ok(self.push_op(sx, data, rg, Op::RmsNorm { x, gain }))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sg) = (self.shape(x).to_vec(), self.shape(gain).to_vec());
        let d = *sx.last().unwrap_or(&0);
        if sg.len() != 1 || sg[0] != d || self.shape(bias) != [d] || d == 0 {
            return Err(AgaError::shape("layer_norm", &sx, &sg));
        }
        let g = self.data(gain).to_vec();
        let b = self.data(bias).to_vec();
        let eps = fc::<F>(LAYER_NORM_EPS);
        let inv_d = fc::<F>(1.0 / d as f64);
        let data = rows_map(self.data(x), d, |row, out| {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let s = (var + eps).sqrt().recip();
            for (j, o) in out.iter_mut().enumerate() {
                *o = (row[j] - mean) * s * g[j] + b[j];
            }
        });
        let rg = self.needs_grad(&[x, gain, bias]);
        Ok(self.push_op(sx, data, rg, Op::LayerNorm { x, gain, bias }))
    }

    /// `g * x / ||x||` over the last axis with a scalar learnable `g`.
    pub fn scale_norm(&mut self, x: NodeId, g: NodeId) -> Result<NodeId> {
        let (sx, sg) = (self.shape(x).to_vec(), self.shape(g).to_vec());
        let d = *sx.last().unwrap_or(&0);
        if sg != [1] || d == 0 {
            return Err(AgaError::shape("scale_norm", &sx, &sg));
        }
        let gv = self.data(g)[0];
        let eps = fc::<F>(SCALE_NORM_EPS);
        let data = rows_map(self.data(x), d, |row, out| {
            let n2 = row.iter().map(|&v| v * v).sum::<F>();
            let r = (n2 + eps).sqrt().recip();
            for (j, o) in out.iter_mut().enumerate() {
                *o = gv * row[j] * r;
            }
        });
        let rg = self.needs_grad(&[x, g]);
        Ok(self.push_op(sx, data, rg, Op::ScaleNorm { x, g }))
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// `1/(1-rate)` in training mode; identity in eval mode.
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeId,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AgaError::invalid(
                "dropout rate",
                format!("{rate} not in [0, 1)"),
            ));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = fc::<F>(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.data(x).len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    F::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let data: Vec<F> = self
            .data(x)
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| v * m)
            .collect();
        let rg = self.needs_grad(&[x]);
        Ok(self.push_op(shape, data, rg, Op::Dropout { x, mask }))
    }

    /// Concatenate tensors along `axis`. All other extents must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(AgaError::EmptyInput);
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(AgaError::invalid(
                "concat axis",
                format!("axis {axis} out of range for shape {first:?}"),
            ));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(AgaError::shape("concat", &first, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(total);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let src = self.data(p);
                let start = o * ext * inner;
                data.extend_from_slice(&src[start..start + ext * inner]);
            }
        }
        let rg = self.needs_grad(parts);
        Ok(self.push_op(
            out_shape,
            data,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Stack 1-D vectors of equal length into a matrix, one row each.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(AgaError::EmptyInput);
        }
        let d = self.shape(rows[0]).to_vec();
        if d.len() != 1 {
            return Err(AgaError::shape("stack_rows", &d, &d));
        }
        let reshaped: Vec<NodeId> = rows
            .iter()
            .map(|&r| self.reshape(r, vec![1, self.shape(r)[0]]))
            .collect::<Result<_>>()?;
        self.concat(&reshaped, 0)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if shape.iter().product::<usize>() != sx.iter().product::<usize>() {
            return Err(AgaError::shape("reshape", &sx, &shape));
        }
        let data = self.data(x).to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push_op(shape, data, rg, Op::Reshape { x }))
    }

    /// Elementwise sum of same-shaped tensors.
    pub fn sum_n(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(AgaError::EmptyInput);
        }
        let shape = self.shape(parts[0]).to_vec();
        for &p in parts {
            if self.shape(p) != shape {
                return Err(AgaError::shape("sum_n", &shape, self.shape(p)));
            }
        }
        let mut data = vec![F::zero(); shape.iter().product()];
        for &p in parts {
            for (o, &v) in data.iter_mut().zip(self.data(p).iter()) {
                *o = *o + v;
            }
        }
        let rg = self.needs_grad(parts);
        Ok(self.push_op(
            shape,
            data,
            rg,
            Op::SumN {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Class-weighted cross-entropy of a 1-D logit vector against a target
    /// class index: `weight * (logsumexp(logits) - logits[target])`.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize, weight: F) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 1 {
            return Err(AgaError::shape("cross_entropy", &s, &[s.iter().product()]));
        }
        if target >= s[0] {
            return Err(AgaError::IndexOutOfRange {
                index: target,
                n_classes: s[0],
            });
        }
        if weight <= F::zero() {
            return Err(AgaError::invalid("class weight", "must be positive"));
        }
        let z = self.data(logits);
        let lse = log_sum_exp(z);
        let loss = weight * (lse - z[target]);
        let rg = self.needs_grad(&[logits]);
        Ok(self.push_op(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                target,
                weight,
            },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss node. Populates `grad` on every
    /// node that requires gradients. Deterministic given the graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(AgaError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; n];
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.ops[idx].clone();
            self.propagate(&op, idx, &g, &mut grads);
            self.nodes[idx].grad = Some(g);
        }
        // Leaves with no path to the loss saw zero gradient flow.
        for idx in 0..=loss.0 {
            if self.nodes[idx].requires_grad && self.nodes[idx].grad.is_none() {
                let n = self.nodes[idx].numel();
                self.nodes[idx].grad = Some(vec![F::zero(); n]);
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op<F>, out_idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let acc = |grads: &mut [Option<Vec<F>>], id: NodeId, contrib: Vec<F>| {
            let slot = grads[id.0].get_or_insert_with(|| vec![F::zero(); contrib.len()]);
            for (s, c) in slot.iter_mut().zip(contrib) {
                *s = *s + c;
            }
        };
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;

        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if rg(*a) {
                    // dA = dC * B^T
                    acc(grads, *a, mm_nt(g, self.data(*b), m, n, k));
                }
                if rg(*b) {
                    // dB = A^T * dC
                    acc(grads, *b, mm_tn(self.data(*a), g, m, k, n));
                }
            }
            Op::MatMulNT { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if rg(*a) {
                    // dA = dC * B
                    acc(grads, *a, mm(g, self.data(*b), m, n, k));
                }
                if rg(*b) {
                    // dB = dC^T * A
                    acc(grads, *b, mm_tn(g, self.data(*a), m, n, k));
                }
            }
            Op::Add { a, b } => {
                if rg(*a) {
                    acc(grads, *a, reduce_to(g, self.nodes[a.0].numel()));
                }
                if rg(*b) {
                    acc(grads, *b, reduce_to(g, self.nodes[b.0].numel()));
                }
            }
            Op::Sub { a, b } => {
                if rg(*a) {
                    acc(grads, *a, reduce_to(g, self.nodes[a.0].numel()));
                }
                if rg(*b) {
                    let neg: Vec<F> = g.iter().map(|&v| -v).collect();
                    acc(grads, *b, reduce_to(&neg, self.nodes[b.0].numel()));
                }
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                if rg(*a) {
                    let contrib: Vec<F> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| v * if db.len() == 1 { db[0] } else { db[i] })
                        .collect();
                    acc(grads, *a, reduce_to(&contrib, da.len()));
                }
                if rg(*b) {
                    let contrib: Vec<F> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| v * if da.len() == 1 { da[0] } else { da[i] })
                        .collect();
                    acc(grads, *b, reduce_to(&contrib, db.len()));
                }
            }
            Op::Scale { a, c } => {
                if rg(*a) {
                    acc(grads, *a, g.iter().map(|&v| v * *c).collect());
                }
            }
            Op::AddBias { x, bias } => {
                let d = self.nodes[bias.0].numel();
                if rg(*x) {
                    acc(grads, *x, g.to_vec());
                }
                if rg(*bias) {
                    let mut db = vec![F::zero(); d];
                    for (i, &v) in g.iter().enumerate() {
                        db[i % d] = db[i % d] + v;
                    }
                    acc(grads, *bias, db);
                }
            }
            Op::Relu { x } => {
                if rg(*x) {
                    let dx: Vec<F> = self.data(*x)
                        .iter()
                        .zip(g.iter())
                        .map(|(&v, &gv)| if v > F::zero() { gv } else { F::zero() })
                        .collect();
                    acc(grads, *x, dx);
                }
            }
            Op::Gelu { x } => {
                if rg(*x) {
                    let dx: Vec<F> = self.data(*x)
                        .iter()
                        .zip(g.iter())
                        .map(|(&v, &gv)| gv * gelu_tanh_grad(v))
                        .collect();
                    acc(grads, *x, dx);
                }
            }
            Op::Sigmoid { x } => {
                if rg(*x) {
                    let y = &self.nodes[out_idx].data;
                    let dx: Vec<F> = y
                        .iter()
                        .zip(g.iter())
                        .map(|(&s, &gv)| gv * s * (F::one() - s))
                        .collect();
                    acc(grads, *x, dx);
                }
            }
            Op::Softmax { x, axis } => {
                if rg(*x) {
                    let y = &self.nodes[out_idx].data;
                    let shape = &self.nodes[out_idx].shape;
                    let dx = lanes_backward(y, g, shape, *axis, |ylane, glane, out| {
                        let dot = ylane
                            .iter()
                            .zip(glane.iter())
                            .map(|(&a, &b)| a * b)
                            .sum::<F>();
                        for ((o, &yv), &gv) in out.iter_mut().zip(ylane.iter()).zip(glane.iter()) {
                            *o = yv * (gv - dot);
                        }
                    });
                    acc(grads, *x, dx);
                }
            }
            Op::RmsNorm { x, gain } => {
                let d = self.nodes[gain.0].numel();
                let xd = self.data(*x);
                let gd = self.data(*gain);
                let eps = fc::<F>(RMS_NORM_EPS);
                let inv_d = fc::<F>(1.0 / d as f64);
                let rows = xd.len() / d;
                if rg(*x) {
                    let mut dx = vec![F::zero(); xd.len()];
                    for r in 0..rows {
                        let row = &xd[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let ms = row.iter().map(|&v| v * v).sum::<F>() * inv_d;
                        let rinv = (ms + eps).sqrt().recip();
                        let dot = (0..d).map(|j| grow[j] * gd[j] * row[j]).sum::<F>();
                        let r3 = rinv * rinv * rinv;
                        for j in 0..d {
                            dx[r * d + j] = rinv * gd[j] * grow[j] - r3 * row[j] * inv_d * dot;
                        }
                    }
                    acc(grads, *x, dx);
                }
                if rg(*gain) {
                    let mut dg = vec![F::zero(); d];
                    for r in 0..rows {
                        let row = &xd[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let ms = row.iter().map(|&v| v * v).sum::<F>() * inv_d;
                        let rinv = (ms + eps).sqrt().recip();
                        for j in 0..d {
                            dg[j] = dg[j] + grow[j] * row[j] * rinv;
                        }
                    }
                    acc(grads, *gain, dg);
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let d = self.nodes[gain.0].numel();
                let xd = self.data(*x);
                let gd = self.data(*gain);
                let eps = fc::<F>(LAYER_NORM_EPS);
                let inv_d = fc::<F>(1.0 / d as f64);
                let rows = xd.len() / d;
                let mut dx = vec![F::zero(); xd.len()];
                let mut dgain = vec![F::zero(); d];
                let mut dbias = vec![F::zero(); d];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mean = row.iter().copied().sum::<F>() * inv_d;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
                    let s = (var + eps).sqrt().recip();
                    let xhat: Vec<F> = row.iter().map(|&v| (v - mean) * s).collect();
                    let ghat: Vec<F> = (0..d).map(|j| grow[j] * gd[j]).collect();
                    let mean_g = ghat.iter().copied().sum::<F>() * inv_d;
                    let mean_gx = (0..d).map(|j| ghat[j] * xhat[j]).sum::<F>() * inv_d;
                    for j in 0..d {
                        dx[r * d + j] = s * (ghat[j] - mean_g - xhat[j] * mean_gx);
                        dgain[j] = dgain[j] + grow[j] * xhat[j];
                        dbias[j] = dbias[j] + grow[j];
                    }
                }
                if rg(*x) {
                    acc(grads, *x, dx);
                }
                if rg(*gain) {
                    acc(grads, *gain, dgain);
                }
                if rg(*bias) {
                    acc(grads, *bias, dbias);
                }
            }
            Op::ScaleNorm { x, g: gn } => {
                let xd = self.data(*x);
                let d = *self.nodes[x.0].shape.last().unwrap();
                let gv = self.data(*gn)[0];
                let eps = fc::<F>(SCALE_NORM_EPS);
                let rows = xd.len() / d;
                let mut dx = vec![F::zero(); xd.len()];
                let mut dg = F::zero();
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let n2 = row.iter().map(|&v| v * v).sum::<F>();
                    let rinv = (n2 + eps).sqrt().recip();
                    let dot = (0..d).map(|j| grow[j] * row[j]).sum::<F>();
                    let r3 = rinv * rinv * rinv;
                    for j in 0..d {
                        dx[r * d + j] = gv * (rinv * grow[j] - r3 * row[j] * dot);
                    }
                    dg = dg + dot * rinv;
                }
                if rg(*x) {
                    acc(grads, *x, dx);
                }
                if rg(*gn) {
                    acc(grads, *gn, vec![dg]);
                }
            }
            Op::Dropout { x, mask } => {
                if rg(*x) {
                    let dx: Vec<F> = g.iter().zip(mask.iter()).map(|(&gv, &m)| gv * m).collect();
                    acc(grads, *x, dx);
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = &self.nodes[out_idx].shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_axis = out_shape[*axis];
                let mut offset = 0usize;
                for &p in parts {
                    let ext = self.nodes[p.0].shape[*axis];
                    if rg(p) {
                        let mut dp = Vec::with_capacity(ext * inner * outer);
                        for o in 0..outer {
                            let start = (o * total_axis + offset) * inner;
                            dp.extend_from_slice(&g[start..start + ext * inner]);
                        }
                        acc(grads, p, dp);
                    }
                    offset += ext;
                }
            }
            Op::Reshape { x } => {
                if rg(*x) {
                    acc(grads, *x, g.to_vec());
                }
            }
            Op::SumN { parts } => {
                for &p in parts {
                    if rg(p) {
                        acc(grads, p, g.to_vec());
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                weight,
            } => {
                if rg(*logits) {
                    let z = self.data(*logits);
                    let sm = softmax_vec(z);
                    let gv = g[0] * *weight;
                    let dz: Vec<F> = sm
                        .iter()
                        .enumerate()
                        .map(|(i, &p)| {
                            let t = if i == *target { F::one() } else { F::zero() };
                            gv * (p - t)
                        })
                        .collect();
                    acc(grads, *logits, dz);
                }
            }
        }
    }
}

// ── Raw kernels and helpers ─────────────────────────────────────────────

/// `a[m,k] * b[k,n]`.
pub fn mm<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a[m,k] * b[n,k]^T`.
fn mm_nt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = F::zero();
            for (av, bv) in arow.iter().zip(brow.iter()) {
                s = s + *av * *bv;
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// `a[m,k]^T * b[m,n] -> [k,n]`.
fn mm_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn broadcast_shape(op: &str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (na, nb) = (a.iter().product::<usize>(), b.iter().product::<usize>());
    if a == b {
        Ok(a.to_vec())
    } else if na == 1 {
        Ok(b.to_vec())
    } else if nb == 1 {
        Ok(a.to_vec())
    } else {
        Err(AgaError::shape(op, a, b))
    }
}

/// Sum a broadcast gradient back down to a scalar when needed.
fn reduce_to<F: Scalar>(g: &[F], target_numel: usize) -> Vec<F> {
    if g.len() == target_numel {
        g.to_vec()
    } else {
        debug_assert_eq!(target_numel, 1);
        vec![g.iter().copied().sum::<F>()]
    }
}

/// Apply `f` to each lane along `axis`, gathering/scattering strided lanes.
fn lanes_map<F: Scalar>(
    data: &[F],
    shape: &[usize],
    axis: usize,
    f: impl Fn(&[F], &mut [F]),
) -> Vec<F> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![F::zero(); data.len()];
    let mut lane = vec![F::zero(); len];
    let mut lane_out = vec![F::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, l) in lane.iter_mut().enumerate() {
                *l = data[(o * len + j) * inner + i];
            }
            f(&lane, &mut lane_out);
            for (j, &l) in lane_out.iter().enumerate() {
                out[(o * len + j) * inner + i] = l;
            }
        }
    }
    out
}

fn lanes_backward<F: Scalar>(
    y: &[F],
    g: &[F],
    shape: &[usize],
    axis: usize,
    f: impl Fn(&[F], &[F], &mut [F]),
) -> Vec<F> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![F::zero(); y.len()];
    let mut ylane = vec![F::zero(); len];
    let mut glane = vec![F::zero(); len];
    let mut olane = vec![F::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..len {
                ylane[j] = y[(o * len + j) * inner + i];
                glane[j] = g[(o * len + j) * inner + i];
            }
            f(&ylane, &glane, &mut olane);
            for (j, &v) in olane.iter().enumerate() {
                out[(o * len + j) * inner + i] = v;
            }
        }
    }
    out
}

/// Apply `f` per contiguous row of width `d`.
fn rows_map<F: Scalar>(data: &[F], d: usize, f: impl Fn(&[F], &mut [F])) -> Vec<F> {
    let rows = data.len() / d;
    let mut out = vec![F::zero(); data.len()];
    for r in 0..rows {
        let (src, dst) = (&data[r * d..(r + 1) * d], &mut out[r * d..(r + 1) * d]);
        f(src, dst);
    }
    out
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn gelu_tanh<F: Scalar>(x: F) -> F {
    let c = fc::<F>(GELU_SQRT_2_OVER_PI);
    let a = fc::<F>(GELU_CUBIC_COEF);
    let half = fc::<F>(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_tanh_grad<F: Scalar>(x: F) -> F {
    let c = fc::<F>(GELU_SQRT_2_OVER_PI);
    let a = fc::<F>(GELU_CUBIC_COEF);
    let half = fc::<F>(0.5);
    let three = fc::<F>(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + three * a * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

fn log_sum_exp<F: Scalar>(z: &[F]) -> F {
    let mut max = z[0];
    for &v in z.iter() {
        if v > max {
            max = v;
        }
    }
    let sum = z.iter().map(|&v| (v - max).exp()).sum::<F>();
    max + sum.ln()
}

fn softmax_vec<F: Scalar>(z: &[F]) -> Vec<F> {
    let mut max = z[0];
    for &v in z.iter() {
        if v > max {
            max = v;
        }
    }
    let exps: Vec<F> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().copied().sum::<F>();
    exps.into_iter().map(|e| e / sum).collect()
}
