//! Shared test utilities: independent oracles and a central finite-difference
//! gradient checker. Everything here stays independent of the graph engine's
//! backward rules.

#![allow(dead_code)]

use aga_core::tensor::{Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_H: f64 = 1e-5;

/// Relative error with a floor so near-zero gradients compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Sum every element of a node into a scalar, weighting each element by a
/// fixed pseudo-random coefficient so all components influence the loss.
pub fn weighted_scalar(g: &mut Graph<f64>, id: NodeId, seed: u64) -> NodeId {
    let n = g.value(id).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let flat = g.reshape(id, vec![n]).unwrap();
    let wid = g.constant_vec(w);
    let prod = g.mul(flat, wid).unwrap();
    let row = g.reshape(prod, vec![1, n]).unwrap();
    let ones = g.constant(Tensor::matrix(n, 1, vec![1.0; n]));
    let s = g.matmul(row, ones).unwrap();
    g.reshape(s, vec![1]).unwrap()
}

/// Check analytic gradients of `build` against central finite differences.
/// `build` must deterministically map leaf nodes to a scalar loss.
/// At most `max_coords` coordinates per input are probed (all when 0).
pub fn fd_check(
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    max_coords: usize,
    tol: f64,
    label: &str,
) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_grad()))
        .collect();
    let loss = build(&mut g, &ids);
    assert_eq!(g.value(loss).numel(), 1, "{label}: loss must be scalar");
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).expect("leaf gradient").to_vec())
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &ids);
        g.data(loss)[0]
    };

    let mut coord_rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if max_coords == 0 || n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| coord_rng.gen_range(0..n)).collect()
        };
        for j in coords {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += FD_H;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= FD_H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
            let a = analytic[i][j];
            assert!(
                rel_err(a, fd) < tol,
                "{label}: input {i} coord {j}: analytic {a} vs fd {fd}"
            );
        }
    }
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..=scale)).collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, rand_vec(rng, n, scale))
}

// ── Independent oracles ─────────────────────────────────────────────────

/// Plain triple-loop matrix product.
pub fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Reference tanh-form GELU.
pub fn gelu_oracle(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Direct exp/sum softmax.
pub fn softmax_oracle(x: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Hand-evaluated RMS normalization.
pub fn rms_norm_oracle(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * r * g).collect()
}

/// Two-step cross-entropy: -log softmax(logits)[target], weighted.
pub fn cross_entropy_oracle(logits: &[f64], target: usize, weight: f64) -> f64 {
    let sm = softmax_oracle(logits);
    -weight * sm[target].ln()
}

/// Loop-based evaluation of one attention head over explicit projection
/// matrices: weights = softmax(qW_q (kW_k)^T / sqrt(d_head)), out = weights (vW_v).
pub struct HeadOracle {
    pub weights: Vec<f64>,
    pub out: Vec<f64>,
}

pub fn attention_head_oracle(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    s: usize,
    d_key: usize,
    d_model: usize,
    d_head_key: usize,
    d_head_val: usize,
) -> HeadOracle {
    let qh = matmul_oracle(q, wq, 1, d_key, d_head_key);
    let kh = matmul_oracle(k, wk, s, d_key, d_head_key);
    let vh = matmul_oracle(v, wv, s, d_model, d_head_val);
    let mut scores = vec![0.0; s];
    for r in 0..s {
        let mut dot = 0.0;
        for c in 0..d_head_key {
            dot += qh[c] * kh[r * d_head_key + c];
        }
        scores[r] = dot / (d_head_key as f64).sqrt();
    }
    let weights = softmax_oracle(&scores);
    let mut out = vec![0.0; d_head_val];
    for (r, w) in weights.iter().enumerate() {
        for c in 0..d_head_val {
            out[c] += w * vh[r * d_head_val + c];
        }
    }
    HeadOracle { weights, out }
}
