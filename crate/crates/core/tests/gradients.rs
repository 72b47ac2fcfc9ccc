//! Finite-difference verification of every differentiable operation and of
//! end-to-end sequence gradients, including gradients with respect to
//! injected guide vectors.

mod common;

use aga_core::model::{AgaConfig, AgaModel, GraphState, GuidanceMode};
use aga_core::tensor::{Graph, NodeId, Tensor};
use aga_core::train::sequence_loss;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

const OP_TOL: f64 = 1e-4;
const SEQ_TOL: f64 = 1e-3;
const INSTANCES: u64 = 10;

fn away_from_zero(t: &mut Tensor<f64>, margin: f64) {
    for v in t.data.iter_mut() {
        if v.abs() < margin {
            *v += if *v >= 0.0 { margin } else { -margin };
        }
    }
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, vec![3, 4], 1.5);
        let b = rand_tensor(&mut rng, vec![4, 2], 1.5);
        let mut g = Graph::new();
        let an = g.constant(a.clone());
        let bn = g.constant(b.clone());
        let c = g.matmul(an, bn).unwrap();
        let expect = matmul_oracle(&a.data, &b.data, 3, 4, 2);
        for (x, y) in g.data(c).iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = rand_tensor(&mut rng, vec![3, 4], 1.0);
        let b = rand_tensor(&mut rng, vec![4, 2], 1.0);
        fd_check(
            &[a, b],
            &|g, ids| {
                let c = g.matmul(ids[0], ids[1]).unwrap();
                weighted_scalar(g, c, 7)
            },
            0,
            OP_TOL,
            "matmul",
        );
    }
}

#[test]
fn matmul_nt_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let a = rand_tensor(&mut rng, vec![2, 5], 1.0);
        let b = rand_tensor(&mut rng, vec![3, 5], 1.0);
        fd_check(
            &[a, b],
            &|g, ids| {
                let c = g.matmul_nt(ids[0], ids[1]).unwrap();
                weighted_scalar(g, c, 8)
            },
            0,
            OP_TOL,
            "matmul_nt",
        );
    }
}

#[test]
fn elementwise_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let a = rand_tensor(&mut rng, vec![6], 2.0);
        let b = rand_tensor(&mut rng, vec![6], 2.0);
        fd_check(
            &[a.clone(), b.clone()],
            &|g, ids| {
                let s = g.add(ids[0], ids[1]).unwrap();
                let d = g.sub(s, ids[1]).unwrap();
                let m = g.mul(d, ids[1]).unwrap();
                weighted_scalar(g, m, 9)
            },
            0,
            OP_TOL,
            "add/sub/mul",
        );
        // scalar broadcast on both sides
        let s = rand_tensor(&mut rng, vec![1], 1.0);
        fd_check(
            &[a, s],
            &|g, ids| {
                let m = g.mul(ids[0], ids[1]).unwrap();
                let t = g.sub(ids[1], m).unwrap();
                weighted_scalar(g, t, 10)
            },
            0,
            OP_TOL,
            "scalar broadcast",
        );
    }
}

#[test]
fn activation_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let mut x = rand_tensor(&mut rng, vec![8], 2.0);
        away_from_zero(&mut x, 0.05);
        fd_check(
            &[x.clone()],
            &|g, ids| {
                let r = g.relu(ids[0]);
                weighted_scalar(g, r, 11)
            },
            0,
            OP_TOL,
            "relu",
        );
        fd_check(
            &[x.clone()],
            &|g, ids| {
                let r = g.gelu(ids[0]);
                weighted_scalar(g, r, 12)
            },
            0,
            OP_TOL,
            "gelu",
        );
        fd_check(
            &[x],
            &|g, ids| {
                let r = g.sigmoid(ids[0]);
                weighted_scalar(g, r, 13)
            },
            0,
            OP_TOL,
            "sigmoid",
        );
    }
}

#[test]
fn gelu_matches_reference_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_vec(&mut rng, 32, 3.0);
    let mut g = Graph::new();
    let xn = g.constant_vec(x.clone());
    let y = g.gelu(xn);
    for (a, &v) in g.data(y).iter().zip(&x) {
        assert!((a - gelu_oracle(v)).abs() < 1e-6);
    }
}

#[test]
fn softmax_matches_direct_evaluation_and_gradients() {
    let mut g = Graph::new();
    let x = g.constant_vec(vec![1.0, 2.0, 3.0]);
    let y = g.softmax(x, 0).unwrap();
    for (a, b) in g.data(y).iter().zip(softmax_oracle(&[1.0, 2.0, 3.0])) {
        assert!((a - b).abs() < 1e-12);
    }

    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let x = rand_tensor(&mut rng, vec![2, 5], 2.0);
        fd_check(
            &[x],
            &|g, ids| {
                let s = g.softmax(ids[0], 1).unwrap();
                weighted_scalar(g, s, 14)
            },
            0,
            OP_TOL,
            "softmax",
        );
    }
}

#[test]
fn norm_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let x = rand_tensor(&mut rng, vec![2, 6], 1.5);
        let gain = rand_tensor(&mut rng, vec![6], 1.0);
        let bias = rand_tensor(&mut rng, vec![6], 0.5);
        fd_check(
            &[x.clone(), gain.clone()],
            &|g, ids| {
                let y = g.rms_norm(ids[0], ids[1]).unwrap();
                weighted_scalar(g, y, 15)
            },
            0,
            OP_TOL,
            "rms_norm",
        );
        fd_check(
            &[x.clone(), gain.clone(), bias],
            &|g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2]).unwrap();
                weighted_scalar(g, y, 16)
            },
            0,
            OP_TOL,
            "layer_norm",
        );
        let sn = rand_tensor(&mut rng, vec![1], 2.0);
        fd_check(
            &[x, sn],
            &|g, ids| {
                let y = g.scale_norm(ids[0], ids[1]).unwrap();
                weighted_scalar(g, y, 17)
            },
            0,
            OP_TOL,
            "scale_norm",
        );
    }
}

#[test]
fn rms_norm_matches_hand_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = rand_vec(&mut rng, 16, 2.0);
    let gain = rand_vec(&mut rng, 16, 1.0);
    let mut g = Graph::new();
    let xn = g.constant_vec(x.clone());
    let gn = g.constant_vec(gain.clone());
    let y = g.rms_norm(xn, gn).unwrap();
    for (a, b) in g.data(y).iter().zip(rms_norm_oracle(&x, &gain)) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn structural_op_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let a = rand_tensor(&mut rng, vec![2, 3], 1.0);
        let b = rand_tensor(&mut rng, vec![2, 2], 1.0);
        let bias = rand_tensor(&mut rng, vec![3], 1.0);
        fd_check(
            &[a.clone(), b],
            &|g, ids| {
                let c = g.concat(&[ids[0], ids[1]], 1).unwrap();
                weighted_scalar(g, c, 18)
            },
            0,
            OP_TOL,
            "concat",
        );
        fd_check(
            &[a.clone(), bias],
            &|g, ids| {
                let c = g.add_bias(ids[0], ids[1]).unwrap();
                weighted_scalar(g, c, 19)
            },
            0,
            OP_TOL,
            "add_bias",
        );
        fd_check(
            &[a.clone()],
            &|g, ids| {
                let r = g.reshape(ids[0], vec![6]).unwrap();
                let s = g.scale(r, -1.7);
                weighted_scalar(g, s, 20)
            },
            0,
            OP_TOL,
            "reshape/scale",
        );
        let c = rand_tensor(&mut rng, vec![2, 3], 1.0);
        fd_check(
            &[a, c],
            &|g, ids| {
                let s = g.sum_n(&[ids[0], ids[1], ids[0]]).unwrap();
                weighted_scalar(g, s, 21)
            },
            0,
            OP_TOL,
            "sum_n",
        );
    }
}

#[test]
fn dropout_gradients_with_fixed_mask() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let x = rand_tensor(&mut rng, vec![10], 1.0);
        fd_check(
            &[x],
            &|g, ids| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(4242);
                let d = g.dropout(ids[0], 0.4, true, &mut mask_rng).unwrap();
                weighted_scalar(g, d, 22)
            },
            0,
            OP_TOL,
            "dropout",
        );
    }
}

#[test]
fn cross_entropy_matches_two_step_oracle_and_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let z = rand_vec(&mut rng, 7, 2.5);
        let target = rng.gen_range(0..7);
        let weight = rng.gen_range(0.2..2.0);
        let mut g = Graph::new();
        let zn = g.constant_vec(z.clone());
        let l = g.cross_entropy(zn, target, weight).unwrap();
        assert!((g.data(l)[0] - cross_entropy_oracle(&z, target, weight)).abs() < 1e-10);

        let zt = Tensor::vector(z);
        fd_check(
            &[zt],
            &|g, ids| g.cross_entropy(ids[0], target, weight).unwrap(),
            0,
            OP_TOL,
            "cross_entropy",
        );
    }
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = rand_tensor(&mut rng, vec![1, 5], 1.0);
        let w1 = rand_tensor(&mut rng, vec![5, 4], 1.0);
        let b1 = rand_tensor(&mut rng, vec![4], 0.5);
        let w2 = rand_tensor(&mut rng, vec![4, 3], 1.0);
        let b2 = rand_tensor(&mut rng, vec![3], 0.5);
        fd_check(
            &[x, w1, b1, w2, b2],
            &|g, ids| {
                let h = g.matmul(ids[0], ids[1]).unwrap();
                let h = g.add_bias(h, ids[2]).unwrap();
                let h = g.gelu(h);
                let o = g.matmul(h, ids[3]).unwrap();
                let o = g.add_bias(o, ids[4]).unwrap();
                let o = g.reshape(o, vec![3]).unwrap();
                g.cross_entropy(o, 1, 1.0).unwrap()
            },
            0,
            OP_TOL,
            "two-layer mlp",
        );
    }
}

// ── End-to-end sequence gradients ───────────────────────────────────────

fn small_model(seed: u64) -> AgaModel<f64> {
    let cfg = AgaConfig {
        queue_len: 3,
        n_c: 4,
        d_backbone: 5,
        d_model: 8,
        d_key: 4,
        n_heads: 2,
        dropout: 0.0,
        ..AgaConfig::desk_default()
    };
    AgaModel::new(cfg, seed).unwrap()
}

/// Loss of the final step's target log-probability over a short sequence.
fn episode_loss(model: &AgaModel<f64>, features: &[Vec<f64>], target: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let outs = model.forward_sequence(features, None, false, &mut rng).unwrap();
    let targets: Vec<Option<usize>> = (0..features.len())
        .map(|t| if t == features.len() - 1 { Some(target) } else { None })
        .collect();
    sequence_loss(&outs, &targets, &vec![1.0; model.cfg.n_c]).unwrap().data[0]
}

#[test]
fn sequence_parameter_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let mut model = small_model(seed);
        let t_len = 5;
        let features: Vec<Vec<f64>> = (0..t_len).map(|_| rand_vec(&mut rng, 5, 1.0)).collect();
        let target = rng.gen_range(0..4);

        // analytic gradients through one training-style session
        let mut sess = model.new_session(false, true, ChaCha8Rng::seed_from_u64(0));
        let steps = model
            .run_episode(&mut sess, &features, None, &Default::default())
            .unwrap();
        let loss = sess
            .graph
            .cross_entropy(steps.last().unwrap().logits, target, 1.0)
            .unwrap();
        sess.graph.backward(loss).unwrap();
        let analytic: Vec<Option<Vec<f64>>> = model
            .params()
            .iter()
            .map(|p| sess.bound(p).and_then(|n| sess.graph.grad(n)).map(|g| g.to_vec()))
            .collect();

        // probe a few coordinates of a few parameters
        let n_params = model.params().len();
        let mut probe_rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        for _ in 0..6 {
            let pi = probe_rng.gen_range(0..n_params);
            let Some(grad) = analytic[pi].clone() else { continue };
            let numel = grad.len();
            let j = probe_rng.gen_range(0..numel);
            let orig = model.params()[pi].tensor.data[j];
            model.params_mut()[pi].tensor.data[j] = orig + FD_H;
            let lp = episode_loss(&model, &features, target);
            model.params_mut()[pi].tensor.data[j] = orig - FD_H;
            let lm = episode_loss(&model, &features, target);
            model.params_mut()[pi].tensor.data[j] = orig;
            let fd = (lp - lm) / (2.0 * FD_H);
            assert!(
                rel_err(grad[j], fd) < SEQ_TOL,
                "seed {seed} param {pi} coord {j}: analytic {} vs fd {fd}",
                grad[j]
            );
        }
    }
}

#[test]
fn injected_guide_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let model = small_model(seed);
        let s = 3;
        let nc = model.cfg.n_c;
        let queue_e: Vec<Vec<f64>> = (0..s).map(|_| rand_vec(&mut rng, 8, 1.0)).collect();
        let e_t = rand_vec(&mut rng, 8, 1.0);
        let ema_base = rand_vec(&mut rng, nc, 0.3);
        let target = rng.gen_range(0..nc);
        let y: Vec<Tensor<f64>> = (0..s)
            .map(|_| Tensor::vector(rand_vec(&mut rng, nc, 0.5)))
            .collect();

        let alpha = model.cfg.alpha;
        let build = |g: &mut Graph<f64>, ids: &[NodeId]| -> NodeId {
            // splice the graph into a session so the model can bind params
            let mut sess = model.new_session(false, false, ChaCha8Rng::seed_from_u64(0));
            std::mem::swap(&mut sess.graph, g);
            let mut ema = sess.graph.constant_vec(ema_base.clone());
            for &yn in ids {
                let a = sess.graph.scale(yn, alpha);
                let b = sess.graph.scale(ema, 1.0 - alpha);
                ema = sess.graph.add(a, b).unwrap();
            }
            let queue: VecDeque<_> = queue_e
                .iter()
                .zip(ids)
                .map(|(e, &yn)| (sess.graph.constant_vec(e.clone()), yn))
                .collect();
            let mut gs = GraphState { queue, ema, t: s };
            let et = sess.graph.constant_vec(e_t.clone());
            let nodes = model
                .step_nodes(&mut sess, &mut gs, et, None, GuidanceMode::SelfPredFull, false)
                .unwrap();
            let loss = sess.graph.cross_entropy(nodes.logits, target, 1.0).unwrap();
            std::mem::swap(&mut sess.graph, g);
            loss
        };
        fd_check(&y, &build, 0, SEQ_TOL, "injected guides");
    }
}
