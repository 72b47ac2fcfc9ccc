//! Trainer contracts: determinism, schedule no-ops, loss equivalences, and
//! divergence handling.

mod common;

use aga_core::data::{generate_dataset, TaskSpec, TrainEpisode};
use aga_core::error::AgaError;
use aga_core::model::{AgaConfig, AgaModel};
use aga_core::train::{sequence_loss, sequence_loss_nodes, train, TrainConfig};
use common::rand_vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_task() -> TaskSpec {
    let mut spec = TaskSpec::desk_default(3);
    spec.t = 12;
    spec
}

fn small_cfg() -> AgaConfig {
    AgaConfig {
        queue_len: 6,
        d_model: 16,
        d_key: 8,
        n_heads: 2,
        dropout: 0.1,
        ..AgaConfig::desk_default()
    }
}

fn episodes(n: usize) -> Vec<TrainEpisode> {
    generate_dataset(&small_task(), n, 0)
        .unwrap()
        .iter()
        .map(TrainEpisode::from_synthetic)
        .collect()
}

fn params_of(model: &AgaModel<f64>) -> Vec<Vec<f64>> {
    model.params().iter().map(|p| p.tensor.data.clone()).collect()
}

#[test]
fn zero_learning_rate_and_decay_change_nothing() {
    let data = episodes(6);
    let mut model = AgaModel::new(small_cfg(), 1).unwrap();
    let before = params_of(&model);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        lr_peak: 0.0,
        lr_min: 0.0,
        weight_decay: 0.0,
        seed: 5,
        ..TrainConfig::default()
    };
    train(&mut model, &data, None, &cfg, &mut |_, _, _| Ok(())).unwrap();
    assert_eq!(before, params_of(&model));
}

#[test]
fn same_seed_training_is_bit_identical() {
    let data = episodes(8);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = AgaModel::new(small_cfg(), 2).unwrap();
        let report = train(&mut model, &data, None, &cfg, &mut |_, _, _| Ok(())).unwrap();
        (params_of(&model), report.epochs.iter().map(|e| e.mean_loss).collect::<Vec<_>>())
    };
    let (p1, l1) = run();
    let (p2, l2) = run();
    assert_eq!(p1, p2);
    assert_eq!(l1, l2);
}

#[test]
fn short_training_reduces_loss() {
    let data = episodes(16);
    let mut model = AgaModel::new(small_cfg(), 3).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 8,
        lr_peak: 1e-3,
        seed: 11,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &data, None, &cfg, &mut |_, _, _| Ok(())).unwrap();
    assert!(
        report.final_loss() < report.initial_loss(),
        "loss {} -> {}",
        report.initial_loss(),
        report.final_loss()
    );
}

#[test]
fn absurd_learning_rate_aborts_with_divergence_snapshot() {
    let data = episodes(6);
    let mut model = AgaModel::new(small_cfg(), 4).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 3,
        lr_peak: 1e18,
        grad_clip: 1e18,
        seed: 13,
        ..TrainConfig::default()
    };
    match train(&mut model, &data, None, &cfg, &mut |_, _, _| Ok(())) {
        Err(AgaError::Diverged { loss, .. }) => assert!(!loss.is_finite()),
        other => panic!("expected divergence abort, got {other:?}"),
    }
}

#[test]
fn graph_loss_equals_value_loss() {
    let model = AgaModel::new(small_cfg(), 5).unwrap();
    let data = episodes(3);
    let weights = vec![1.0; model.cfg.n_c];
    for ep in &data {
        let mut sess = model.new_session(false, true, ChaCha8Rng::seed_from_u64(0));
        let steps = model
            .run_episode(&mut sess, &ep.features, Some(&ep.labels), &Default::default())
            .unwrap();
        let node = sequence_loss_nodes(&mut sess, &steps, &ep.targets, &weights, false).unwrap();
        let graph_loss = sess.graph.data(node)[0];

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let outs = model
            .forward_sequence(&ep.features, Some(&ep.labels), false, &mut rng)
            .unwrap();
        let value_loss = sequence_loss(&outs, &ep.targets, &weights).unwrap().data[0];
        assert!(
            (graph_loss - value_loss).abs() < 1e-12,
            "{graph_loss} vs {value_loss}"
        );
    }
}

#[test]
fn unit_weights_match_unweighted_mean_cross_entropy() {
    let model = AgaModel::new(small_cfg(), 6).unwrap();
    let ep = &episodes(1)[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let outs = model
        .forward_sequence(&ep.features, Some(&ep.labels), false, &mut rng)
        .unwrap();
    let weights = vec![1.0; model.cfg.n_c];
    let weighted = sequence_loss(&outs, &ep.targets, &weights).unwrap().data[0];

    let mut sum = 0.0;
    let mut n = 0usize;
    for (t, tgt) in ep.targets.iter().enumerate() {
        if let Some(c) = tgt {
            sum += -outs[t].prediction[*c].ln();
            n += 1;
        }
    }
    assert!((weighted - sum / n as f64).abs() < 1e-12);
}

#[test]
fn weighted_loss_matches_per_step_recomputation() {
    let model = AgaModel::new(small_cfg(), 7).unwrap();
    let ep = &episodes(2)[1];
    let mut wrng = ChaCha8Rng::seed_from_u64(21);
    let weights: Vec<f64> = (0..model.cfg.n_c)
        .map(|_| rand_vec(&mut wrng, 1, 0.0)[0].abs() + 0.5)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let outs = model
        .forward_sequence(&ep.features, Some(&ep.labels), false, &mut rng)
        .unwrap();
    let got = sequence_loss(&outs, &ep.targets, &weights).unwrap().data[0];

    let mut sum = 0.0;
    let mut n = 0usize;
    for (t, tgt) in ep.targets.iter().enumerate() {
        if let Some(c) = tgt {
            sum += weights[*c] * -outs[t].prediction[*c].ln();
            n += 1;
        }
    }
    assert!((got - sum / n as f64).abs() < 1e-12);
}

#[test]
fn final_only_supervision_uses_last_target() {
    let model = AgaModel::new(small_cfg(), 8).unwrap();
    let ep = &episodes(1)[0];
    let weights = vec![1.0; model.cfg.n_c];
    let mut sess = model.new_session(false, false, ChaCha8Rng::seed_from_u64(0));
    let steps = model
        .run_episode(&mut sess, &ep.features, Some(&ep.labels), &Default::default())
        .unwrap();
    let node = sequence_loss_nodes(&mut sess, &steps, &ep.targets, &weights, true).unwrap();
    let got = sess.graph.data(node)[0];

    let last = ep
        .targets
        .iter()
        .enumerate()
        .filter_map(|(t, tgt)| tgt.map(|c| (t, c)))
        .next_back()
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let outs = model
        .forward_sequence(&ep.features, Some(&ep.labels), false, &mut rng)
        .unwrap();
    let expect = -outs[last.0].prediction[last.1].ln();
    assert!((got - expect).abs() < 1e-12);
}
