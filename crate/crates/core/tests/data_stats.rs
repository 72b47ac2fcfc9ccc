//! Statistical checks of the synthetic generator.

mod common;

use aga_core::data::{generate_episode, TaskSpec};

/// Empirical segment-transition frequencies over a long run must match the
/// specified transition rows.
#[test]
fn transition_frequencies_match_spec_rows() {
    let spec = TaskSpec {
        n_c: 3,
        transition: vec![
            vec![0.0, 0.7, 0.3],
            vec![0.5, 0.0, 0.5],
            vec![0.25, 0.75, 0.0],
        ],
        dwell: vec![1.0, 1.0, 1.0],
        prototype: vec![vec![0.0]; 3],
        noise_sigma: 0.0,
        t: 100_000,
        t_a: 1,
        seed: 42,
        initial: None,
    };
    let ep = generate_episode(&spec, 0).unwrap();

    // with dwell 1 every frame is one segment, so consecutive frames are raw
    // transitions
    let mut counts = vec![vec![0usize; 3]; 3];
    for w in ep.actions.windows(2) {
        counts[w[0]][w[1]] += 1;
    }
    for i in 0..3 {
        let row_total: usize = counts[i].iter().sum();
        for j in 0..3 {
            let freq = counts[i][j] as f64 / row_total as f64;
            assert!(
                (freq - spec.transition[i][j]).abs() < 0.02,
                "row {i} col {j}: {freq} vs {}",
                spec.transition[i][j]
            );
        }
    }
}

/// Mean dwell length approximates the configured geometric mean.
#[test]
fn dwell_lengths_match_geometric_mean() {
    let spec = TaskSpec {
        n_c: 2,
        transition: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
        dwell: vec![4.0, 2.0],
        prototype: vec![vec![0.0], vec![1.0]],
        noise_sigma: 0.0,
        t: 200_000,
        t_a: 1,
        seed: 7,
        initial: None,
    };
    let ep = generate_episode(&spec, 0).unwrap();
    let mut seg_lens: Vec<Vec<usize>> = vec![Vec::new(), Vec::new()];
    let mut run = 1usize;
    for w in ep.actions.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            seg_lens[w[0]].push(run);
            run = 1;
        }
    }
    for (c, lens) in seg_lens.iter().enumerate() {
        let mean: f64 = lens.iter().sum::<usize>() as f64 / lens.len() as f64;
        assert!(
            (mean - spec.dwell[c]).abs() < 0.15,
            "class {c}: mean dwell {mean} vs {}",
            spec.dwell[c]
        );
    }
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(12))]

    // anticipation targets always equal the shifted action sequence
    #[test]
    fn targets_always_consistent(seed in 0u64..1000, episode in 0u64..50) {
        let spec = TaskSpec::desk_default(seed);
        let ep = generate_episode(&spec, episode).unwrap();
        for t in 0..spec.t {
            match ep.targets[t] {
                Some(c) => proptest::prop_assert_eq!(c, ep.actions[t + spec.t_a]),
                None => proptest::prop_assert!(t + spec.t_a >= spec.t),
            }
        }
    }
}
