use posnegdm::data::*;
use proptest::prelude::*;

#[test]
fn csv_round_trip_is_lossless() {
    let cohort = generate_synthetic_cohort(&CohortConfig {
        n_trajectories: 1000,
        seed: 11,
        ..CohortConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cohort.csv");
    save_trajectories_csv(&cohort, &path).unwrap();
    let back = load_trajectories_csv(&path).unwrap();
    assert_eq!(back, cohort);
}

#[test]
fn cohort_matches_requested_shape() {
    let cfg = CohortConfig {
        n_trajectories: 2000,
        seed: 1,
        ..CohortConfig::default()
    };
    let cohort = generate_synthetic_cohort(&cfg).unwrap();
    assert_eq!(cohort.len(), 2000);
    let dead = cohort.iter().filter(|t| !t.outcome.is_positive()).count();
    assert_eq!(dead, (2000.0 * cfg.mortality_target).round() as usize);
    for t in &cohort {
        assert!((cfg.min_len..=cfg.max_len).contains(&t.len()));
        assert_eq!(t.state_dim(), 46);
        assert!(t.actions.iter().all(|a| a.index() < N_ACTIONS));
        let rtg = compute_returns_to_go(&t.rewards()).unwrap();
        assert!(rtg.iter().all(|&r| r == t.terminal_reward()));
    }
    assert_eq!(generate_synthetic_cohort(&cfg).unwrap(), cohort);
}

#[test]
fn split_is_stratification_free_and_normalized_with_train_stats() {
    let cohort = generate_synthetic_cohort(&CohortConfig {
        n_trajectories: 300,
        seed: 4,
        ..CohortConfig::default()
    })
    .unwrap();
    let split = split_train_test(cohort.clone(), 0.3, 9).unwrap();
    assert_eq!(split.test.len(), 90);
    assert_eq!(split.counts.train_positive + split.counts.train_negative, 210);
    let norm = normalize_states(split.clone()).unwrap();
    let d = norm.state_dim();
    let rows: Vec<&Vec<f32>> = norm.train.iter().flat_map(|t| &t.states).collect();
    for j in 0..d {
        let mean = rows.iter().map(|r| f64::from(r[j])).sum::<f64>() / rows.len() as f64;
        assert!(mean.abs() < 1e-4, "feature {j} mean {mean}");
    }
    assert!(normalize_states(norm).is_err());
}

proptest! {
    #[test]
    fn action_encoding_round_trips(iv in 0usize..5, vaso in 0usize..5) {
        let a = encode_action(iv, vaso).unwrap();
        prop_assert!(a < N_ACTIONS);
        prop_assert_eq!(decode_action(a).unwrap(), (iv, vaso));
    }

    #[test]
    fn returns_to_go_are_constant_terminal_reward(len in 1usize..20, alive: bool, bad in 0.01f32..2.0) {
        let mut rewards = vec![0.0; len];
        rewards[len - 1] = if alive { 1.0 } else { -1.0 };
        let rtg = compute_returns_to_go(&rewards).unwrap();
        prop_assert!(rtg.iter().all(|&r| r == rewards[len - 1]));
        if len > 1 {
            rewards[0] = bad;
            prop_assert!(compute_returns_to_go(&rewards).is_err());
        }
    }
}
