use pace_core::input_models::{nonstationarity_report, sample_sequence, stationary_distribution, InputModel, TransitionMatrix};
use pace_core::market::ReferenceDistribution;

#[test]
fn model_json_shapes() {
    let iid: InputModel = serde_json::from_str(r#"{"kind": "iid", "base": [0.25, 0.75], "seed": 3}"#).unwrap();
    assert_eq!(iid.kind(), "iid");
    assert_eq!(iid.m(), 2);

    let budgeted: InputModel = serde_json::from_str(
        r#"{"kind": "corrupted", "base": [0.5, 0.5], "schedule": "budgeted", "delta": 0.1, "corner": 1}"#,
    )
    .unwrap();
    let rep = nonstationarity_report(&budgeted, 100, &[]).unwrap();
    assert!((rep.delta_avg - 0.1).abs() < 1e-12);

    let markov: InputModel =
        serde_json::from_str(r#"{"kind": "markov", "base": [1.0, 0.0], "transition": [[0.9, 0.1], [0.5, 0.5]]}"#).unwrap();
    let pi = markov.reference().unwrap();
    // detailed balance of a 2-state chain: pi_0 * 0.1 = pi_1 * 0.5
    assert!((pi.probs()[0] - 5.0 / 6.0).abs() < 1e-12);

    let round: InputModel = serde_json::from_str(&serde_json::to_string(&markov).unwrap()).unwrap();
    assert_eq!(round, markov);

    assert!(serde_json::from_str::<InputModel>(r#"{"kind": "iid", "base": [0.5, 0.6]}"#).is_err());
    assert!(serde_json::from_str::<InputModel>(r#"{"kind": "periodic", "period_dists": []}"#).is_err());
}

#[test]
fn sequences_are_reproducible_and_seed_sensitive() {
    let models = [
        InputModel::iid(InputModel::random_distribution(9, 1)),
        InputModel::decaying(InputModel::random_distribution(9, 1), 2.0, 5).unwrap(),
        InputModel::random_markov(9, 2),
        InputModel::random_periodic(9, 4, 3).unwrap(),
    ];
    for model in &models {
        let a = sample_sequence(model, 1000, 42).unwrap();
        assert_eq!(a, sample_sequence(model, 1000, 42).unwrap());
        assert_ne!(a, sample_sequence(model, 1000, 43).unwrap());
        assert!(a.items().iter().all(|&j| j < 9));
    }
}

#[test]
fn periodic_blocks_hold_one_draw_per_position() {
    let q = 5;
    let dists: Vec<ReferenceDistribution> = (0..q).map(|k| ReferenceDistribution::point_mass(q, k)).collect();
    let model = InputModel::periodic(dists).unwrap();
    let seq = sample_sequence(&model, 23, 8).unwrap();
    assert_eq!(seq.len(), 23);
    for block in seq.items().chunks(q).filter(|b| b.len() == q) {
        let mut sorted = block.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..q).collect::<Vec<_>>());
    }
    let rep = nonstationarity_report(&model, 20, &[]).unwrap();
    assert_eq!(rep.delta_block, Some(0.0));
}

#[test]
fn markov_mixing_profile() {
    let chain = TransitionMatrix::new(vec![vec![0.2, 0.8, 0.0], vec![0.0, 0.3, 0.7], vec![0.6, 0.0, 0.4]]).unwrap();
    let pi = stationary_distribution(&chain, 1e-14, 100_000).unwrap();
    let back = chain.left_apply(pi.probs());
    for (a, b) in back.iter().zip(pi.probs()) {
        assert!((a - b).abs() < 1e-12);
    }
    let model = InputModel::markov(ReferenceDistribution::point_mass(3, 0), chain).unwrap();
    let rep = nonstationarity_report(&model, 50, &[1, 2, 4, 8, 16, 32]).unwrap();
    let eps: Vec<f64> = rep.epsilon_of_iota.iter().map(|(_, e)| *e).collect();
    assert!(eps.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    assert!(eps[5] < 1e-3);

    assert!(stationary_distribution(&TransitionMatrix::identity(3), 1e-12, 1000).is_err());
}
