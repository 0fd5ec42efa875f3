use super::*;
use crate::envlab::{
    evaluate_policy, generate_dataset, value_iteration_oracle, BehaviorQuality, Environment,
    MdpSpec, Transition,
};

fn single_transition_dataset(r: f64, terminal: bool) -> TransitionDataset {
    let mut spec = MdpSpec::grid_world(3, 0);
    spec.hazards.clear();
    TransitionDataset {
        spec,
        transitions: vec![Transition {
            idx: 0,
            s: vec![1.0, 1.0],
            a: 3,
            r,
            s_next: vec![2.0, 1.0],
            terminal,
            poisoned: false,
        }],
        behavior_tag: "test".into(),
        generation_seed: 0,
    }
}

#[test]
fn one_sweep_full_step_learns_reward() {
    let d = single_transition_dataset(1.0, true);
    let fm = FeatureMap::default_for(&d.spec).unwrap();
    let mut cfg = TrainConfig::tabular_default();
    cfg.n_iterations = 1;
    cfg.learning_rate = 1.0;
    let m = train_tabular_q(&d, fm, &cfg).unwrap();
    assert_eq!(m.q(&[1.0, 1.0], 3), 1.0);
    assert_eq!(m.train_log, vec![1.0]);
}

#[test]
fn zero_learning_rate_leaves_theta() {
    let d = single_transition_dataset(1.0, false);
    let fm = FeatureMap::default_for(&d.spec).unwrap();
    let mut cfg = TrainConfig::tabular_default();
    cfg.learning_rate = 0.0;
    let m = train_tabular_q(&d, fm, &cfg).unwrap();
    assert!(m.theta.iter().all(|x| *x == 0.0));
}

#[test]
fn tabular_rejects_out_of_range_state() {
    let mut d = single_transition_dataset(1.0, false);
    d.transitions[0].s = vec![7.0, 1.0];
    let fm = FeatureMap::default_for(&d.spec).unwrap();
    match train_tabular_q(&d, fm, &TrainConfig::tabular_default()) {
        Err(LabError::Data { idx, .. }) => assert_eq!(idx, 0),
        other => panic!("unexpected {other:?}"),
    }
}

fn line_data(n: usize, seed: u64) -> TransitionDataset {
    let env = Environment::new(MdpSpec::line_world(seed)).unwrap();
    generate_dataset(&env, n, BehaviorQuality::Medium, seed).unwrap()
}

#[test]
fn gamma_zero_is_ridge_regression_of_reward() {
    let mut d = line_data(800, 1);
    d.spec.gamma = 0.0;
    let fm = FeatureMap::default_for(&d.spec).unwrap();
    let mut cfg = TrainConfig::fqi_default();
    cfg.ridge_lambda = 0.1;
    let m = train_linear_fqi(&d, fm.clone(), &cfg).unwrap();
    // Second iteration leaves theta unchanged.
    assert!(m.train_log.len() <= 2);
    // Independent dense solve of (Phi^T Phi + lambda I) theta = Phi^T r.
    let dim = fm.dim;
    let mut a = DMatrix::<f64>::identity(dim, dim) * 0.1;
    let mut b = DVector::<f64>::zeros(dim);
    for t in &d.transitions {
        let phi = DVector::from_vec(fm.phi(&t.s, t.a));
        a += &phi * phi.transpose();
        b += &phi * t.r;
    }
    let want = a.lu().solve(&b).unwrap();
    for (x, y) in m.theta.iter().zip(want.iter()) {
        assert!((x - y).abs() < 1e-9 * (1.0 + y.abs()), "{x} vs {y}");
    }
}

#[test]
fn zero_beta_reproduces_plain_fqi_bitwise() {
    let d = line_data(1500, 2);
    let fm = FeatureMap::default_for(&d.spec).unwrap();
    let cfg = TrainConfig::fqi_default();
    let plain = train(AlgoTag::LinFQI, &d, fm.clone(), &cfg).unwrap();
    let mut c2 = cfg.clone();
    c2.conservative_beta = 0.0;
    let cons = train_linear_fqi(&d, fm.clone(), &c2).unwrap();
    assert_eq!(plain.theta, cons.theta);
    assert_eq!(plain.train_log, cons.train_log);
    let mut c3 = cfg;
    c3.conservative_beta = 0.5;
    let cons = train(AlgoTag::ConsLinFQI, &d, fm, &c3).unwrap();
    assert_eq!(cons.algo_tag, AlgoTag::ConsLinFQI);
    assert_ne!(plain.theta, cons.theta);
}

#[test]
fn singular_normal_matrix_without_ridge() {
    // Every state at the same point: the RBF gram block has rank one.
    let mut d = line_data(200, 3);
    for t in &mut d.transitions {
        t.s = vec![0.5];
    }
    let fm = FeatureMap::default_for(&d.spec).unwrap();
    let mut cfg = TrainConfig::fqi_default();
    cfg.ridge_lambda = 0.0;
    assert!(matches!(train_linear_fqi(&d, fm, &cfg), Err(LabError::Numerical(_))));
}

#[test]
fn fqi_fixed_point_and_determinism() {
    let d = line_data(3000, 4);
    let fm = FeatureMap::default_for(&d.spec).unwrap();
    let mut cfg = TrainConfig::fqi_default();
    cfg.n_iterations = 500;
    cfg.tol = 1e-9;
    let m = train_linear_fqi(&d, fm.clone(), &cfg).unwrap();
    assert!(*m.train_log.last().unwrap() < 1e-9);
    let again = train_linear_fqi(&d, fm, &cfg).unwrap();
    assert_eq!(m.theta, again.theta);
}

#[test]
fn greedy_ties_go_to_action_zero() {
    let d = single_transition_dataset(0.0, true);
    let fm = FeatureMap::default_for(&d.spec).unwrap();
    let mut m = train_tabular_q(&d, fm, &TrainConfig::tabular_default()).unwrap();
    assert_eq!(greedy_policy(&m).act(&[0.0, 0.0]), 0);
    let block = m.feature_map.block_dim;
    m.theta[block] = 0.9;
    m.theta[0] = 0.1;
    assert_eq!(m.q_all(&[0.0, 0.0])[..2], [0.1, 0.9]);
    assert_eq!(greedy_policy(&m).act(&[0.0, 0.0]), 1);
}

#[test]
fn oracle_q_in_a_model_gives_oracle_policy() {
    let env = Environment::new(MdpSpec::grid_world(5, 0)).unwrap();
    let opt = value_iteration_oracle(&env, 0, 1e-12).unwrap();
    let fm = FeatureMap::default_for(env.spec()).unwrap();
    let block = fm.block_dim;
    let mut theta = vec![0.0; fm.dim];
    for (cell, q) in opt.q.iter().enumerate() {
        for (a, v) in q.iter().enumerate() {
            theta[a * block + cell] = *v;
        }
    }
    let model = VictimModel {
        feature_map: fm,
        theta,
        gamma: 0.9,
        algo_tag: AlgoTag::TabQ,
        train_log: vec![],
    };
    for (state, want) in opt.states.iter().zip(&opt.policy) {
        assert_eq!(model.greedy_action(state), *want, "state {state:?}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let d = line_data(500, 5);
    let fm = FeatureMap::default_for(&d.spec).unwrap();
    let m = train_linear_fqi(&d, fm, &TrainConfig::fqi_default()).unwrap();
    let text = m.to_checkpoint();
    let back = VictimModel::from_checkpoint(&text).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.to_checkpoint(), text);
    assert!(VictimModel::from_checkpoint("{}").is_err());
}

#[test]
fn negated_rewards_hurt_the_learned_policy() {
    let env = Environment::new(MdpSpec::line_world(0)).unwrap();
    let mut clean = 0.0;
    let mut flipped = 0.0;
    for seed in 0..5 {
        let d = generate_dataset(&env, 5000, BehaviorQuality::Medium, seed).unwrap();
        let mut neg = d.clone();
        neg.transitions.iter_mut().for_each(|t| t.r = -t.r);
        let fm = FeatureMap::default_for(&d.spec).unwrap();
        let cfg = TrainConfig::fqi_default();
        let m = train_linear_fqi(&d, fm.clone(), &cfg).unwrap();
        let n = train_linear_fqi(&neg, fm, &cfg).unwrap();
        clean += evaluate_policy(&env, &m, 200, 99 + seed).unwrap().mean;
        flipped += evaluate_policy(&env, &n, 200, 99 + seed).unwrap().mean;
    }
    assert!(flipped < clean, "negated {flipped} vs clean {clean}");
}
