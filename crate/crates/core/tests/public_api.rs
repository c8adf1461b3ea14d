use nacb_core::chain::{exact_npg, exact_policy_gradient, fisher_matrix, optimal_gain, PolicyEvaluation, DEFAULT_ENUMERATION_CAP};
use nacb_core::envs::{build, EnvSpec};
use nacb_core::estimators::CriticFeatures;
use nacb_core::format::{mdp_to_json, parse_mdp};
use nacb_core::mdp::TabularMdp;
use nacb_core::nacb::{run_seeded, schedule_for_horizon, NacbConfig};
use nacb_core::policy::SoftmaxPolicy;
use nacb_core::{Features, Mdp, Policy};
use nalgebra::DVector;

#[test]
fn fixtures_survive_the_file_format() {
    for spec in EnvSpec::fixtures() {
        let mdp: Mdp = build(&spec).unwrap();
        let back: Mdp = parse_mdp(&mdp_to_json(&mdp)).unwrap();
        assert_eq!(mdp, back, "{spec}");
    }
}

#[test]
fn single_precision_agrees_with_double() {
    let spec = EnvSpec::random(8, 3, 2, 7);
    let theta: Vec<f64> = (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();

    let mdp64: Mdp = build(&spec).unwrap();
    let p64 = Policy::tabular(8, 3).with_theta(DVector::from_vec(theta.clone())).unwrap();
    let e64 = PolicyEvaluation::new(&mdp64, &p64).unwrap();

    let mdp32: TabularMdp<f32> = build(&spec).unwrap();
    let p32 = SoftmaxPolicy::<f32>::tabular(8, 3).with_theta(DVector::from_iterator(24, theta.iter().map(|&x| x as f32))).unwrap();
    let e32 = PolicyEvaluation::new(&mdp32, &p32).unwrap();

    assert_eq!(e64.analysis.recurrent_class(), e32.analysis.recurrent_class());
    assert_eq!(e64.analysis.period(), e32.analysis.period());
    assert!((e64.gain() - e32.gain() as f64).abs() < 1e-4);
    for (a, b) in e64.values.v.iter().zip(e32.values.v.iter()) {
        assert!((a - *b as f64).abs() < 1e-3);
    }
}

#[test]
fn natural_gradient_step_improves_the_gain() {
    let mdp: Mdp = build(&EnvSpec::random(8, 3, 2, 7)).unwrap();
    let policy = Policy::tabular(8, 3);
    let e = PolicyEvaluation::new(&mdp, &policy).unwrap();
    let g = exact_policy_gradient(&policy, &e.analysis, &e.values);
    let w = exact_npg(&g, &fisher_matrix(&policy, &e.analysis));
    assert!(g.dot(&w) > 0.0);
    let stepped = policy.with_theta(policy.theta() + &w * 0.1).unwrap();
    assert!(PolicyEvaluation::new(&mdp, &stepped).unwrap().gain() > e.gain());
}

#[test]
fn custom_mdp_learns_the_better_action() {
    // Two states; action 1 pays in state 1, action 0 is a coin flip.
    let text = r#"{
        "n_states": 2, "n_actions": 2,
        "transitions": [
            {"s": 0, "a": 0, "s_next": 0, "p": 0.5}, {"s": 0, "a": 0, "s_next": 1, "p": 0.5},
            {"s": 0, "a": 1, "s_next": 1, "p": 1.0},
            {"s": 1, "a": 0, "s_next": 0, "p": 0.5}, {"s": 1, "a": 0, "s_next": 1, "p": 0.5},
            {"s": 1, "a": 1, "s_next": 1, "p": 1.0}
        ],
        "rewards": [{"s": 1, "a": 1, "r": 1.0}],
        "initial_dist": [1.0, 0.0]
    }"#;
    let mdp: Mdp = parse_mdp(text).unwrap();
    assert_eq!(optimal_gain(&mdp, DEFAULT_ENUMERATION_CAP).unwrap().j_star, 1.0);

    let config = NacbConfig::default().with_schedule(schedule_for_horizon(1 << 15).unwrap());
    let policy = Policy::tabular(2, 2);
    let features: Features = CriticFeatures::one_hot(2);
    let trace = run_seeded(&mdp, &policy, &features, &config).unwrap();
    assert_eq!(trace.len(), config.horizon());
    let learned = policy.with_theta(trace.final_theta.clone()).unwrap();
    let gain = PolicyEvaluation::new(&mdp, &learned).unwrap().gain();
    assert!(gain > 0.9, "final gain {gain}");
    assert!(trace.regret() / (trace.len() as f64) < 0.25);
}
