use std::fs;

use rvisac::agent::{Agent, AgentConfig};
use rvisac::envs::{queuing_mdp, EnvSpec, Pendulum};
use rvisac::harness::{
    eval_rng, evaluate_policy, oracle, plot_files, run_experiment, ExperimentConfig, EVAL_CSV_HEADER,
};
use rvisac::nn::{GaussianPolicy, MlpSpec, Network};
use rvisac::tabular::{FChoice, TRACE_CSV_HEADER};

fn small_faller() -> ExperimentConfig {
    ExperimentConfig {
        env: EnvSpec::Faller,
        agent: AgentConfig {
            batch_size: 16,
            critic_hidden: vec![8],
            actor_hidden: vec![8],
            reset_critic_hidden: vec![4],
            warmup_random_steps: 200,
            ..AgentConfig::default()
        },
        total_steps: 1_000,
        eval_every: 250,
        eval_episodes: 2,
        seeds: (0..5).collect(),
        ..ExperimentConfig::default()
    }
}

#[test]
fn csv_header_is_stable() {
    assert_eq!(
        EVAL_CSV_HEADER,
        "step,seed,total_return,survival_steps,average_reward,xi,xi_reset,r_cost,alpha"
    );
    assert_eq!(TRACE_CSV_HEADER, "step,f_of_q,xi,bellman_residual,q_max_abs");
}

#[test]
fn five_seeds_five_csvs_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_faller();
    let a = run_experiment(&config, &dir.path().join("a")).unwrap();
    let b = run_experiment(&config, &dir.path().join("b")).unwrap();
    assert_eq!(a.len(), 5);
    for (pa, pb) in a.iter().zip(&b) {
        let text = fs::read_to_string(pa).unwrap();
        assert_eq!(text.lines().next(), Some(EVAL_CSV_HEADER));
        assert_eq!(text.lines().count(), 1 + 4);
        assert_eq!(text, fs::read_to_string(pb).unwrap());
        for line in text.lines().skip(1) {
            let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
            assert!((v[4] - v[2] / v[3]).abs() <= 1e-12 * v[4].abs().max(1.0));
        }
    }
    for seed in 0..5 {
        let ck = |d: &str| fs::read(dir.path().join(d).join(format!("seed_{seed}.checkpoint.json"))).unwrap();
        assert_eq!(ck("a"), ck("b"));
    }
    let saved = ExperimentConfig::from_json(&fs::read_to_string(dir.path().join("a/config.json")).unwrap()).unwrap();
    assert_eq!(saved, config);
}

#[test]
fn tabular_env_dispatches_to_trace() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        env: EnvSpec::Queuing,
        total_steps: 5_000,
        seeds: vec![2],
        ..ExperimentConfig::default()
    };
    let paths = run_experiment(&config, dir.path()).unwrap();
    let text = fs::read_to_string(&paths[0]).unwrap();
    assert_eq!(text.lines().next(), Some(TRACE_CSV_HEADER));
    assert_eq!(text.lines().last().unwrap().split(',').next(), Some("5000"));
}

#[test]
fn zero_policy_pendulum_return_is_pinned() {
    let zero = GaussianPolicy::from_network(Network::zeros(MlpSpec::new(vec![3, 2]).unwrap())).unwrap();
    let s = evaluate_policy(&mut Pendulum::default(), &zero, 10, 1_000, &mut eval_rng(0)).unwrap();
    assert_eq!(s.total_return, -1112.340401599295);
    assert_eq!(s.survival_steps, 200.0);
}

#[test]
fn evaluation_leaves_training_untouched() {
    let mut agent = Agent::new(small_faller().agent, 3, 1, 9).unwrap();
    let mut env = Pendulum::default();
    for _ in 0..300 {
        agent.env_step(&mut env).unwrap();
    }
    let before = (agent.state.fingerprint(), agent.rng.clone());
    evaluate_policy(&mut Pendulum::default(), &agent.state.actor, 3, 1_000, &mut eval_rng(9)).unwrap();
    assert_eq!(before.0, agent.state.fingerprint());
    assert_eq!(before.1, agent.rng);
}

#[test]
fn queuing_oracle_skips_enumeration_but_has_small_residual() {
    let report = oracle(&queuing_mdp(), &FChoice::reference(0, 0)).unwrap();
    assert!(report.rho_enumerated.is_none());
    assert!(report.residual < 1e-9);
    assert!(report.to_string().contains("skipped"));
}

#[test]
fn oracle_agrees_on_random_mdps() {
    for seed in 0..5 {
        let mdp = rvisac::envs::random_mdp(5, 2, seed, (-1.0, 1.0));
        let report = oracle(&mdp, &FChoice::gain_sum(1.0)).unwrap();
        assert!(report.gap().unwrap() < 1e-6, "{report}");
    }
}

#[test]
fn plot_from_training_csvs_is_strict_xml() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_faller();
    config.seeds = vec![0, 1];
    let paths = run_experiment(&config, dir.path()).unwrap();
    let out = dir.path().join("survival.svg");
    let band = plot_files(&paths, "survival_steps", &out).unwrap();
    assert_eq!(band.steps, vec![250.0, 500.0, 750.0, 1000.0]);
    let text = fs::read_to_string(&out).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    let labels: Vec<&str> = doc.descendants().filter_map(|n| n.text()).collect();
    assert!(labels.contains(&"steps"));
    assert!(labels.contains(&"survival_steps"));
}
