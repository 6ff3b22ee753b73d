#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rvisac::agent::AgentConfig;
use rvisac::replay::{MiniBatch, Transition};

pub const FD_STEP: f64 = 1e-6;

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = p[i];
            p[i] = x0 + FD_STEP;
            let up = f(&p);
            p[i] = x0 - FD_STEP;
            let down = f(&p);
            p[i] = x0;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn tiny_agent_config() -> AgentConfig {
    AgentConfig {
        batch_size: 8,
        critic_hidden: vec![8, 8],
        actor_hidden: vec![8, 8],
        reset_critic_hidden: vec![8, 8],
        ..AgentConfig::default()
    }
}

pub fn random_transition(rng: &mut ChaCha8Rng, obs_dim: usize, action_dim: usize) -> Transition {
    Transition {
        s: (0..obs_dim).map(|_| rng.sample(StandardNormal)).collect(),
        a: (0..action_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        r: rng.sample(StandardNormal),
        s_next: (0..obs_dim).map(|_| rng.sample(StandardNormal)).collect(),
        is_reset_step: rng.random::<f64>() < 0.3,
    }
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, obs_dim: usize, action_dim: usize) -> MiniBatch {
    let ts: Vec<Transition> = (0..n).map(|_| random_transition(rng, obs_dim, action_dim)).collect();
    MiniBatch::from_transitions(&ts).unwrap()
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}
