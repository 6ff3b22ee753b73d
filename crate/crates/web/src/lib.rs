//! WebAssembly bindings for the static page in `www/`.
//!
//! Every op takes plain numbers or strings and returns a JSON string, so the
//! page needs no generated TypeScript types.

use rvisac::envs::EnvSpec;
use rvisac::harness;
use rvisac::mdp::{soft_average_reward, TabularMdp, TabularPolicy};
use rvisac::tabular::{soft_policy_improve, train_tabular, FChoice, TabularConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_STEPS: u32 = 2_000_000;

fn tabular_env(env: &str) -> rvisac::Result<TabularMdp> {
    let spec: EnvSpec = env.parse()?;
    spec.tabular()
        .ok_or_else(|| rvisac::Error::validation("env", format!("`{env}` is not a tabular MDP")))
}

fn to_js(e: rvisac::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Debug, Serialize)]
pub struct RviTrace {
    pub rho_star: f64,
    pub step: Vec<u64>,
    pub xi: Vec<f64>,
    pub f_of_q: Vec<f64>,
    pub bellman_residual: Vec<f64>,
}

pub fn rvi_trace(env: &str, f: &str, steps: u32, seed: u32) -> rvisac::Result<RviTrace> {
    let mdp = tabular_env(env)?;
    let f: FChoice = f.parse()?;
    if steps == 0 || steps > MAX_STEPS {
        return Err(rvisac::Error::validation("steps", format!("must lie in 1..={MAX_STEPS}")));
    }
    let config = TabularConfig {
        f: f.clone(),
        total_steps: steps as u64,
        rng_seed: seed as u64,
        record_every: (steps as u64 / 200).max(1),
        ..TabularConfig::default()
    };
    let trace = train_tabular(&mdp, &config)?;
    let rho_star = harness::oracle(&mdp, &FChoice::reference(0, 0))?.rho_rvi;
    Ok(RviTrace {
        rho_star,
        step: trace.rows.iter().map(|r| r.step).collect(),
        xi: trace.rows.iter().map(|r| r.xi).collect(),
        f_of_q: trace.rows.iter().map(|r| r.f_of_q).collect(),
        bellman_residual: trace.rows.iter().map(|r| r.bellman_residual).collect(),
    })
}

/// Delayed f(Q) RVI Q-learning on a tabular environment (`queuing` or
/// `random_mdp:<seed>:<S>:<A>`), with the exact optimal gain for reference.
#[wasm_bindgen(js_name = rviTrace)]
pub fn rvi_trace_js(env: &str, f: &str, steps: u32, seed: u32) -> Result<String, JsError> {
    let trace = rvi_trace(env, f, steps, seed).map_err(to_js)?;
    Ok(serde_json::to_string(&trace)?)
}

#[derive(Debug, Serialize)]
pub struct SoftImprovement {
    /// Soft gain of the uniform policy followed by each improved policy.
    pub soft_gain: Vec<f64>,
    /// State-averaged policy entropy along the same sequence.
    pub mean_entropy: Vec<f64>,
}

pub fn soft_improvement(env: &str, iterations: u32) -> rvisac::Result<SoftImprovement> {
    let mdp = tabular_env(env)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut policy = TabularPolicy::uniform(ns, na);
    let mut out = SoftImprovement {
        soft_gain: Vec::new(),
        mean_entropy: Vec::new(),
    };
    for i in 0..=iterations.min(100) {
        if i > 0 {
            policy = soft_policy_improve(&mdp, &policy)?;
        }
        out.soft_gain.push(soft_average_reward(&mdp, &policy)?);
        out.mean_entropy.push((0..ns).map(|s| policy.entropy(s)).sum::<f64>() / ns as f64);
    }
    Ok(out)
}

/// Soft gain after each exact soft policy improvement step from uniform.
#[wasm_bindgen(js_name = softImprovement)]
pub fn soft_improvement_js(env: &str, iterations: u32) -> Result<String, JsError> {
    let out = soft_improvement(env, iterations).map_err(to_js)?;
    Ok(serde_json::to_string(&out)?)
}

/// Solves an MDP given as JSON and returns the printed oracle report.
#[wasm_bindgen(js_name = oracleReport)]
pub fn oracle_report(mdp_json: &str, f: &str) -> Result<String, JsError> {
    let mdp = TabularMdp::from_json(mdp_json).map_err(to_js)?;
    let f: FChoice = f.parse().map_err(to_js)?;
    Ok(harness::oracle(&mdp, &f).map_err(to_js)?.to_string())
}
