//! Desk-scale environments.
//!
//! Agent-side actions are always in `[-1, 1]^d`; each environment scales them
//! to its physical range internally.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;

/// Random ergodic MDP: Dirichlet(1, …, 1) transition rows (strictly
/// positive), rewards uniform in `reward_range`.
pub fn random_mdp(
    n_states: usize,
    n_actions: usize,
    rng_seed: u64,
    reward_range: (f64, f64),
) -> TabularMdp {
    assert!(n_states >= 1 && n_actions >= 1, "sizes must be positive");
    let (lo, hi) = reward_range;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        let w: Vec<f64> = (0..n_states)
            .map(|_| rng.sample::<f64, _>(Exp1).max(f64::MIN_POSITIVE))
            .collect();
        let z: f64 = w.iter().sum();
        transition.extend(w.iter().map(|x| x / z));
    }
    let reward = (0..n_states * n_actions)
        .map(|_| lo + (hi - lo) * rng.random::<f64>())
        .collect();
    let r_inf = lo.abs().max(hi.abs());
    TabularMdp::new(n_states, n_actions, transition, reward, r_inf, vec![])
        .expect("normalized Dirichlet rows form a valid MDP")
}

/// Result of one continuous-environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

/// A continuous-control task with actions in `[-1, 1]^action_dim`.
///
/// `step` is a pure function of the internal state and the action;
/// randomness enters only through `reset`.
pub trait ContinuousEnv: Send {
    fn name(&self) -> &'static str;
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Episode length at which the harness truncates (never a terminal event).
    fn time_limit(&self) -> usize;
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> StepOutcome;
    fn observe(&self) -> Vec<f64>;
}

// ---------------------------------------------------------------------------
// Pendulum swing-up (continuing).

pub const PENDULUM_G: f64 = 10.0;
pub const PENDULUM_M: f64 = 1.0;
pub const PENDULUM_L: f64 = 1.0;
pub const PENDULUM_DT: f64 = 0.05;
pub const PENDULUM_MAX_SPEED: f64 = 8.0;
pub const PENDULUM_MAX_TORQUE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumState {
    /// Angle from upright (radians, unwrapped).
    pub theta: f64,
    pub theta_dot: f64,
}

/// Maps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut x = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if x <= -PI {
        x += 2.0 * PI;
    }
    x
}

/// One semi-implicit Euler step. Returns `(next, reward, terminal = false)`.
pub fn pendulum_step(state: PendulumState, action: f64) -> (PendulumState, f64, bool) {
    let torque = PENDULUM_MAX_TORQUE * action.clamp(-1.0, 1.0);
    let th = wrap_angle(state.theta);
    let reward = -(th * th + 0.1 * state.theta_dot * state.theta_dot + 0.001 * torque * torque);
    let accel = 3.0 * PENDULUM_G / (2.0 * PENDULUM_L) * state.theta.sin()
        + 3.0 / (PENDULUM_M * PENDULUM_L * PENDULUM_L) * torque;
    let theta_dot =
        (state.theta_dot + accel * PENDULUM_DT).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
    let theta = state.theta + theta_dot * PENDULUM_DT;
    (PendulumState { theta, theta_dot }, reward, false)
}

#[derive(Debug, Clone)]
pub struct Pendulum {
    pub state: PendulumState,
}

impl Default for Pendulum {
    fn default() -> Self {
        Pendulum {
            state: PendulumState {
                theta: PI,
                theta_dot: 0.0,
            },
        }
    }
}

impl ContinuousEnv for Pendulum {
    fn name(&self) -> &'static str {
        "pendulum"
    }

    fn obs_dim(&self) -> usize {
        3
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn time_limit(&self) -> usize {
        200
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.state = PendulumState {
            theta: rng.random_range(-PI..PI),
            theta_dot: rng.random_range(-1.0..1.0),
        };
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> StepOutcome {
        let (next, reward, terminal) = pendulum_step(self.state, action[0]);
        self.state = next;
        StepOutcome {
            observation: self.observe(),
            reward,
            terminal,
        }
    }

    /// `(cos θ, sin θ, θ̇)`.
    fn observe(&self) -> Vec<f64> {
        vec![self.state.theta.cos(), self.state.theta.sin(), self.state.theta_dot]
    }
}

// ---------------------------------------------------------------------------
// Faller: cart-pole with a continuous force; falling is terminal.

pub const FALLER_FORCE: f64 = 10.0;
pub const FALLER_MASS_CART: f64 = 1.0;
pub const FALLER_MASS_POLE: f64 = 0.1;
pub const FALLER_HALF_LENGTH: f64 = 0.5;
pub const FALLER_G: f64 = 9.8;
pub const FALLER_DT: f64 = 0.02;
pub const FALLER_ANGLE_LIMIT: f64 = 12.0 * 2.0 * PI / 360.0;
pub const FALLER_X_LIMIT: f64 = 2.4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FallerState {
    pub x: f64,
    pub x_dot: f64,
    pub phi: f64,
    pub phi_dot: f64,
}

impl FallerState {
    /// Membership in the termination set: strict inequalities.
    pub fn is_terminal(&self) -> bool {
        self.phi.abs() > FALLER_ANGLE_LIMIT || self.x.abs() > FALLER_X_LIMIT
    }
}

/// One explicit Euler step. Returns `(next, reward, terminal)`.
pub fn faller_step(state: FallerState, action: f64) -> (FallerState, f64, bool) {
    let u = action.clamp(-1.0, 1.0);
    let force = FALLER_FORCE * u;
    let total_mass = FALLER_MASS_CART + FALLER_MASS_POLE;
    let pole_mass_length = FALLER_MASS_POLE * FALLER_HALF_LENGTH;
    let (sin, cos) = state.phi.sin_cos();
    let temp = (force + pole_mass_length * state.phi_dot * state.phi_dot * sin) / total_mass;
    let phi_acc = (FALLER_G * sin - cos * temp)
        / (FALLER_HALF_LENGTH * (4.0 / 3.0 - FALLER_MASS_POLE * cos * cos / total_mass));
    let x_acc = temp - pole_mass_length * phi_acc * cos / total_mass;
    let next = FallerState {
        x: state.x + FALLER_DT * state.x_dot,
        x_dot: state.x_dot + FALLER_DT * x_acc,
        phi: state.phi + FALLER_DT * state.phi_dot,
        phi_dot: state.phi_dot + FALLER_DT * phi_acc,
    };
    let reward = 1.0 - 0.01 * u * u;
    (next, reward, next.is_terminal())
}

#[derive(Debug, Clone)]
pub struct Faller {
    pub state: FallerState,
}

impl Default for Faller {
    fn default() -> Self {
        Faller {
            state: FallerState {
                x: 0.0,
                x_dot: 0.0,
                phi: 0.0,
                phi_dot: 0.0,
            },
        }
    }
}

impl ContinuousEnv for Faller {
    fn name(&self) -> &'static str {
        "faller"
    }

    fn obs_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn time_limit(&self) -> usize {
        1000
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut draw = || rng.random_range(-0.05..0.05);
        self.state = FallerState {
            x: draw(),
            x_dot: draw(),
            phi: draw(),
            phi_dot: draw(),
        };
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> StepOutcome {
        let (next, reward, terminal) = faller_step(self.state, action[0]);
        self.state = next;
        StepOutcome {
            observation: self.observe(),
            reward,
            terminal,
        }
    }

    fn observe(&self) -> Vec<f64> {
        let s = self.state;
        vec![s.x, s.x_dot, s.phi, s.phi_dot]
    }
}

// ---------------------------------------------------------------------------
// Access-control queuing (tabular).

pub const QUEUE_SERVERS: usize = 10;
pub const QUEUE_FREE_PROB: f64 = 0.06;
pub const QUEUE_PRIORITIES: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
pub const QUEUE_ACCEPT: usize = 0;
pub const QUEUE_REJECT: usize = 1;

/// State index for `(free servers, priority index)`.
pub fn queue_state(free: usize, priority: usize) -> usize {
    free * QUEUE_PRIORITIES.len() + priority
}

pub fn queue_decode(state: usize) -> (usize, usize) {
    (state / QUEUE_PRIORITIES.len(), state % QUEUE_PRIORITIES.len())
}

pub fn queue_n_states() -> usize {
    (QUEUE_SERVERS + 1) * QUEUE_PRIORITIES.len()
}

/// Immediate effect of a decision: `(reward, free servers after the decision)`.
/// Accepting with no free server behaves as rejecting.
pub fn queue_decide(free: usize, priority: usize, action: usize) -> (f64, usize) {
    if action == QUEUE_ACCEPT && free > 0 {
        (QUEUE_PRIORITIES[priority], free - 1)
    } else {
        (0.0, free)
    }
}

fn binomial_pmf(n: usize, k: usize, p: f64) -> f64 {
    let mut coeff = 1.0;
    for i in 0..k {
        coeff *= (n - i) as f64 / (i + 1) as f64;
    }
    coeff * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

/// The queuing task as an explicit MDP: after the decision each busy server
/// frees independently with probability 0.06 and the next customer's
/// priority is uniform.
pub fn queuing_mdp() -> TabularMdp {
    let n = queue_n_states();
    let np = QUEUE_PRIORITIES.len();
    let mut transition = vec![0.0; n * 2 * n];
    let mut reward = vec![0.0; n * 2];
    for s in 0..n {
        let (free, priority) = queue_decode(s);
        for a in 0..2 {
            let (r, free_after) = queue_decide(free, priority, a);
            reward[s * 2 + a] = r;
            let busy = QUEUE_SERVERS - free_after;
            let row = &mut transition[(s * 2 + a) * n..(s * 2 + a + 1) * n];
            for freed in 0..=busy {
                let p = binomial_pmf(busy, freed, QUEUE_FREE_PROB);
                for next_priority in 0..np {
                    row[queue_state(free_after + freed, next_priority)] += p / np as f64;
                }
            }
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= z);
        }
    }
    TabularMdp::new(n, 2, transition, reward, 8.0, vec![]).expect("queuing MDP is valid")
}

/// Sampling simulator of the queuing task.
#[derive(Debug, Clone)]
pub struct QueuingSim {
    pub free: usize,
    pub priority: usize,
}

impl QueuingSim {
    pub fn reset(rng: &mut ChaCha8Rng) -> Self {
        QueuingSim {
            free: QUEUE_SERVERS,
            priority: rng.random_range(0..QUEUE_PRIORITIES.len()),
        }
    }

    pub fn state(&self) -> usize {
        queue_state(self.free, self.priority)
    }

    /// Returns the reward; advances to the next state.
    pub fn step(&mut self, action: usize, rng: &mut ChaCha8Rng) -> f64 {
        let (reward, free_after) = queue_decide(self.free, self.priority, action);
        let busy = QUEUE_SERVERS - free_after;
        let freed = (0..busy).filter(|_| rng.random::<f64>() < QUEUE_FREE_PROB).count();
        self.free = free_after + freed;
        self.priority = rng.random_range(0..QUEUE_PRIORITIES.len());
        reward
    }
}

// ---------------------------------------------------------------------------
// Selection by name.

/// Environment selector; serialized as its name string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EnvSpec {
    Pendulum,
    Faller,
    Queuing,
    RandomMdp {
        seed: u64,
        n_states: usize,
        n_actions: usize,
    },
}

impl EnvSpec {
    pub fn is_tabular(&self) -> bool {
        matches!(self, EnvSpec::Queuing | EnvSpec::RandomMdp { .. })
    }

    pub fn continuous(&self) -> Option<Box<dyn ContinuousEnv>> {
        match self {
            EnvSpec::Pendulum => Some(Box::new(Pendulum::default())),
            EnvSpec::Faller => Some(Box::new(Faller::default())),
            _ => None,
        }
    }

    pub fn tabular(&self) -> Option<TabularMdp> {
        match *self {
            EnvSpec::Queuing => Some(queuing_mdp()),
            EnvSpec::RandomMdp {
                seed,
                n_states,
                n_actions,
            } => Some(random_mdp(n_states, n_actions, seed, (-1.0, 1.0))),
            _ => None,
        }
    }
}

impl TryFrom<String> for EnvSpec {
    type Error = Error;

    fn try_from(name: String) -> Result<Self> {
        name.parse()
    }
}

impl From<EnvSpec> for String {
    fn from(spec: EnvSpec) -> Self {
        spec.to_string()
    }
}

impl FromStr for EnvSpec {
    type Err = Error;

    fn from_str(name: &str) -> Result<Self> {
        let bad = || {
            Error::validation(
                "env",
                format!("unknown environment `{name}` (expected pendulum, faller, queuing or random_mdp:<seed>:<S>:<A>)"),
            )
        };
        match name {
            "pendulum" => Ok(EnvSpec::Pendulum),
            "faller" => Ok(EnvSpec::Faller),
            "queuing" => Ok(EnvSpec::Queuing),
            other => {
                let parts: Vec<&str> = other.split(':').collect();
                match parts.as_slice() {
                    ["random_mdp", seed, s, a] => {
                        let seed = seed.parse().map_err(|_| bad())?;
                        let n_states: usize = s.parse().map_err(|_| bad())?;
                        let n_actions: usize = a.parse().map_err(|_| bad())?;
                        if n_states == 0 || n_actions == 0 {
                            return Err(bad());
                        }
                        Ok(EnvSpec::RandomMdp {
                            seed,
                            n_states,
                            n_actions,
                        })
                    }
                    _ => Err(bad()),
                }
            }
        }
    }
}

impl fmt::Display for EnvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvSpec::Pendulum => write!(f, "pendulum"),
            EnvSpec::Faller => write!(f, "faller"),
            EnvSpec::Queuing => write!(f, "queuing"),
            EnvSpec::RandomMdp {
                seed,
                n_states,
                n_actions,
            } => write!(f, "random_mdp:{seed}:{n_states}:{n_actions}"),
        }
    }
}
