//! Tabular RVI Q-learning and the two-timescale delayed f(Q) update.
//!
//! Differential Q-learning is not a separate algorithm here: it is
//! [`TabularTrainer::delayed_rvi_step`] with a reward-rate estimate in place
//! of `ξ`, which is what `FChoice` + the fast schedule already provide.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{bellman_residual, evaluate_bias, QTable, TabularMdp, TabularPolicy};

/// Clip to the band `[-r_inf - eta, r_inf + eta]`.
pub fn g_eta(x: f64, r_inf: f64, eta: f64) -> f64 {
    let bound = r_inf + eta;
    if x >= bound {
        bound
    } else if x <= -bound {
        -bound
    } else {
        x
    }
}

/// The reference functional `f` subtracted by RVI Q-learning.
///
/// Each kind is shift-linear, `f(x + c·1) = f(x) + c·u`. The linear kinds are
/// also homogeneous for every real `c`; the max kinds only for `c ≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FChoice {
    /// `Q(s, a)`.
    ReferenceState { s: usize, a: usize },
    /// `max_a Q(s, a)`.
    ReferenceStateMax { s: usize },
    /// `g · Σ_{s,a} Q(s, a)`.
    GainSum { g: f64 },
    /// `g · Σ_s max_a Q(s, a)`.
    GainMaxSum { g: f64 },
    /// Mean over a sample of states of `max_a Q(s, a)`.
    BatchMeanMax,
}

impl FChoice {
    pub fn reference(s: usize, a: usize) -> Self {
        FChoice::ReferenceState { s, a }
    }

    pub fn reference_max(s: usize) -> Self {
        FChoice::ReferenceStateMax { s }
    }

    pub fn gain_sum(g: f64) -> Self {
        FChoice::GainSum { g }
    }

    pub fn gain_max_sum(g: f64) -> Self {
        FChoice::GainMaxSum { g }
    }

    /// The constant `u = f(1)`.
    pub fn u(&self, n_states: usize, n_actions: usize) -> f64 {
        match self {
            FChoice::ReferenceState { .. }
            | FChoice::ReferenceStateMax { .. }
            | FChoice::BatchMeanMax => 1.0,
            FChoice::GainSum { g } => g * (n_states * n_actions) as f64,
            FChoice::GainMaxSum { g } => g * n_states as f64,
        }
    }

    pub fn is_sampled(&self) -> bool {
        matches!(self, FChoice::BatchMeanMax)
    }

    pub fn check_shape(&self, n_states: usize, n_actions: usize) -> Result<()> {
        match *self {
            FChoice::ReferenceState { s, a } if s >= n_states || a >= n_actions => Err(
                Error::validation("f", format!("reference pair ({s}, {a}) out of range")),
            ),
            FChoice::ReferenceStateMax { s } if s >= n_states => Err(Error::validation(
                "f",
                format!("reference state {s} out of range"),
            )),
            FChoice::GainSum { g } | FChoice::GainMaxSum { g } if !(g > 0.0) => {
                Err(Error::validation("f", "gain must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// `f(q)` or, for the sampled kind, `f(q; sample)`.
    pub fn f_value(&self, q: &QTable, sample: Option<&[usize]>) -> Result<f64> {
        match self {
            FChoice::BatchMeanMax => match sample {
                Some(states) if !states.is_empty() => Ok(states
                    .iter()
                    .map(|s| q.max_row(*s))
                    .sum::<f64>()
                    / states.len() as f64),
                _ => Err(Error::Empty("batch_mean_max requires a nonempty state sample")),
            },
            _ => Ok(self.expected(q)),
        }
    }

    /// Deterministic `f(q)`. For [`FChoice::BatchMeanMax`] this is the
    /// expectation under uniform state sampling.
    pub fn expected(&self, q: &QTable) -> f64 {
        match *self {
            FChoice::ReferenceState { s, a } => q.get(s, a),
            FChoice::ReferenceStateMax { s } => q.max_row(s),
            FChoice::GainSum { g } => g * q.values().iter().sum::<f64>(),
            FChoice::GainMaxSum { g } => g * (0..q.n_states()).map(|s| q.max_row(s)).sum::<f64>(),
            FChoice::BatchMeanMax => {
                (0..q.n_states()).map(|s| q.max_row(s)).sum::<f64>() / q.n_states() as f64
            }
        }
    }
}

impl fmt::Display for FChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FChoice::ReferenceState { s, a } => write!(f, "reference:{s}:{a}"),
            FChoice::ReferenceStateMax { s } => write!(f, "reference_max:{s}"),
            FChoice::GainSum { g } => write!(f, "gain_sum:{g}"),
            FChoice::GainMaxSum { g } => write!(f, "gain_max_sum:{g}"),
            FChoice::BatchMeanMax => write!(f, "batch_mean_max"),
        }
    }
}

impl FromStr for FChoice {
    type Err = Error;

    /// `reference:S:A`, `reference_max:S`, `gain_sum:G`, `gain_max_sum:G`, `batch_mean_max`.
    fn from_str(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        let bad = || Error::validation("f", format!("cannot parse `{text}`"));
        let int = |p: &str| p.parse::<usize>().map_err(|_| bad());
        let real = |p: &str| p.parse::<f64>().map_err(|_| bad());
        match parts.as_slice() {
            ["reference", s, a] => Ok(FChoice::reference(int(s)?, int(a)?)),
            ["reference_max", s] => Ok(FChoice::reference_max(int(s)?)),
            ["gain_sum", g] => Ok(FChoice::gain_sum(real(g)?)),
            ["gain_max_sum", g] => Ok(FChoice::gain_max_sum(real(g)?)),
            ["batch_mean_max"] => Ok(FChoice::BatchMeanMax),
            _ => Err(bad()),
        }
    }
}

/// Polynomial step size `c(k) = c0 / (k + 1)^p` with `p ∈ (0.5, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub c0: f64,
    pub exponent: f64,
    /// Index by the per-pair visit count instead of the global step.
    pub per_visit: bool,
}

/// Numerical evidence that a schedule is summable-but-square-summable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleReport {
    /// Ratio of the last two dyadic-window sums of `c(k)`; ≈ 1 or above means divergence.
    pub window_ratio: f64,
    /// Same for `c(k)²`; strictly below 1 means the partial sums are Cauchy.
    pub square_window_ratio: f64,
    pub ok: bool,
}

/// Evidence for `b(k)/a(k) → 0` over a probe horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairReport {
    pub first_ratio: f64,
    pub last_ratio: f64,
    pub monotone: bool,
    pub ok: bool,
}

impl StepSchedule {
    pub fn polynomial(c0: f64, exponent: f64, per_visit: bool) -> Result<Self> {
        if !(exponent > 0.5 && exponent <= 1.0) {
            return Err(Error::validation(
                "schedule.exponent",
                format!("{exponent} is outside (0.5, 1]"),
            ));
        }
        if !(c0 >= 0.0 && c0.is_finite()) {
            return Err(Error::validation("schedule.c0", "must be finite and nonnegative"));
        }
        Ok(StepSchedule {
            c0,
            exponent,
            per_visit,
        })
    }

    pub fn at(&self, k: u64) -> f64 {
        self.c0 / ((k + 1) as f64).powf(self.exponent)
    }

    /// Compares sums over the dyadic windows `[2^j, 2^{j+1})` up to `2^max_log2`.
    pub fn report(&self, max_log2: u32) -> ScheduleReport {
        let window = |j: u32, sq: bool| -> f64 {
            ((1u64 << j)..(1u64 << (j + 1)))
                .map(|k| {
                    let c = self.at(k - 1);
                    if sq {
                        c * c
                    } else {
                        c
                    }
                })
                .sum()
        };
        let j = max_log2.max(2) - 1;
        let window_ratio = window(j, false) / window(j - 1, false);
        let square_window_ratio = window(j, true) / window(j - 1, true);
        ScheduleReport {
            window_ratio,
            square_window_ratio,
            ok: self.c0 > 0.0 && window_ratio > 1.0 - 1e-3 && square_window_ratio < 1.0,
        }
    }

    /// `slow(k) / fast(k)` must shrink monotonically over `[0, horizon)`.
    pub fn pair_report(fast: &StepSchedule, slow: &StepSchedule, horizon: u64) -> PairReport {
        let ratio = |k: u64| slow.at(k) / fast.at(k);
        let mut monotone = true;
        let mut prev = ratio(0);
        let mut k = 1;
        while k < horizon {
            let r = ratio(k);
            if r > prev {
                monotone = false;
            }
            prev = r;
            k = (k * 2).max(k + 1);
        }
        let first_ratio = ratio(0);
        let last_ratio = ratio(horizon.saturating_sub(1));
        PairReport {
            first_ratio,
            last_ratio,
            monotone,
            ok: monotone && last_ratio < first_ratio && slow.exponent > fast.exponent,
        }
    }
}

/// Validates a schedule and returns it with its numerical report.
pub fn make_schedule(c0: f64, exponent: f64, per_visit: bool) -> Result<(StepSchedule, ScheduleReport)> {
    let schedule = StepSchedule::polynomial(c0, exponent, per_visit)?;
    let report = schedule.report(20);
    Ok((schedule, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub r_inf: f64,
    pub eta: f64,
    pub enabled: bool,
}

impl ClipConfig {
    pub fn apply(&self, xi: f64) -> f64 {
        if self.enabled {
            g_eta(xi, self.r_inf, self.eta)
        } else {
            xi
        }
    }
}

/// One observed step `(s, a, r, s')` of a finite MDP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TabularTransition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
}

/// Mutable state of tabular RVI / delayed-f(Q) learning.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularTrainer {
    pub q: QTable,
    pub xi: f64,
    visits: Vec<u64>,
    step: u64,
    /// `a(·)`, drives `ξ`.
    pub fast: StepSchedule,
    /// `b(·)`, drives `Q`.
    pub slow: StepSchedule,
    pub f: FChoice,
    pub clip: ClipConfig,
    pub epsilon: f64,
}

impl TabularTrainer {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        fast: StepSchedule,
        slow: StepSchedule,
        f: FChoice,
        clip: ClipConfig,
        epsilon: f64,
    ) -> Result<Self> {
        f.check_shape(n_states, n_actions)?;
        Ok(TabularTrainer {
            q: QTable::zeros(n_states, n_actions),
            xi: 0.0,
            visits: vec![0; n_states * n_actions],
            step: 0,
            fast,
            slow,
            f,
            clip,
            epsilon,
        })
    }

    pub fn visits(&self, s: usize, a: usize) -> u64 {
        self.visits[s * self.q.n_actions() + a]
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// The `ξ̂` used in Q updates.
    pub fn xi_hat(&self) -> f64 {
        self.clip.apply(self.xi)
    }

    fn slow_rate(&self, s: usize, a: usize) -> f64 {
        let index = if self.slow.per_visit {
            self.visits(s, a)
        } else {
            self.step
        };
        self.slow.at(index)
    }

    fn fast_rate(&self) -> f64 {
        self.fast.at(self.step)
    }

    /// Plain RVI Q-learning: `Q(s,a) += b·(r - f(Q) + max Q(s',·) - Q(s,a))`.
    pub fn rvi_q_step(&mut self, t: &TabularTransition, f_sample: Option<&[usize]>) -> Result<()> {
        let fq = self.f.f_value(&self.q, f_sample)?;
        let rate = self.slow_rate(t.s, t.a);
        let old = self.q.get(t.s, t.a);
        let target = t.r - fq + self.q.max_row(t.s_next);
        self.q.set(t.s, t.a, old + rate * (target - old));
        self.visits[t.s * self.q.n_actions() + t.a] += 1;
        self.step += 1;
        Ok(())
    }

    /// Delayed f(Q): Q moves on the slow schedule against `ξ̂`, then `ξ`
    /// tracks `f(Q; sample)` of the just-updated table on the fast schedule.
    pub fn delayed_rvi_step(
        &mut self,
        t: &TabularTransition,
        f_sample: Option<&[usize]>,
    ) -> Result<()> {
        let rate = self.slow_rate(t.s, t.a);
        let old = self.q.get(t.s, t.a);
        let target = t.r - self.xi_hat() + self.q.max_row(t.s_next);
        self.q.set(t.s, t.a, old + rate * (target - old));
        self.visits[t.s * self.q.n_actions() + t.a] += 1;

        let fq = self.f.f_value(&self.q, f_sample)?;
        self.xi += self.fast_rate() * (fq - self.xi);
        self.step += 1;
        Ok(())
    }

    /// ε-greedy over the current table.
    pub fn behavior_action<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        if rng.random::<f64>() < self.epsilon {
            rng.random_range(0..self.q.n_actions())
        } else {
            self.q.argmax_row(s)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TabularAlgorithm {
    Rvi,
    DelayedRvi,
}

/// Settings for [`train_tabular`]. Defaults follow the tabular defaults of this crate:
/// `a(k) = 1/(k+1)^0.6`, `b(ν) = 1/(ν+1)^0.9`, ε = 0.1, η = 1, clip on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TabularConfig {
    pub algorithm: TabularAlgorithm,
    pub f: FChoice,
    pub fast: StepSchedule,
    pub slow: StepSchedule,
    pub clip_enabled: bool,
    pub eta: f64,
    pub epsilon: f64,
    pub total_steps: u64,
    pub rng_seed: u64,
    pub record_every: u64,
    /// States drawn (uniformly from visited states) per sampled `f` evaluation.
    pub f_sample_size: usize,
}

impl Default for TabularConfig {
    fn default() -> Self {
        TabularConfig {
            algorithm: TabularAlgorithm::DelayedRvi,
            f: FChoice::BatchMeanMax,
            fast: StepSchedule {
                c0: 1.0,
                exponent: 0.6,
                per_visit: false,
            },
            slow: StepSchedule {
                c0: 1.0,
                exponent: 0.9,
                per_visit: true,
            },
            clip_enabled: true,
            eta: 1.0,
            epsilon: 0.1,
            total_steps: 200_000,
            rng_seed: 0,
            record_every: 1_000,
            f_sample_size: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub f_of_q: f64,
    pub xi: f64,
    pub bellman_residual: f64,
    pub q_max_abs: f64,
}

pub const TRACE_CSV_HEADER: &str = "step,f_of_q,xi,bellman_residual,q_max_abs";

#[derive(Debug, Clone, PartialEq)]
pub struct TabularTrace {
    pub rows: Vec<TraceRow>,
    pub trainer: TabularTrainer,
}

impl TabularTrace {
    pub fn final_row(&self) -> &TraceRow {
        self.rows.last().expect("trace always records the final step")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.f_of_q, r.xi, r.bellman_residual, r.q_max_abs
            ));
        }
        out
    }
}

/// Runs ε-greedy behavior on a simulated chain of `mdp`, applying the
/// configured update every step. Deterministic given `rng_seed`.
pub fn train_tabular(mdp: &TabularMdp, config: &TabularConfig) -> Result<TabularTrace> {
    let fast = StepSchedule::polynomial(config.fast.c0, config.fast.exponent, config.fast.per_visit)?;
    let slow = StepSchedule::polynomial(config.slow.c0, config.slow.exponent, config.slow.per_visit)?;
    let clip = ClipConfig {
        r_inf: mdp.r_inf(),
        eta: config.eta,
        enabled: config.clip_enabled,
    };
    let mut trainer = TabularTrainer::new(
        mdp.n_states(),
        mdp.n_actions(),
        fast,
        slow,
        config.f.clone(),
        clip,
        config.epsilon,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut visited_states: Vec<usize> = Vec::new();
    let mut seen = vec![false; mdp.n_states()];
    let mut sample = Vec::with_capacity(config.f_sample_size.max(1));
    let mut rows = Vec::new();
    let record_every = config.record_every.max(1);

    let record = |trainer: &TabularTrainer, step: u64| {
        let f_of_q = trainer.f.expected(&trainer.q);
        TraceRow {
            step,
            f_of_q,
            xi: match config.algorithm {
                TabularAlgorithm::DelayedRvi => trainer.xi,
                TabularAlgorithm::Rvi => f_of_q,
            },
            bellman_residual: bellman_residual(mdp, &trainer.q, f_of_q),
            q_max_abs: trainer.q.max_abs(),
        }
    };

    let mut s = rng.random_range(0..mdp.n_states());
    for step in 0..config.total_steps {
        if !seen[s] {
            seen[s] = true;
            visited_states.push(s);
        }
        let a = trainer.behavior_action(s, &mut rng);
        let s_next = mdp.sample_next(s, a, &mut rng);
        let t = TabularTransition {
            s,
            a,
            r: mdp.reward(s, a),
            s_next,
        };
        let f_sample = if trainer.f.is_sampled() {
            sample.clear();
            for _ in 0..config.f_sample_size.max(1) {
                sample.push(visited_states[rng.random_range(0..visited_states.len())]);
            }
            Some(sample.as_slice())
        } else {
            None
        };
        match config.algorithm {
            TabularAlgorithm::Rvi => trainer.rvi_q_step(&t, f_sample)?,
            TabularAlgorithm::DelayedRvi => trainer.delayed_rvi_step(&t, f_sample)?,
        }
        s = s_next;
        if (step + 1) % record_every == 0 || step + 1 == config.total_steps {
            rows.push(record(&trainer, step + 1));
        }
    }
    if rows.is_empty() {
        rows.push(record(&trainer, 0));
    }
    Ok(TabularTrace { rows, trainer })
}

/// Exact soft policy improvement: `π_new(·|s) ∝ exp(Q^{π_old}(s, ·))` with
/// `Q^{π_old}` the average-reward soft Q function.
pub fn soft_policy_improve(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<TabularPolicy> {
    if policy.probs().iter().any(|p| !(*p > 0.0)) {
        return Err(Error::validation("policy", "soft improvement needs a strictly positive policy"));
    }
    let (_, q) = evaluate_bias(mdp, policy, true)?;
    Ok(TabularPolicy::boltzmann(&q))
}
