//! Finite MDPs and the exact oracles every other module is tested against.
//!
//! All solvers are dense and direct. They are meant for a few hundred
//! state-action pairs at most.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::FChoice;

const ROW_SUM_TOL: f64 = 1e-12;
const PIVOT_RATIO_TOL: f64 = 1e-11;

/// A finite MDP with transition tensor `p(s' | s, a)` and reward matrix `r(s, a)`.
///
/// Storage is flat and row-major: `transition[(s * n_actions + a) * n_states + s']`
/// and `reward[s * n_actions + a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    r_inf: f64,
    terminal: Vec<bool>,
}

/// On-disk JSON layout of a [`TabularMdp`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MdpDocument {
    n_states: usize,
    n_actions: usize,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    r_inf: f64,
    #[serde(default)]
    terminal: Vec<bool>,
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        let (ns, na) = (doc.n_states, doc.n_actions);
        if doc.transition.len() != ns {
            return Err(Error::validation(
                "transition",
                format!("expected {ns} state rows, found {}", doc.transition.len()),
            ));
        }
        if doc.reward.len() != ns {
            return Err(Error::validation(
                "reward",
                format!("expected {ns} state rows, found {}", doc.reward.len()),
            ));
        }
        let mut transition = Vec::with_capacity(ns * na * ns);
        for (s, per_action) in doc.transition.iter().enumerate() {
            if per_action.len() != na {
                return Err(Error::validation(
                    format!("transition[{s}]"),
                    format!("expected {na} action rows, found {}", per_action.len()),
                ));
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != ns {
                    return Err(Error::validation(
                        format!("transition[{s}][{a}]"),
                        format!("expected {ns} entries, found {}", row.len()),
                    ));
                }
                transition.extend_from_slice(row);
            }
        }
        let mut reward = Vec::with_capacity(ns * na);
        for (s, row) in doc.reward.iter().enumerate() {
            if row.len() != na {
                return Err(Error::validation(
                    format!("reward[{s}]"),
                    format!("expected {na} entries, found {}", row.len()),
                ));
            }
            reward.extend_from_slice(row);
        }
        TabularMdp::new(ns, na, transition, reward, doc.r_inf, doc.terminal)
    }
}

impl From<TabularMdp> for MdpDocument {
    fn from(mdp: TabularMdp) -> Self {
        let (ns, na) = (mdp.n_states, mdp.n_actions);
        let transition = (0..ns)
            .map(|s| (0..na).map(|a| mdp.row(s, a).to_vec()).collect())
            .collect();
        let reward = (0..ns)
            .map(|s| mdp.reward[s * na..(s + 1) * na].to_vec())
            .collect();
        MdpDocument {
            n_states: ns,
            n_actions: na,
            transition,
            reward,
            r_inf: mdp.r_inf,
            terminal: mdp.terminal,
        }
    }
}

impl TabularMdp {
    /// Builds and validates an MDP from flat storage. `terminal` may be empty.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        r_inf: f64,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        if n_states == 0 {
            return Err(Error::validation("n_states", "must be positive"));
        }
        if n_actions == 0 {
            return Err(Error::validation("n_actions", "must be positive"));
        }
        let mdp = TabularMdp {
            n_states,
            n_actions,
            transition,
            reward,
            r_inf,
            terminal,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// Checks shapes, row sums, nonnegativity and the reward bound.
    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if self.transition.len() != ns * na * ns {
            return Err(Error::validation(
                "transition",
                format!("expected {} entries, found {}", ns * na * ns, self.transition.len()),
            ));
        }
        if self.reward.len() != ns * na {
            return Err(Error::validation(
                "reward",
                format!("expected {} entries, found {}", ns * na, self.reward.len()),
            ));
        }
        if !self.terminal.is_empty() && self.terminal.len() != ns {
            return Err(Error::validation(
                "terminal",
                format!("expected 0 or {ns} flags, found {}", self.terminal.len()),
            ));
        }
        if !(self.r_inf >= 0.0 && self.r_inf.is_finite()) {
            return Err(Error::validation("r_inf", "must be finite and nonnegative"));
        }
        for s in 0..ns {
            for a in 0..na {
                let row = self.row(s, a);
                if let Some(x) = row.iter().find(|x| !(**x >= 0.0 && x.is_finite())) {
                    return Err(Error::validation(
                        format!("transition[{s}][{a}]"),
                        format!("entry {x} is not a finite nonnegative probability"),
                    ));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::validation(
                        format!("transition[{s}][{a}]"),
                        format!("row sums to {sum}, expected 1"),
                    ));
                }
                let r = self.reward(s, a);
                if !r.is_finite() || r.abs() > self.r_inf {
                    return Err(Error::validation(
                        format!("reward[{s}][{a}]"),
                        format!("|{r}| exceeds r_inf = {}", self.r_inf),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            // serde wraps our own validation message; surface it as a validation error.
            Error::validation("mdp", e.to_string())
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("MDP serialization cannot fail")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn r_inf(&self) -> f64 {
        self.r_inf
    }

    /// `p(· | s, a)`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal.get(s).copied().unwrap_or(false)
    }

    /// Same dynamics with a different reward matrix (and matching `r_inf`).
    pub fn with_reward(&self, reward: Vec<f64>) -> Result<Self> {
        let r_inf = reward.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        TabularMdp::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            reward,
            r_inf,
            self.terminal.clone(),
        )
    }

    /// Draws `s' ~ p(· | s, a)` by inverse CDF.
    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let row = self.row(s, a);
        let mut acc = 0.0;
        for (next, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return next;
            }
        }
        // Rounding left u above the final partial sum; take the last reachable state.
        row.iter().rposition(|p| *p > 0.0).unwrap_or(self.n_states - 1)
    }

    /// State-to-state matrix `P_π[s][s'] = Σ_a π(a|s) p(s'|s,a)`, row-major.
    pub fn policy_matrix(&self, policy: &TabularPolicy) -> Vec<f64> {
        let ns = self.n_states;
        let mut m = vec![0.0; ns * ns];
        for s in 0..ns {
            for a in 0..self.n_actions {
                let pa = policy.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                for (dst, p) in m[s * ns..(s + 1) * ns].iter_mut().zip(self.row(s, a)) {
                    *dst += pa * p;
                }
            }
        }
        m
    }

    fn check_policy(&self, policy: &TabularPolicy) -> Result<()> {
        if policy.n_states != self.n_states || policy.n_actions != self.n_actions {
            return Err(Error::validation(
                "policy",
                format!(
                    "shape {}x{} does not match MDP {}x{}",
                    policy.n_states, policy.n_actions, self.n_states, self.n_actions
                ),
            ));
        }
        Ok(())
    }
}

/// A stationary Markov policy `π(a | s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn from_probs(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::Shape {
                expected: n_states * n_actions,
                actual: probs.len(),
            });
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            if row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::validation(format!("policy[{s}]"), "negative probability"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::validation(
                    format!("policy[{s}]"),
                    format!("row sums to {sum}"),
                ));
            }
        }
        Ok(TabularPolicy {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// One-hot rows selecting `actions[s]`.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        TabularPolicy {
            n_states: actions.len(),
            n_actions,
            probs,
        }
    }

    /// Softmax of each row of `q` (max-subtracted).
    pub fn boltzmann(q: &QTable) -> Self {
        let na = q.n_actions;
        let mut probs = Vec::with_capacity(q.values.len());
        for s in 0..q.n_states {
            let row = q.row(s);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            probs.extend(exps.iter().map(|e| e / z));
        }
        TabularPolicy {
            n_states: q.n_states,
            n_actions: na,
            probs,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Index of the largest probability in each row (first on ties).
    pub fn greedy_actions(&self) -> Vec<usize> {
        (0..self.n_states).map(|s| argmax(self.row(s))).collect()
    }

    /// Largest absolute probability difference.
    pub fn max_abs_diff(&self, other: &TabularPolicy) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Per-state entropy `-Σ_a π(a|s) log π(a|s)` with `0 log 0 = 0`.
    pub fn entropy(&self, s: usize) -> f64 {
        -self.row(s).iter().map(|p| xlogx(*p)).sum::<f64>()
    }
}

fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Dense action-value table `Q(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        QTable {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn from_values(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_states * n_actions {
            return Err(Error::Shape {
                expected: n_states * n_actions,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("q", "entries must be finite"));
        }
        Ok(QTable {
            n_states,
            n_actions,
            values,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_row(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn argmax_row(&self, s: usize) -> usize {
        argmax(self.row(s))
    }

    pub fn greedy_actions(&self) -> Vec<usize> {
        (0..self.n_states).map(|s| self.argmax_row(s)).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `Q + c·1`.
    pub fn shifted(&self, c: f64) -> Self {
        self.map(|v| v + c)
    }

    /// `c·Q`.
    pub fn scaled(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        QTable {
            n_states: self.n_states,
            n_actions: self.n_actions,
            values: self.values.iter().map(|v| f(*v)).collect(),
        }
    }
}

/// Stationary state distribution `d_π(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution {
    pub d: Vec<f64>,
}

impl StationaryDistribution {
    /// `d_π(s, a) = d_π(s) π(a|s)`, flat row-major.
    pub fn state_action(&self, policy: &TabularPolicy) -> Vec<f64> {
        let na = policy.n_actions;
        let mut out = Vec::with_capacity(self.d.len() * na);
        for (s, ds) in self.d.iter().enumerate() {
            out.extend(policy.row(s).iter().map(|p| ds * p));
        }
        out
    }
}

/// Outcome of [`validate_ergodic`].
#[derive(Debug, Clone, PartialEq)]
pub struct ErgodicityReport {
    pub ok: bool,
    /// A probed policy whose induced chain is reducible or periodic.
    pub witness: Option<TabularPolicy>,
}

/// Probes random policies for an irreducible, aperiodic induced chain.
///
/// A strictly positive transition tensor is accepted immediately. Otherwise
/// each probe alternates between a random full-support policy and a random
/// deterministic one; full-support probes alone would hide reducibility that
/// only shows under some deterministic policy.
pub fn validate_ergodic(
    mdp: &TabularMdp,
    n_probe_policies: usize,
    rng_seed: u64,
) -> Result<ErgodicityReport> {
    mdp.validate()?;
    let ok = ErgodicityReport {
        ok: true,
        witness: None,
    };
    if mdp.n_states == 1 || mdp.transition.iter().all(|p| *p > 0.0) {
        return Ok(ok);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    for probe in 0..n_probe_policies.max(1) {
        let policy = if probe % 2 == 0 {
            let mut probs = Vec::with_capacity(ns * na);
            for _ in 0..ns {
                let w: Vec<f64> = (0..na).map(|_| rng.random::<f64>() + 1e-3).collect();
                let z: f64 = w.iter().sum();
                probs.extend(w.iter().map(|x| x / z));
            }
            TabularPolicy::from_probs(ns, na, probs)?
        } else {
            let actions: Vec<usize> = (0..ns).map(|_| rng.random_range(0..na)).collect();
            TabularPolicy::deterministic(&actions, na)
        };
        if !chain_is_ergodic(&mdp.policy_matrix(&policy), ns) {
            return Ok(ErgodicityReport {
                ok: false,
                witness: Some(policy),
            });
        }
    }
    Ok(ok)
}

/// Irreducible (one strongly connected component) and period 1.
fn chain_is_ergodic(p: &[f64], n: usize) -> bool {
    let edges = |u: usize| (0..n).filter(move |v| p[u * n + v] > 0.0);
    // Forward BFS levels from state 0.
    let mut level = vec![usize::MAX; n];
    level[0] = 0;
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(u) = queue.pop_front() {
        for v in edges(u) {
            if level[v] == usize::MAX {
                level[v] = level[u] + 1;
                queue.push_back(v);
            }
        }
    }
    if level.contains(&usize::MAX) {
        return false;
    }
    // Backward reachability to state 0.
    let mut seen = vec![false; n];
    seen[0] = true;
    let mut stack = vec![0usize];
    while let Some(v) = stack.pop() {
        for u in 0..n {
            if !seen[u] && p[u * n + v] > 0.0 {
                seen[u] = true;
                stack.push(u);
            }
        }
    }
    if seen.contains(&false) {
        return false;
    }
    // Period = gcd over edges of level(u) + 1 - level(v).
    let mut period = 0usize;
    for u in 0..n {
        for v in edges(u) {
            let diff = (level[u] + 1).abs_diff(level[v]);
            period = gcd(period, diff);
        }
    }
    period == 1
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Solves `dᵀ P_π = dᵀ`, `Σ d = 1` directly (last balance row replaced by the
/// normalization row).
pub fn stationary_distribution(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
) -> Result<StationaryDistribution> {
    mdp.check_policy(policy)?;
    let n = mdp.n_states;
    let p = mdp.policy_matrix(policy);
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            // Row i of (Pᵀ - I): Σ_j P[j][i] d_j - d_i.
            a[(i, j)] = p[j * n + i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let d = solve_dense(a, b, "stationary distribution")?;
    let mut d: Vec<f64> = d.iter().map(|x| if *x < 0.0 && *x > -1e-12 { 0.0 } else { *x }).collect();
    if d.iter().any(|x| *x < 0.0) {
        return Err(Error::Degenerate(
            "stationary solve produced negative mass".into(),
        ));
    }
    let z: f64 = d.iter().sum();
    d.iter_mut().for_each(|x| *x /= z);
    Ok(StationaryDistribution { d })
}

/// Lazy power iteration `d ← d (I + P_π) / 2`; independent cross-check for
/// [`stationary_distribution`].
pub fn stationary_by_power_iteration(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    tol: f64,
    max_iter: usize,
) -> Result<StationaryDistribution> {
    mdp.check_policy(policy)?;
    let n = mdp.n_states;
    let p = mdp.policy_matrix(policy);
    let mut d = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for _ in 0..max_iter {
        next.iter_mut().zip(&d).for_each(|(x, di)| *x = 0.5 * di);
        for i in 0..n {
            for j in 0..n {
                next[j] += 0.5 * d[i] * p[i * n + j];
            }
        }
        let change = next.iter().zip(&d).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut d, &mut next);
        if change < tol {
            return Ok(StationaryDistribution { d });
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: f64::NAN,
    })
}

fn solve_dense(a: DMatrix<f64>, b: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let lu = a.full_piv_lu();
    let u = lu.u();
    let diag: Vec<f64> = (0..u.nrows().min(u.ncols())).map(|i| u[(i, i)].abs()).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min / max < PIVOT_RATIO_TOL {
        return Err(Error::Degenerate(format!(
            "{what}: system is singular (pivot ratio {:e})",
            if max > 0.0 { min / max } else { 0.0 }
        )));
    }
    lu.solve(&b)
        .ok_or_else(|| Error::Degenerate(format!("{what}: solve failed")))
}

/// `ρ^π = Σ_{s,a} d_π(s,a) r(s,a)`.
pub fn average_reward(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<f64> {
    let d = stationary_distribution(mdp, policy)?;
    Ok(d.state_action(policy)
        .iter()
        .zip(&mdp.reward)
        .map(|(w, r)| w * r)
        .sum())
}

/// `ρ^π_soft = Σ_{s,a} d_π(s,a) (r(s,a) - log π(a|s))`, with `0 log 0 = 0`.
pub fn soft_average_reward(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<f64> {
    let d = stationary_distribution(mdp, policy)?;
    let na = mdp.n_actions;
    let mut total = 0.0;
    for (s, ds) in d.d.iter().enumerate() {
        for a in 0..na {
            let p = policy.prob(s, a);
            if p > 0.0 {
                total += ds * p * (mdp.reward(s, a) - p.ln());
            }
        }
    }
    Ok(total)
}

/// Solves the average-reward Poisson equation for `policy`.
///
/// Plain: `Q(s,a) = r(s,a) - ρ + Σ_{s'} p(s'|s,a) Σ_{a'} π(a'|s') Q(s',a')`.
///
/// Entropy-augmented (soft): the inner expectation becomes
/// `Σ_{a'} π(a'|s') (Q(s',a') - log π(a'|s'))` and `ρ` is the soft average
/// reward. The gauge is fixed by `Σ d_π(s,a) Q(s,a) = 0`.
pub fn evaluate_bias(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    entropy_augmented: bool,
) -> Result<(f64, QTable)> {
    let d = stationary_distribution(mdp, policy)?;
    let dsa = d.state_action(policy);
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let n = ns * na;

    let next_entropy: Vec<f64> = (0..ns).map(|s| policy.entropy(s)).collect();
    let effective_reward: Vec<f64> = (0..n)
        .map(|i| {
            let (s, a) = (i / na, i % na);
            let bonus = if entropy_augmented {
                mdp.row(s, a).iter().zip(&next_entropy).map(|(p, h)| p * h).sum()
            } else {
                0.0
            };
            mdp.reward(s, a) + bonus
        })
        .collect();

    // Unknowns: Q (n entries) then ρ.
    let mut a = DMatrix::<f64>::zeros(n + 1, n + 1);
    let mut b = DVector::<f64>::zeros(n + 1);
    for i in 0..n {
        let (s, act) = (i / na, i % na);
        a[(i, i)] += 1.0;
        for (s2, p) in mdp.row(s, act).iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            for a2 in 0..na {
                a[(i, s2 * na + a2)] -= p * policy.prob(s2, a2);
            }
        }
        a[(i, n)] = 1.0;
        b[i] = effective_reward[i];
    }
    for (j, w) in dsa.iter().enumerate() {
        a[(n, j)] = *w;
    }
    let x = solve_dense(a, b, "Poisson equation")?;
    let rho = x[n];
    let q = QTable::from_values(ns, na, x.iter().take(n).copied().collect())?;
    Ok((rho, q))
}

/// `T(Q)(s,a) = r(s,a) + Σ_{s'} p(s'|s,a) max_{a'} Q(s',a')`.
pub fn bellman_operator(mdp: &TabularMdp, q: &QTable) -> QTable {
    let maxes: Vec<f64> = (0..mdp.n_states).map(|s| q.max_row(s)).collect();
    let values = (0..mdp.n_pairs())
        .map(|i| {
            let (s, a) = (i / mdp.n_actions, i % mdp.n_actions);
            mdp.reward(s, a)
                + mdp
                    .row(s, a)
                    .iter()
                    .zip(&maxes)
                    .map(|(p, m)| p * m)
                    .sum::<f64>()
        })
        .collect();
    QTable {
        n_states: mdp.n_states,
        n_actions: mdp.n_actions,
        values,
    }
}

/// `sup_{s,a} |r(s,a) - ρ + Σ_{s'} p(s'|s,a) max_{a'} q(s',a') - q(s,a)|`.
pub fn bellman_residual(mdp: &TabularMdp, q: &QTable, rho: f64) -> f64 {
    let tq = bellman_operator(mdp, q);
    tq.values
        .iter()
        .zip(&q.values)
        .map(|(t, v)| (t - rho - v).abs())
        .fold(0.0, f64::max)
}

/// Synchronous relative value iteration `Q ← Q + ω (T(Q) - f(Q)·1 - Q)`.
///
/// The relaxation `ω = min(1, 1/u)` keeps the constant component stable for
/// functionals with `u > 1` and leaves the fixed point unchanged. Iteration
/// stops once the Bellman residual at `ρ = f(Q)` drops below `tol`; the
/// returned gain is `f(q*)`.
pub fn solve_optimal_rvi(
    mdp: &TabularMdp,
    f_choice: &FChoice,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, QTable)> {
    f_choice.check_shape(mdp.n_states, mdp.n_actions)?;
    let u = f_choice.u(mdp.n_states, mdp.n_actions);
    let omega = (1.0 / u).min(1.0);
    let mut q = QTable::zeros(mdp.n_states, mdp.n_actions);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let fq = f_choice.expected(&q);
        let tq = bellman_operator(mdp, &q);
        residual = tq
            .values
            .iter()
            .zip(&q.values)
            .map(|(t, v)| (t - fq - v).abs())
            .fold(0.0, f64::max);
        if residual < tol {
            return Ok((fq, q));
        }
        for (v, t) in q.values.iter_mut().zip(&tq.values) {
            *v += omega * (t - fq - *v);
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual,
    })
}

/// Largest number of deterministic policies [`enumerate_optimal`] will try.
pub const ENUMERATION_LIMIT: u64 = 1_000_000;

/// Brute force over every deterministic policy; returns the best gain and
/// the first policy attaining it.
pub fn enumerate_optimal(mdp: &TabularMdp) -> Result<(f64, TabularPolicy)> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let count = (na as u64)
        .checked_pow(ns as u32)
        .filter(|c| *c <= ENUMERATION_LIMIT)
        .ok_or_else(|| {
            Error::TooLarge(format!(
                "{na}^{ns} deterministic policies exceeds the limit of {ENUMERATION_LIMIT}"
            ))
        })?;
    let mut actions = vec![0usize; ns];
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..count {
        let policy = TabularPolicy::deterministic(&actions, na);
        let rho = average_reward(mdp, &policy)?;
        if best.as_ref().is_none_or(|(b, _)| rho > *b + 1e-12) {
            best = Some((rho, actions.clone()));
        }
        // Mixed-radix increment.
        for digit in actions.iter_mut() {
            *digit += 1;
            if *digit < na {
                break;
            }
            *digit = 0;
        }
    }
    let (rho, acts) = best.expect("at least one policy");
    Ok((rho, TabularPolicy::deterministic(&acts, na)))
}
