//! Seeded experiment runs, deterministic evaluation, CSV/SVG output and the
//! oracle report behind the command-line tool.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentConfig, Checkpoint};
use crate::envs::{ContinuousEnv, EnvSpec};
use crate::error::{Error, Result};
use crate::mdp::{bellman_residual, enumerate_optimal, solve_optimal_rvi, QTable, TabularMdp, ENUMERATION_LIMIT};
use crate::nn::GaussianPolicy;
use crate::tabular::{train_tabular, FChoice, TabularConfig};

pub const EVAL_CSV_HEADER: &str =
    "step,seed,total_return,survival_steps,average_reward,xi,xi_reset,r_cost,alpha";

/// Stream of the per-seed generator reserved for evaluation episodes;
/// training draws come from stream 0.
const EVAL_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub agent: AgentConfig,
    pub total_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub episode_cap: usize,
    pub seeds: Vec<u64>,
    /// Where `train` writes when no `--out` is given.
    pub output_dir: Option<PathBuf>,
    /// Used instead of `agent` when `env` is tabular.
    pub tabular: TabularConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvSpec::Pendulum,
            agent: AgentConfig::default(),
            total_steps: 100_000,
            eval_every: 5_000,
            eval_episodes: 10,
            episode_cap: 1_000,
            seeds: (0..5).collect(),
            output_dir: None,
            tabular: TabularConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::validation("config", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("total_steps", self.total_steps),
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes),
            ("episode_cap", self.episode_cap),
        ] {
            if v == 0 {
                return Err(Error::validation(field, "must be positive"));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::validation("seeds", "need at least one seed"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::validation("seeds", "seeds must be distinct"));
        }
        if self.env.is_tabular() {
            let t = &self.tabular;
            if !(0.0..=1.0).contains(&t.epsilon) {
                return Err(Error::validation("tabular.epsilon", "must lie in [0, 1]"));
            }
            if t.record_every == 0 {
                return Err(Error::validation("tabular.record_every", "must be positive"));
            }
            Ok(())
        } else {
            self.agent.validate()
        }
    }
}

/// One evaluation row of a learning curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub seed: u64,
    pub total_return: f64,
    pub survival_steps: f64,
    pub average_reward: f64,
    pub xi: f64,
    pub xi_reset: f64,
    pub r_cost: f64,
    pub alpha: f64,
}

impl EvalRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.seed,
            self.total_return,
            self.survival_steps,
            self.average_reward,
            self.xi,
            self.xi_reset,
            self.r_cost,
            self.alpha
        )
    }
}

pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Episode means under deterministic actions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub total_return: f64,
    pub survival_steps: f64,
    /// `total_return / survival_steps`.
    pub average_reward: f64,
}

/// Generator for evaluation episodes of `seed`, disjoint from training draws.
pub fn eval_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_STREAM);
    rng
}

/// Runs `episodes` episodes with `tanh(mean)` actions, each ending at a
/// terminal state or after `min(cap, env.time_limit())` steps.
pub fn evaluate_policy(
    env: &mut dyn ContinuousEnv,
    actor: &GaussianPolicy,
    episodes: usize,
    cap: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(Error::validation("eval_episodes", "must be positive"));
    }
    let cap = cap.min(env.time_limit());
    let (mut total, mut steps) = (0.0, 0usize);
    for _ in 0..episodes {
        let mut obs = env.reset(rng);
        for _ in 0..cap {
            let out = env.step(&actor.deterministic_action(&obs)?);
            total += out.reward;
            steps += 1;
            if out.terminal {
                break;
            }
            obs = out.observation;
        }
    }
    let n = episodes as f64;
    let (total_return, survival_steps) = (total / n, steps as f64 / n);
    Ok(EvalSummary {
        total_return,
        survival_steps,
        average_reward: total_return / survival_steps,
    })
}

/// Everything one seeded deep run produced.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<EvalRecord>,
    /// Environment steps (1-based) at which a terminal state forced a reset.
    pub reset_steps: Vec<usize>,
    pub min_r_cost: f64,
    pub total_steps: usize,
    pub checkpoint: Checkpoint,
}

impl SeedRun {
    /// Resets per step over the step range `(from, to]`.
    pub fn reset_frequency(&self, from: usize, to: usize) -> f64 {
        let n = self.reset_steps.iter().filter(|&&s| s > from && s <= to).count();
        n as f64 / (to - from) as f64
    }

    pub fn to_csv(&self) -> String {
        records_to_csv(&self.records)
    }
}

fn continuous_env(spec: &EnvSpec) -> Result<Box<dyn ContinuousEnv>> {
    spec.continuous()
        .ok_or_else(|| Error::validation("env", format!("`{spec}` is not a continuous-control task")))
}

/// Trains one seed, evaluating every `eval_every` steps and at the end.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    run_seed_with(config, seed, |_| {})
}

/// [`run_seed`] with a callback on every new evaluation record.
pub fn run_seed_with(
    config: &ExperimentConfig,
    seed: u64,
    mut on_record: impl FnMut(&EvalRecord),
) -> Result<SeedRun> {
    config.validate()?;
    let mut env = continuous_env(&config.env)?;
    let mut eval_env = continuous_env(&config.env)?;
    let mut agent = Agent::new(config.agent.clone(), env.obs_dim(), env.action_dim(), seed)?;
    agent.episode_cap = config.episode_cap;
    let mut records = Vec::new();
    let mut reset_steps = Vec::new();
    let mut min_r_cost = agent.state.r_cost;
    for step in 1..=config.total_steps {
        let info = agent.env_step(env.as_mut())?;
        if info.reset {
            reset_steps.push(step);
        }
        min_r_cost = min_r_cost.min(agent.state.r_cost);
        if step % config.eval_every == 0 || step == config.total_steps {
            let mut rng = eval_rng(seed);
            let summary = evaluate_policy(
                eval_env.as_mut(),
                &agent.state.actor,
                config.eval_episodes,
                config.episode_cap,
                &mut rng,
            )?;
            let record = EvalRecord {
                step,
                seed,
                total_return: summary.total_return,
                survival_steps: summary.survival_steps,
                average_reward: summary.average_reward,
                xi: agent.state.xi,
                xi_reset: agent.state.xi_reset,
                r_cost: agent.state.r_cost,
                alpha: agent.state.alpha(),
            };
            on_record(&record);
            records.push(record);
        }
    }
    Ok(SeedRun {
        seed,
        records,
        reset_steps,
        min_r_cost,
        total_steps: config.total_steps,
        checkpoint: agent.checkpoint(&config.env.to_string()),
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn csv_path(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed_{seed}.csv"))
}

pub fn checkpoint_path(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed_{seed}.checkpoint.json"))
}

/// Runs every seed and writes `seed_<n>.csv` (plus `seed_<n>.checkpoint.json`
/// for deep runs) under `out_dir`. Tabular environments write the tabular
/// trace schema. Returns the CSV paths.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_file(&out_dir.join("config.json"), &config.to_json())?;
    let mut written = Vec::new();
    for &seed in &config.seeds {
        let path = csv_path(out_dir, seed);
        if let Some(mdp) = config.env.tabular() {
            let tab = TabularConfig {
                rng_seed: seed,
                total_steps: config.total_steps as u64,
                ..config.tabular.clone()
            };
            write_file(&path, &train_tabular(&mdp, &tab)?.to_csv())?;
        } else {
            let run = run_seed(config, seed)?;
            write_file(&path, &run.to_csv())?;
            write_file(&checkpoint_path(out_dir, seed), &run.checkpoint.to_json())?;
        }
        written.push(path);
    }
    Ok(written)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_json(&read_file(path)?)
}

/// Evaluates a saved actor on the environment it was trained on.
pub fn eval_checkpoint(checkpoint: &Checkpoint, episodes: usize, seed: u64) -> Result<EvalSummary> {
    let spec: EnvSpec = checkpoint.env.parse()?;
    let mut env = continuous_env(&spec)?;
    evaluate_policy(env.as_mut(), &checkpoint.state.actor, episodes, 1_000, &mut eval_rng(seed))
}

/// Output of [`oracle`].
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub f: FChoice,
    pub rho_rvi: f64,
    pub residual: f64,
    /// `None` when `|A|^|S|` exceeds the enumeration limit.
    pub rho_enumerated: Option<f64>,
    pub q: QTable,
}

impl OracleReport {
    pub fn gap(&self) -> Option<f64> {
        self.rho_enumerated.map(|r| (r - self.rho_rvi).abs())
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "f: {}", self.f)?;
        writeln!(f, "rho_star (relative value iteration): {}", self.rho_rvi)?;
        writeln!(f, "bellman_residual: {:e}", self.residual)?;
        match (self.rho_enumerated, self.gap()) {
            (Some(r), Some(g)) => {
                writeln!(f, "rho_star (policy enumeration): {r}")?;
                write!(f, "gap: {g:e}")
            }
            _ => write!(f, "rho_star (policy enumeration): skipped, more than {ENUMERATION_LIMIT} policies"),
        }
    }
}

pub const ORACLE_TOL: f64 = 1e-10;
pub const ORACLE_MAX_ITER: usize = 1_000_000;

/// Solves `mdp` by relative value iteration and, when small enough, by
/// brute-force policy enumeration.
pub fn oracle(mdp: &TabularMdp, f: &FChoice) -> Result<OracleReport> {
    f.check_shape(mdp.n_states(), mdp.n_actions())?;
    let (rho_rvi, q) = solve_optimal_rvi(mdp, f, ORACLE_TOL, ORACLE_MAX_ITER)?;
    let residual = bellman_residual(mdp, &q, rho_rvi);
    let rho_enumerated = match enumerate_optimal(mdp) {
        Ok((rho, _)) => Some(rho),
        Err(Error::TooLarge(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(OracleReport {
        f: f.clone(),
        rho_rvi,
        residual,
        rho_enumerated,
        q,
    })
}

pub fn oracle_file(path: &Path, f: &FChoice) -> Result<OracleReport> {
    let mdp = TabularMdp::from_json(&read_file(path)?)?;
    oracle(&mdp, f)
}

/// Per-step mean and population standard deviation across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveBand {
    pub metric: String,
    pub steps: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Reads CSVs sharing one header and aggregates `metric` by `step`.
pub fn aggregate_curves(csvs: &[(String, String)], metric: &str) -> Result<CurveBand> {
    if csvs.is_empty() {
        return Err(Error::Empty("no CSV files given"));
    }
    let mut header: Option<csv::StringRecord> = None;
    let mut by_step: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for (name, text) in csvs {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let h = reader
            .headers()
            .map_err(|e| Error::validation(name.clone(), e.to_string()))?
            .clone();
        match &header {
            None => header = Some(h.clone()),
            Some(first) if *first != h => {
                return Err(Error::validation(
                    name.clone(),
                    format!(
                        "header `{}` differs from `{}`",
                        h.iter().collect::<Vec<_>>().join(","),
                        first.iter().collect::<Vec<_>>().join(",")
                    ),
                ))
            }
            Some(_) => {}
        }
        let col = |c: &str| h.iter().position(|x| x == c);
        let step_col = col("step").ok_or_else(|| Error::validation(name.clone(), "no `step` column"))?;
        let metric_col = col(metric)
            .ok_or_else(|| Error::validation("metric", format!("`{metric}` is not a column of {name}")))?;
        for (line, row) in reader.records().enumerate() {
            let row = row.map_err(|e| Error::validation(name.clone(), e.to_string()))?;
            let parse = |i: usize| -> Result<f64> {
                row.get(i)
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::validation(name.clone(), format!("bad number on data row {}", line + 1)))
            };
            let step = parse(step_col)?;
            by_step.entry(step as u64).or_default().push(parse(metric_col)?);
        }
    }
    let mut band = CurveBand {
        metric: metric.to_string(),
        steps: Vec::new(),
        mean: Vec::new(),
        std: Vec::new(),
    };
    for (step, xs) in by_step {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        band.steps.push(step as f64);
        band.mean.push(mean);
        band.std.push(var.sqrt());
    }
    Ok(band)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn tick_label(x: f64) -> String {
    if x != 0.0 && (x.abs() >= 1e5 || x.abs() < 1e-3) {
        format!("{x:.2e}")
    } else {
        let s = format!("{x:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// SVG line plot of the mean with a shaded ±1 std band.
pub fn render_svg(band: &CurveBand) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (80.0, 20.0, 40.0, 60.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let fmin = |v: &mut dyn Iterator<Item = f64>| v.fold(f64::INFINITY, f64::min);
    let fmax = |v: &mut dyn Iterator<Item = f64>| v.fold(f64::NEG_INFINITY, f64::max);
    let mut x0 = fmin(&mut band.steps.iter().copied());
    let mut x1 = fmax(&mut band.steps.iter().copied());
    let mut y0 = fmin(&mut band.mean.iter().zip(&band.std).map(|(m, s)| m - s));
    let mut y1 = fmax(&mut band.mean.iter().zip(&band.std).map(|(m, s)| m + s));
    if x1 - x0 <= 0.0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 <= 0.0 {
        let pad = if y0 == 0.0 { 1.0 } else { y0.abs() * 0.1 };
        y0 -= pad;
        y1 += pad;
    }
    let px = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    svg.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{yb}\" x2=\"{xr}\" y2=\"{yb}\" stroke=\"black\"/>\n\
         <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{yb}\" stroke=\"black\"/>\n",
        yb = top + ph,
        xr = left + pw
    ));
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            px(xv),
            top + ph + 18.0,
            tick_label(xv)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            left - 6.0,
            py(yv) + 4.0,
            tick_label(yv)
        ));
    }
    let metric = xml_escape(&band.metric);
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\">steps</text>\n",
        left + pw / 2.0,
        h - 15.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">{metric}</text>\n",
        top + ph / 2.0,
        top + ph / 2.0
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" font-size=\"14\" text-anchor=\"middle\">{metric}: mean ± std</text>\n",
        left + pw / 2.0
    ));

    let upper = band.steps.iter().zip(&band.mean).zip(&band.std).map(|((x, m), s)| (*x, m + s));
    let lower = band.steps.iter().zip(&band.mean).zip(&band.std).map(|((x, m), s)| (*x, m - s));
    let mut poly: Vec<String> = upper.map(|(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
    let mut low: Vec<String> = lower.map(|(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
    low.reverse();
    poly.extend(low);
    svg.push_str(&format!(
        "<polygon points=\"{}\" fill=\"steelblue\" fill-opacity=\"0.25\" stroke=\"none\"/>\n",
        poly.join(" ")
    ));
    let line: Vec<String> = band
        .steps
        .iter()
        .zip(&band.mean)
        .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
        .collect();
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\"/>\n",
        line.join(" ")
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Reads `csv_paths`, aggregates `metric` and writes the SVG to `out`.
pub fn plot_files(csv_paths: &[PathBuf], metric: &str, out: &Path) -> Result<CurveBand> {
    let csvs = csv_paths
        .iter()
        .map(|p| Ok((p.display().to_string(), read_file(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let band = aggregate_curves(&csvs, metric)?;
    write_file(out, &render_svg(&band))?;
    Ok(band)
}
