//! Configuration-driven experiments.
//!
//! An experiment is described by a TOML file:
//!
//! ```toml
//! seed = 7
//! horizon = 20000
//! runs = 20
//! filter = "rpe_scalar"      # classic | rpe_scalar | rpe_matrix | netgraph
//!
//! [model]
//! n = 2
//! p = 1
//! F = [[0.9, 0.1], [0.0, 0.9]]
//! H = [[1.0, 0.0]]
//! Pi = [[0.1, 0.0], [0.0, 0.1]]
//! Sigma = [[1.0]]
//! # x0 = [0.0, 0.0]          # true initial state; drawn from N(0, I) if absent
//! # xhat0 = [0.0, 0.0]       # filters' initial estimate, default 0
//! # N0 = [[1.0, 0.0], [0.0, 1.0]]   # classic filter's initial covariance, default I
//!
//! [rpe]
//! gamma = { kind = "decay", c = 0.02, tau = 2000.0 }
//!
//! [k0]
//! kind = "scaled_optimal"    # default | scaled_optimal | explicit
//! c = 0.5
//!
//! [outputs]
//! metrics_csv = "metrics.csv"
//! summary_json = "summary.json"
//! ```
//!
//! Matrices are row-major nested arrays and must agree with `n` and `p`.
//! Every run simulates one trajectory, which the exact filter and the chosen
//! adaptive filter both consume. Run `r` uses the seed
//! `splitmix64(seed + r)`, so results do not depend on thread scheduling.
//!
//! The metrics CSV has one row per step and run, ordered by run and then
//! step:
//!
//! ```text
//! t,mse_classic,mse_rpe,gain_err,theta,lambda_cond,flags
//! ```
//!
//! `mse_classic` is the squared error of the exact one-step prediction,
//! `mse_rpe` that of the adaptive filter. `gain_err`, `theta` and
//! `lambda_cond` describe the filter after the step: the max-abs distance of
//! its prediction gain from the steady-state optimum, its log-gain (the mean
//! over entries for `rpe_matrix`), and the condition number of `Λ̂⁻¹`.
//! Columns that do not apply are `NaN`. `flags` lists guard events joined by
//! `|`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Error;
use crate::kalman::{kf_step, steady_state_gain, KalmanState, DEFAULT_STEADY_STATE_MAX_ITER, DEFAULT_STEADY_STATE_TOL};
use crate::lds::{simulate, validate_model, LdsModel};
use crate::linalg::{condition_number, linear_fit, max_abs};
use crate::netgraph::{build_architecture, execute_step, Layer, NetGraph};
use crate::rpe::{
    default_baseline_gain, rpe_step, rpe_step_matrix, Dynamics, LambdaMode, MatrixRpeState, RpeConfig, RpeState, StepFlags,
};

/// Exact header of the metrics CSV.
pub const METRICS_HEADER: &str = "t,mse_classic,mse_rpe,gain_err,theta,lambda_cond,flags";

/// Share of the horizon used for the terminal MSE ratio.
pub const FINAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Classic,
    RpeScalar,
    RpeMatrix,
    Netgraph,
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterKind::Classic => "classic",
            FilterKind::RpeScalar => "rpe_scalar",
            FilterKind::RpeMatrix => "rpe_matrix",
            FilterKind::Netgraph => "netgraph",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n: usize,
    pub p: usize,
    #[serde(rename = "F")]
    pub f: Vec<Vec<f64>>,
    #[serde(rename = "H")]
    pub h: Vec<Vec<f64>>,
    #[serde(rename = "Pi")]
    pub pi: Vec<Vec<f64>>,
    #[serde(rename = "Sigma")]
    pub sigma: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xhat0: Option<Vec<f64>>,
    #[serde(rename = "N0", default, skip_serializing_if = "Option::is_none")]
    pub n0: Option<Vec<Vec<f64>>>,
}

/// Baseline gain of the adaptive filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum K0Spec {
    /// `Hᵀ` scaled to a largest entry of 0.1.
    #[default]
    Default,
    /// `c` times the steady-state prediction gain.
    ScaledOptimal { c: f64 },
    Explicit { matrix: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics_csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_json: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSpec {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self { tol: DEFAULT_STEADY_STATE_TOL, max_iter: DEFAULT_STEADY_STATE_MAX_ITER }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub horizon: usize,
    #[serde(default = "one")]
    pub runs: usize,
    pub filter: FilterKind,
    pub model: ModelSpec,
    #[serde(default)]
    pub rpe: RpeConfig,
    #[serde(default)]
    pub k0: K0Spec,
    #[serde(default)]
    pub outputs: OutputSpec,
    #[serde(default)]
    pub oracle: OracleSpec,
}

fn one() -> usize {
    1
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}: {message}{}", path.display(), location(*line, *col))]
    Parse { path: PathBuf, line: Option<usize>, col: Option<usize>, message: String },

    #[error("{}: unknown key `{key}`{}", path.display(), location(*line, *col))]
    UnknownKey { path: PathBuf, key: String, line: Option<usize>, col: Option<usize> },

    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },
}

fn location(line: Option<usize>, col: Option<usize>) -> String {
    match (line, col) {
        (Some(l), Some(c)) => format!(" (line {l}, column {c})"),
        _ => String::new(),
    }
}

impl ConfigError {
    fn validation(field: &str, message: impl Into<String>) -> Self {
        ConfigError::Validation { field: field.to_string(), message: message.into() }
    }
}

/// Reads and validates an experiment file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        line: None,
        col: None,
        message: e.to_string(),
    })?;
    parse_config_str(&text, path)
}

/// Parses config text; `path` is used only in error messages.
pub fn parse_config_str(text: &str, path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let (line, col) = match e.span() {
            Some(span) => {
                let (l, c) = line_col(text, span.start);
                (Some(l), Some(c))
            }
            None => (None, None),
        };
        let message = e.message().to_string();
        match unknown_key(&message) {
            Some(key) => ConfigError::UnknownKey { path: path.to_path_buf(), key, line, col },
            None => ConfigError::Parse { path: path.to_path_buf(), line, col, message },
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn unknown_key(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    Some(rest.split('`').next()?.to_string())
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |s| s.chars().count()) + 1;
    (line, col)
}

fn matrix_from_rows(field: &str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>, ConfigError> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        let got: Vec<usize> = rows.iter().map(Vec::len).collect();
        return Err(ConfigError::validation(field, format!("expected {nrows}x{ncols}, got rows of lengths {got:?}")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ConfigError::validation(field, "entries must be finite"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn vector_from(field: &str, values: &[f64], len: usize) -> Result<DVector<f64>, ConfigError> {
    if values.len() != len {
        return Err(ConfigError::validation(field, format!("expected length {len}, got {}", values.len())));
    }
    Ok(DVector::from_column_slice(values))
}

fn model_error(err: Error) -> ConfigError {
    match err {
        Error::NotSymmetric { ref name, .. } | Error::NotPsd { ref name, .. } => ConfigError::validation(name, err.to_string()),
        Error::SigmaSingular { .. } => ConfigError::validation("Sigma", err.to_string()),
        other => ConfigError::validation("model", other.to_string()),
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Everything derived from a config that stays fixed across runs.
#[derive(Debug, Clone)]
pub struct ResolvedExperiment {
    pub config: ExperimentConfig,
    pub model: LdsModel,
    pub x0: Option<DVector<f64>>,
    pub xhat0: DVector<f64>,
    pub n0: DMatrix<f64>,
    /// Steady-state prediction gain `F K^f*`.
    pub k_star: DMatrix<f64>,
    pub k0: DMatrix<f64>,
}

impl ExperimentConfig {
    /// Checks every field and returns the first problem found.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.resolve().map(|_| ())
    }

    /// The config with defaults filled in, as TOML.
    pub fn resolved_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Builds the model, baseline gain and steady-state oracle.
    pub fn resolve(&self) -> Result<ResolvedExperiment, ConfigError> {
        if self.horizon == 0 {
            return Err(ConfigError::validation("horizon", "must be >= 1"));
        }
        if self.runs == 0 {
            return Err(ConfigError::validation("runs", "must be >= 1"));
        }
        let m = &self.model;
        if m.n == 0 || m.p == 0 {
            return Err(ConfigError::validation("model", "n and p must be >= 1"));
        }
        let model = LdsModel {
            f: matrix_from_rows("F", &m.f, m.n, m.n)?,
            h: matrix_from_rows("H", &m.h, m.p, m.n)?,
            pi: matrix_from_rows("Pi", &m.pi, m.n, m.n)?,
            sigma: matrix_from_rows("Sigma", &m.sigma, m.p, m.p)?,
        };
        let model = validate_model(model).map_err(model_error)?;
        let x0 = m.x0.as_deref().map(|v| vector_from("x0", v, m.n)).transpose()?;
        let xhat0 = match &m.xhat0 {
            Some(v) => vector_from("xhat0", v, m.n)?,
            None => DVector::zeros(m.n),
        };
        let n0 = match &m.n0 {
            Some(rows) => {
                let n0 = matrix_from_rows("N0", rows, m.n, m.n)?;
                crate::lds::check_psd("N0", &n0).map_err(model_error)?;
                n0
            }
            None => DMatrix::identity(m.n, m.n),
        };
        self.rpe.validate().map_err(|e| ConfigError::validation("rpe", e.to_string()))?;
        if self.filter == FilterKind::Netgraph && self.rpe.lambda_mode != LambdaMode::Inverse {
            return Err(ConfigError::validation("rpe.lambda_mode", "the netgraph filter needs lambda_mode = \"inverse\""));
        }
        if !(self.oracle.tol.is_finite() && self.oracle.tol > 0.0) || self.oracle.max_iter == 0 {
            return Err(ConfigError::validation("oracle", "tol must be positive and max_iter >= 1"));
        }
        let steady = steady_state_gain(&model, self.oracle.tol, self.oracle.max_iter)
            .map_err(|e| ConfigError::validation("oracle", e.to_string()))?;
        let k_star = steady.prediction_gain(&model);
        let k0 = match &self.k0 {
            K0Spec::Default => default_baseline_gain(&model.h).map_err(|e| ConfigError::validation("k0", e.to_string()))?,
            K0Spec::ScaledOptimal { c } => {
                if !(c.is_finite() && *c > 0.0) {
                    return Err(ConfigError::validation("k0.c", "must be positive"));
                }
                &k_star * *c
            }
            K0Spec::Explicit { matrix } => matrix_from_rows("k0.matrix", matrix, m.n, m.p)?,
        };
        Ok(ResolvedExperiment { config: self.clone(), model, x0, xhat0, n0, k_star, k0 })
    }
}

impl ResolvedExperiment {
    pub fn dynamics(&self) -> Dynamics {
        Dynamics::from(&self.model)
    }
}

/// Serialises a model as a `[model]` table body, for writing configs.
pub fn model_spec(model: &LdsModel) -> ModelSpec {
    ModelSpec {
        n: model.n(),
        p: model.p(),
        f: rows_of(&model.f),
        h: rows_of(&model.h),
        pi: rows_of(&model.pi),
        sigma: rows_of(&model.sigma),
        x0: None,
        xhat0: None,
        n0: None,
    }
}

/// One CSV line of the metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub t: u64,
    pub mse_classic: f64,
    pub mse_rpe: f64,
    pub gain_err: f64,
    pub theta: f64,
    pub lambda_cond: f64,
    pub flags: String,
}

impl MetricsRow {
    fn bitwise_eq(&self, other: &Self) -> bool {
        let bits = |r: &Self| [r.mse_classic, r.mse_rpe, r.gain_err, r.theta, r.lambda_cond].map(f64::to_bits);
        self.t == other.t && bits(self) == bits(other) && self.flags == other.flags
    }
}

/// Per-step record of the shared trajectory and both estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub run: usize,
    pub t: u64,
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub pred_classic: DVector<f64>,
    pub pred_adaptive: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub trajectory: Vec<TrajectoryRow>,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("run {run}, step {step}: {source}")]
    Run { run: usize, step: u64, source: Error },

    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
}

/// SplitMix64 finaliser, used to derive per-run seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn run_seed(master: u64, run: usize) -> u64 {
    splitmix64(master.wrapping_add(run as u64))
}

enum Adaptive {
    None,
    Scalar(RpeState),
    Matrix(MatrixRpeState),
    Graph(Box<NetGraph>),
}

impl Adaptive {
    fn prediction(&self) -> Option<DVector<f64>> {
        match self {
            Adaptive::None => None,
            Adaptive::Scalar(s) => Some(s.x_hat.clone()),
            Adaptive::Matrix(s) => Some(s.x_hat.clone()),
            Adaptive::Graph(g) => Some(g.x_hat()),
        }
    }
}

/// Runs the filters of one Monte Carlo run over a fresh trajectory.
pub fn run_single(exp: &ResolvedExperiment, run: usize, keep_trajectory: bool) -> Result<RunResult, HarnessError> {
    let cfg = &exp.config;
    let seed = run_seed(cfg.seed, run);
    let model = &exp.model;
    let dynamics = exp.dynamics();
    let annotate = |step: u64| move |source: Error| HarnessError::Run { run, step, source };
    let traj = simulate(model, cfg.horizon, seed, exp.x0.as_ref()).map_err(annotate(0))?;

    let mut classic = KalmanState::new(exp.xhat0.clone(), exp.n0.clone(), model.p()).map_err(annotate(0))?;
    let mut adaptive = match cfg.filter {
        FilterKind::Classic => Adaptive::None,
        FilterKind::RpeScalar => {
            let mut s = RpeState::initial(exp.k0.clone(), cfg.rpe.lambda_mode);
            s.x_hat = exp.xhat0.clone();
            Adaptive::Scalar(s)
        }
        FilterKind::RpeMatrix => {
            let mut s = MatrixRpeState::initial(exp.k0.clone(), cfg.rpe.lambda_mode);
            s.x_hat = exp.xhat0.clone();
            Adaptive::Matrix(s)
        }
        FilterKind::Netgraph => {
            let mut g = build_architecture(&dynamics, &exp.k0, 0.0, &cfg.rpe).map_err(annotate(0))?;
            for i in 0..model.n() {
                let id = g.node(Layer::StateEstimate, i);
                g.nodes[id.0].activation = exp.xhat0[i];
            }
            Adaptive::Graph(Box::new(g))
        }
    };

    let mut rows = Vec::with_capacity(cfg.horizon);
    let mut trajectory = Vec::with_capacity(if keep_trajectory { cfg.horizon } else { 0 });
    for (t, (x, y)) in traj.states.iter().zip(&traj.observations).enumerate() {
        let step = t as u64;
        let pred_classic = classic.predicted_mean(model);
        let mse_classic = (x - &pred_classic).norm_squared();
        classic = kf_step(&classic, y, model).map_err(annotate(step))?;

        let pred_adaptive = adaptive.prediction();
        let mse_rpe = pred_adaptive.as_ref().map_or(f64::NAN, |p| (x - p).norm_squared());
        let gamma = cfg.rpe.gamma.gamma(step);
        let (gain, theta, lambda_inv, flags): (DMatrix<f64>, f64, Option<DMatrix<f64>>, StepFlags) = match &mut adaptive {
            Adaptive::None => (&model.f * &classic.kf, f64::NAN, None, StepFlags::default()),
            Adaptive::Scalar(s) => {
                let (next, out) = rpe_step(s, y, &dynamics, &cfg.rpe).map_err(annotate(step))?;
                *s = next;
                (s.gain(), s.theta, Some(s.lambda.inv.clone()), out.flags)
            }
            Adaptive::Matrix(s) => {
                let (next, out) = rpe_step_matrix(s, y, &dynamics, &cfg.rpe).map_err(annotate(step))?;
                *s = next;
                (s.gain(), s.params.theta.mean(), Some(s.lambda.inv.clone()), out.flags)
            }
            Adaptive::Graph(g) => {
                let (next, out) = execute_step(g, y, gamma).map_err(annotate(step))?;
                **g = next;
                (g.gain(), g.theta(), Some(g.lambda_inv()), out.flags)
            }
        };
        let lambda_cond = lambda_inv.as_ref().map_or(f64::NAN, condition_number);
        rows.push(MetricsRow {
            t: step,
            mse_classic,
            mse_rpe,
            gain_err: max_abs(&(gain - &exp.k_star)),
            theta,
            lambda_cond,
            flags: flags.to_string(),
        });
        if keep_trajectory {
            trajectory.push(TrajectoryRow { run, t: step, x: x.clone(), y: y.clone(), pred_classic, pred_adaptive });
        }
    }
    Ok(RunResult { run, seed, rows, trajectory })
}

/// Output of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub runs: Vec<RunResult>,
    pub summary: Summary,
}

impl ExperimentResult {
    /// Metric rows of all runs in (run, t) order.
    pub fn rows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.runs.iter().flat_map(|r| r.rows.iter())
    }
}

/// Flat key-value summary; serialised as a JSON object with sorted keys.
pub type Summary = BTreeMap<String, serde_json::Value>;

/// Simulates every run (in parallel) and filters each trajectory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    let exp = cfg.resolve()?;
    let keep = cfg.outputs.trajectory_csv.is_some();
    let runs: Vec<RunResult> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| run_single(&exp, run, keep))
        .collect::<Result<_, _>>()?;
    let summary = summarize(&exp, &runs);
    Ok(ExperimentResult { runs, summary })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.retain(|v| !v.is_nan());
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        0.5 * (xs[mid - 1] + xs[mid])
    }
}

/// Ratio of mean adaptive to mean exact squared prediction error over the
/// final share of the rows.
pub fn final_mse_ratio(rows: &[MetricsRow]) -> f64 {
    let start = rows.len() - ((rows.len() as f64 * FINAL_FRACTION).ceil() as usize).max(1);
    let tail = &rows[start..];
    let rpe: f64 = tail.iter().map(|r| r.mse_rpe).sum();
    let classic: f64 = tail.iter().map(|r| r.mse_classic).sum();
    rpe / classic
}

/// Slope of `ln gain_err` against `t`, fitted over all rows with a positive
/// finite error.
pub fn gain_err_log_slope(rows: &[MetricsRow]) -> f64 {
    let (ts, ls): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.gain_err > 0.0 && r.gain_err.is_finite())
        .map(|r| (r.t as f64, r.gain_err.ln()))
        .unzip();
    if ts.len() < 2 {
        return f64::NAN;
    }
    linear_fit(&ts, &ls).0
}

fn number(v: f64) -> serde_json::Value {
    serde_json::Number::from_f64(v).map_or(serde_json::Value::Null, serde_json::Value::Number)
}

fn summarize(exp: &ResolvedExperiment, runs: &[RunResult]) -> Summary {
    let cfg = &exp.config;
    let last = |f: fn(&MetricsRow) -> f64| median(runs.iter().map(|r| f(r.rows.last().expect("horizon >= 1"))).collect());
    let mut s = Summary::new();
    s.insert("filter".into(), cfg.filter.to_string().into());
    s.insert("seed".into(), cfg.seed.into());
    s.insert("runs".into(), cfg.runs.into());
    s.insert("horizon".into(), cfg.horizon.into());
    s.insert("terminal_gain_err_median".into(), number(last(|r| r.gain_err)));
    s.insert("terminal_theta_median".into(), number(last(|r| r.theta)));
    s.insert("mse_ratio_final_median".into(), number(median(runs.iter().map(|r| final_mse_ratio(&r.rows)).collect())));
    s.insert("gain_err_log_slope_median".into(), number(median(runs.iter().map(|r| gain_err_log_slope(&r.rows)).collect())));
    let mean = |f: fn(&MetricsRow) -> f64| {
        let total: f64 = runs.iter().flat_map(|r| r.rows.iter()).map(f).sum();
        total / (runs.len() * cfg.horizon) as f64
    };
    s.insert("mse_classic_mean".into(), number(mean(|r| r.mse_classic)));
    s.insert("mse_rpe_mean".into(), number(mean(|r| r.mse_rpe)));
    let flagged = runs.iter().flat_map(|r| r.rows.iter()).filter(|r| !r.flags.is_empty()).count();
    s.insert("flagged_steps".into(), flagged.into());
    s.insert("k_star_max_abs".into(), number(max_abs(&exp.k_star)));
    s
}

/// Writes the metrics CSV for `rows`.
pub fn write_metrics<'a, W: std::io::Write>(rows: impl IntoIterator<Item = &'a MetricsRow>, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{},{},{}", r.t, r.mse_classic, r.mse_rpe, r.gain_err, r.theta, r.lambda_cond, r.flags)?;
    }
    out.flush()
}

/// Renders the metrics CSV as a string.
pub fn metrics_csv<'a>(rows: impl IntoIterator<Item = &'a MetricsRow>) -> String {
    let mut buf = Vec::new();
    write_metrics(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii")
}

/// Parses text produced by [`write_metrics`].
pub fn read_metrics(text: &str) -> Result<Vec<MetricsRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(METRICS_HEADER) => {}
        other => return Err(format!("unexpected header {other:?}")),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 7 {
                return Err(format!("line {}: expected 7 columns, got {}", i + 2, cols.len()));
            }
            let num = |k: usize| cols[k].parse::<f64>().map_err(|e| format!("line {}: column {}: {e}", i + 2, k + 1));
            Ok(MetricsRow {
                t: cols[0].parse().map_err(|e| format!("line {}: t: {e}", i + 2))?,
                mse_classic: num(1)?,
                mse_rpe: num(2)?,
                gain_err: num(3)?,
                theta: num(4)?,
                lambda_cond: num(5)?,
                flags: cols[6].to_string(),
            })
        })
        .collect()
}

/// True when both row sets have identical values bit for bit.
pub fn rows_bitwise_equal(a: &[MetricsRow], b: &[MetricsRow]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bitwise_eq(y))
}

fn vector_cols(prefix: &str, len: usize) -> Vec<String> {
    (0..len).map(|i| format!("{prefix}{i}")).collect()
}

/// Renders the trajectory CSV: true state, observation and both predictions.
pub fn trajectory_csv(runs: &[RunResult], n: usize, p: usize) -> String {
    let mut header = vec!["run".to_string(), "t".to_string()];
    header.extend(vector_cols("x", n));
    header.extend(vector_cols("y", p));
    header.extend(vector_cols("pred_classic", n));
    header.extend(vector_cols("pred_adaptive", n));
    let mut out = header.join(",");
    out.push('\n');
    for row in runs.iter().flat_map(|r| r.trajectory.iter()) {
        let mut fields = vec![row.run.to_string(), row.t.to_string()];
        fields.extend(row.x.iter().map(f64::to_string));
        fields.extend(row.y.iter().map(f64::to_string));
        fields.extend(row.pred_classic.iter().map(f64::to_string));
        match &row.pred_adaptive {
            Some(v) => fields.extend(v.iter().map(f64::to_string)),
            None => fields.extend(std::iter::repeat_n("NaN".to_string(), n)),
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn summary_json(summary: &Summary) -> String {
    let mut text = serde_json::to_string_pretty(summary).expect("summary serialises");
    text.push('\n');
    text
}

/// Writes every configured sink under `out_dir` and returns the paths.
pub fn emit_outputs(cfg: &ExperimentConfig, result: &ExperimentResult, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let write = |rel: &Path, body: String| -> Result<PathBuf, HarnessError> {
        let path = out_dir.join(rel);
        let io = |e: std::io::Error| HarnessError::Io { path: path.clone(), message: e.to_string() };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        fs::write(&path, body).map_err(io)?;
        Ok(path)
    };
    let mut written = Vec::new();
    if let Some(rel) = &cfg.outputs.metrics_csv {
        written.push(write(rel, metrics_csv(result.rows()))?);
    }
    if let Some(rel) = &cfg.outputs.trajectory_csv {
        written.push(write(rel, trajectory_csv(&result.runs, cfg.model.n, cfg.model.p))?);
    }
    if let Some(rel) = &cfg.outputs.summary_json {
        written.push(write(rel, summary_json(&result.summary))?);
    }
    Ok(written)
}
