//! Config-driven Monte Carlo experiment harness.
//!
//! A single JSON document describes the plant, the adversary, the window and
//! the campaign; [`run_experiment`] executes it and [`emit_results`] writes
//! machine-readable CSV/JSON. Equal config + seed always produces
//! byte-identical CSV regardless of parallelism: every trial derives its own
//! seed and results are assembled in trial order.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{AttackPlan, AttackStrategy, CausalityMode};
use crate::error::{Error, Result};
use crate::estimator::{
    secure_filter, secure_predict, secure_predict_scalar, EpsilonSpec, EstimationMode,
    ResidueReport, WindowConfig, DEFAULT_BURN_IN,
};
use crate::kalman::solve_steady_state;
use crate::observability::{noiseless_secure_decode, sparse_observability_index, DecodeStatus};
use crate::stats;
use crate::system::{aux_rng, derive_seed, simulate, LinearSystem, SimulationTrace};

/// Exact-recovery tolerance for noiseless decode trials.
pub const DECODE_PASS_TOL: f64 = 1e-6;
/// Relative band for the oracle estimator's MSE against its covariance trace.
pub const ORACLE_REL_TOL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Prediction,
    Filtering,
    NoiselessDecode,
    ObservabilityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// State transition matrix, row-major nested arrays.
    pub a: Vec<Vec<f64>>,
    /// Output map, one row per sensor.
    pub c: Vec<Vec<f64>>,
    pub sigma_w: f64,
    pub sigma_v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[default]
    None,
    ZeroOut,
    Bias,
    Replay,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AttackParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<Vec<f64>>>,
}

/// Either a concrete attacked set or the string `"worst_case_scan"`, which
/// iterates the attacked set over all (p choose k) choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttackedSet {
    Scan(String),
    Fixed(Vec<usize>),
}

impl Default for AttackedSet {
    fn default() -> Self {
        AttackedSet::Fixed(Vec::new())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default)]
    pub strategy: StrategyKind,
    #[serde(default)]
    pub params: AttackParams,
    #[serde(default)]
    pub attacked_set: AttackedSet,
}

/// Threshold slack: a bare number is an absolute epsilon; `{"relative": f}`
/// scales each threshold's noise-free part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsilonSetting {
    Absolute(f64),
    Relative { relative: f64 },
    AbsoluteKeyed { absolute: f64 },
}

impl Default for EpsilonSetting {
    fn default() -> Self {
        EpsilonSetting::Relative { relative: 0.1 }
    }
}

impl From<EpsilonSetting> for EpsilonSpec {
    fn from(e: EpsilonSetting) -> Self {
        match e {
            EpsilonSetting::Absolute(a) | EpsilonSetting::AbsoluteKeyed { absolute: a } => {
                EpsilonSpec::Absolute(a)
            }
            EpsilonSetting::Relative { relative } => EpsilonSpec::Relative(relative),
        }
    }
}

impl EpsilonSetting {
    fn value(&self) -> f64 {
        match *self {
            EpsilonSetting::Absolute(a) | EpsilonSetting::AbsoluteKeyed { absolute: a } => a,
            EpsilonSetting::Relative { relative } => relative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSettings {
    /// Window length N.
    #[serde(default = "default_window_len")]
    pub n: usize,
    #[serde(default)]
    pub epsilon: EpsilonSetting,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
}

fn default_window_len() -> usize {
    10_000
}

fn default_burn_in() -> usize {
    DEFAULT_BURN_IN
}

impl Default for WindowSettings {
    fn default() -> Self {
        Self {
            n: default_window_len(),
            epsilon: EpsilonSetting::default(),
            burn_in: default_burn_in(),
        }
    }
}

fn default_trials() -> usize {
    1
}

fn default_min_pass_fraction() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub k: usize,
    pub mode: Mode,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub window: WindowSettings,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<f64>>,
    #[serde(default = "default_min_pass_fraction")]
    pub min_pass_fraction: f64,
    #[serde(default)]
    pub dump_trace: bool,
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s)
            .map_err(|e| Error::config("<config>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn state_dim(&self) -> usize {
        self.system.a.len()
    }

    fn sensor_count(&self) -> usize {
        self.system.c.len()
    }

    /// Steps simulated per trial in this mode.
    pub fn horizon(&self) -> usize {
        match self.mode {
            // Window plus burn-in plus enough look-ahead for any block
            // residue (mu never exceeds n).
            Mode::Prediction | Mode::Filtering => {
                self.window.burn_in + self.window.n + self.state_dim()
            }
            Mode::NoiselessDecode => self.state_dim(),
            Mode::ObservabilityReport => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        if n == 0 {
            return Err(Error::config("system.a", "matrix must be non-empty"));
        }
        for (i, row) in self.system.a.iter().enumerate() {
            if row.len() != n {
                return Err(Error::config(
                    format!("system.a[{i}]"),
                    format!("expected {n} entries for a square matrix, got {}", row.len()),
                ));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("system.a[{i}]"), "non-finite entry"));
            }
        }
        let p = self.sensor_count();
        if p == 0 {
            return Err(Error::config("system.c", "need at least one sensor row"));
        }
        for (i, row) in self.system.c.iter().enumerate() {
            if row.len() != n {
                return Err(Error::config(
                    format!("system.c[{i}]"),
                    format!("expected {n} columns to match the state dimension, got {}", row.len()),
                ));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("system.c[{i}]"), "non-finite entry"));
            }
        }
        if !(self.system.sigma_w >= 0.0 && self.system.sigma_w.is_finite()) {
            return Err(Error::config("system.sigma_w", "must be finite and >= 0"));
        }
        if !(self.system.sigma_v >= 0.0 && self.system.sigma_v.is_finite()) {
            return Err(Error::config("system.sigma_v", "must be finite and >= 0"));
        }
        if self.k > p {
            return Err(Error::config(
                "k",
                format!("cannot exceed the sensor count ({p})"),
            ));
        }
        if matches!(
            self.mode,
            Mode::Prediction | Mode::Filtering | Mode::NoiselessDecode
        ) && self.k >= p
        {
            return Err(Error::config(
                "k",
                format!("must leave at least one sensor: k = {}, p = {p}", self.k),
            ));
        }

        match &self.attack.attacked_set {
            AttackedSet::Scan(s) => {
                if s != "worst_case_scan" {
                    return Err(Error::config(
                        "attack.attacked_set",
                        format!("unknown keyword `{s}`; expected \"worst_case_scan\" or a list of sensor indices"),
                    ));
                }
            }
            AttackedSet::Fixed(set) => {
                if set.len() > self.k {
                    return Err(Error::config(
                        "attack.attacked_set",
                        format!("{} sensors attacked but k = {}", set.len(), self.k),
                    ));
                }
                let mut sorted = set.clone();
                sorted.sort_unstable();
                for pair in sorted.windows(2) {
                    if pair[0] == pair[1] {
                        return Err(Error::config(
                            "attack.attacked_set",
                            format!("sensor {} listed twice", pair[0]),
                        ));
                    }
                }
                if let Some(&worst) = sorted.last() {
                    if worst >= p {
                        return Err(Error::config(
                            "attack.attacked_set",
                            format!("sensor {worst} out of range for {p} sensors"),
                        ));
                    }
                }
            }
        }

        match self.attack.strategy {
            StrategyKind::Bias => {
                if self.attack.params.bias.is_none() {
                    return Err(Error::config("attack.params.bias", "required for strategy \"bias\""));
                }
            }
            StrategyKind::Replay => match self.attack.params.delay {
                None => {
                    return Err(Error::config(
                        "attack.params.delay",
                        "required for strategy \"replay\"",
                    ))
                }
                Some(0) => {
                    return Err(Error::config("attack.params.delay", "must be at least 1"))
                }
                Some(_) => {}
            },
            StrategyKind::Scripted => match &self.attack.params.table {
                None => {
                    return Err(Error::config(
                        "attack.params.table",
                        "required for strategy \"scripted\"",
                    ))
                }
                Some(table) => {
                    let horizon = self.horizon();
                    if table.len() < horizon {
                        return Err(Error::config(
                            "attack.params.table",
                            format!("covers {} steps, horizon needs {horizon}", table.len()),
                        ));
                    }
                    for (t, row) in table.iter().enumerate() {
                        if row.len() != p {
                            return Err(Error::config(
                                format!("attack.params.table[{t}]"),
                                format!("expected one entry per sensor ({p}), got {}", row.len()),
                            ));
                        }
                    }
                }
            },
            StrategyKind::None | StrategyKind::ZeroOut => {}
        }

        if self.window.n == 0 {
            return Err(Error::config("window.n", "must be at least 1"));
        }
        if !(self.window.epsilon.value() >= 0.0 && self.window.epsilon.value().is_finite()) {
            return Err(Error::config("window.epsilon", "must be finite and >= 0"));
        }
        if self.trials == 0 {
            return Err(Error::config("trials", "must be at least 1"));
        }
        if let Some(x0) = &self.initial_state {
            if x0.len() != n {
                return Err(Error::config(
                    "initial_state",
                    format!("expected {n} entries, got {}", x0.len()),
                ));
            }
            if x0.iter().any(|v| !v.is_finite()) {
                return Err(Error::config("initial_state", "non-finite entry"));
            }
        }
        if !(0.0..=1.0).contains(&self.min_pass_fraction) {
            return Err(Error::config("min_pass_fraction", "must lie in [0, 1]"));
        }
        if self.mode == Mode::NoiselessDecode
            && (self.system.sigma_w != 0.0 || self.system.sigma_v != 0.0)
        {
            return Err(Error::config(
                "system",
                "noiseless_decode requires sigma_w = 0 and sigma_v = 0",
            ));
        }
        Ok(())
    }

    pub fn system(&self) -> Result<LinearSystem> {
        let n = self.state_dim();
        let p = self.sensor_count();
        let a = DMatrix::from_row_iterator(n, n, self.system.a.iter().flatten().copied());
        let c = DMatrix::from_row_iterator(p, n, self.system.c.iter().flatten().copied());
        LinearSystem::new(a, c, self.system.sigma_w, self.system.sigma_v)
    }

    fn strategy(&self) -> Result<AttackStrategy> {
        Ok(match self.attack.strategy {
            StrategyKind::None => AttackStrategy::None,
            StrategyKind::ZeroOut => AttackStrategy::ZeroOut,
            StrategyKind::Bias => AttackStrategy::Bias(
                self.attack
                    .params
                    .bias
                    .ok_or_else(|| Error::config("attack.params.bias", "missing"))?,
            ),
            StrategyKind::Replay => AttackStrategy::Replay {
                delay: self
                    .attack
                    .params
                    .delay
                    .ok_or_else(|| Error::config("attack.params.delay", "missing"))?,
            },
            StrategyKind::Scripted => AttackStrategy::Scripted(
                self.attack
                    .params
                    .table
                    .clone()
                    .ok_or_else(|| Error::config("attack.params.table", "missing"))?,
            ),
        })
    }

    fn causality(&self) -> CausalityMode {
        match self.mode {
            Mode::Filtering => CausalityMode::Filtering,
            _ => CausalityMode::Prediction,
        }
    }

    fn initial_state_vector(&self, n: usize) -> DVector<f64> {
        match &self.initial_state {
            Some(x0) => DVector::from_column_slice(x0),
            None => DVector::zeros(n),
        }
    }

    fn attacked_choices(&self) -> Vec<Vec<usize>> {
        let p = self.sensor_count();
        match &self.attack.attacked_set {
            AttackedSet::Scan(_) => (0..p).combinations(self.k).collect(),
            AttackedSet::Fixed(set) => {
                let mut s = set.clone();
                s.sort_unstable();
                vec![s]
            }
        }
    }
}

/// One per-timestep record for the optional trace dump.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpRow {
    pub t: usize,
    pub state: Vec<f64>,
    pub estimate: Vec<f64>,
    pub squared_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceDump {
    pub rows: Vec<DumpRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRow {
    pub trial: usize,
    pub seed: u64,
    pub attacked_set: Vec<usize>,
    pub selected_set: Option<Vec<usize>>,
    pub mse: Option<f64>,
    pub bound: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub opt_good: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decode_status: Option<String>,
    #[serde(skip)]
    pub trace_dump: Option<TraceDump>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub pass_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanAggregate {
    pub attacked_set: Vec<usize>,
    pub pass_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_mse: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObservabilityReportOut {
    pub theta: usize,
    pub max_correctable: usize,
    pub max_detectable: usize,
    pub min_hamming_distance: usize,
    pub p: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleSummary {
    pub opt_good: f64,
    pub mean_oracle_mse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_secure_mse: Option<f64>,
    /// Mean of (secure - oracle) across trials with a secure estimate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_secure_minus_oracle: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub secure_minus_oracle_stderr: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub version: String,
    pub generated_at_unix: u64,
    pub mode: Mode,
    pub config: ExperimentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<Aggregate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observability: Option<ObservabilityReportOut>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub scan: Vec<ScanAggregate>,
    pub trials: Vec<TrialRow>,
}

impl ExperimentResult {
    /// CI verdict: did the campaign hold its bound often enough?
    pub fn accepted(&self) -> bool {
        match &self.aggregate {
            Some(a) => a.pass_fraction >= self.config.min_pass_fraction,
            None => true,
        }
    }
}

fn aggregate_rows(rows: &[TrialRow], bound: Option<f64>) -> Aggregate {
    let pass = rows.iter().filter(|r| r.pass).count();
    let mses: Vec<f64> = rows.iter().filter_map(|r| r.mse).collect();
    Aggregate {
        pass_fraction: pass as f64 / rows.len().max(1) as f64,
        mean_mse: if mses.is_empty() {
            None
        } else {
            Some(stats::mean(&mses))
        },
        bound,
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn result_shell(config: &ExperimentConfig) -> ExperimentResult {
    ExperimentResult {
        version: env!("CARGO_PKG_VERSION").to_string(),
        generated_at_unix: now_unix(),
        mode: config.mode,
        config: config.clone(),
        bound: None,
        aggregate: None,
        observability: None,
        oracle: None,
        scan: Vec::new(),
        trials: Vec::new(),
    }
}

fn build_dump(trace: &SimulationTrace, report: &ResidueReport) -> TraceDump {
    let rows = report
        .estimates
        .iter()
        .enumerate()
        .map(|(j, est)| {
            let t = report.window_start + j;
            let x = &trace.states[t];
            DumpRow {
                t,
                state: x.iter().copied().collect(),
                estimate: est.iter().copied().collect(),
                squared_error: (x - est).norm_squared(),
            }
        })
        .collect();
    TraceDump { rows }
}

fn run_secure(
    config: &ExperimentConfig,
    system: &LinearSystem,
    trace: &SimulationTrace,
    window: &WindowConfig,
) -> Result<ResidueReport> {
    match (config.mode, system.state_dim()) {
        (Mode::Prediction, 1) => secure_predict_scalar(system, trace, window, config.k),
        (Mode::Prediction, _) => secure_predict(system, trace, window, config.k),
        (Mode::Filtering, _) => secure_filter(system, trace, window, config.k),
        _ => unreachable!("run_secure only handles estimation modes"),
    }
}

fn estimation_campaign(
    config: &ExperimentConfig,
    system: &LinearSystem,
) -> Result<ExperimentResult> {
    let analysis = sparse_observability_index(system)?;
    if !analysis.tolerates(config.k) {
        return Err(Error::SparseCondition {
            theta: analysis.theta,
            p: system.sensor_count(),
            k: config.k,
        });
    }
    let window = WindowConfig::after_burn_in(
        config.window.n,
        config.window.epsilon.into(),
        config.window.burn_in,
    )?;
    let epsilon: EpsilonSpec = config.window.epsilon.into();
    let horizon = config.horizon();
    let x0 = config.initial_state_vector(system.state_dim());
    let strategy = config.strategy()?;
    let causality = config.causality();
    let choices = config.attacked_choices();

    let jobs: Vec<(usize, usize)> = (0..choices.len())
        .cartesian_product(0..config.trials)
        .collect();
    let rows: Vec<TrialRow> = jobs
        .par_iter()
        .map(|&(ci, trial)| -> Result<TrialRow> {
            let seed = derive_seed(config.seed, trial as u64);
            let plan = AttackPlan::new(choices[ci].clone(), strategy.clone(), causality);
            let trace = simulate(system, horizon, &x0, &plan, seed)?;
            let report = run_secure(config, system, &trace, &window)?;
            let mse = report.selected_set().and_then(|e| e.window_mse);
            let pass = mse
                .map(|m| m <= report.bound + epsilon.slack(report.bound))
                .unwrap_or(false);
            let trace_dump = (config.dump_trace && report.selected.is_some())
                .then(|| build_dump(&trace, &report));
            Ok(TrialRow {
                trial,
                seed,
                attacked_set: choices[ci].clone(),
                selected_set: report.selected_sensors().map(|s| s.to_vec()),
                mse,
                bound: report.bound,
                pass,
                oracle_mse: None,
                opt_good: None,
                decode_status: None,
                trace_dump,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let bound = rows.first().map(|r| r.bound);
    let mut result = result_shell(config);
    result.bound = bound;
    if choices.len() > 1 {
        let mut scans = Vec::with_capacity(choices.len());
        for (ci, choice) in choices.iter().enumerate() {
            let slice = &rows[ci * config.trials..(ci + 1) * config.trials];
            let agg = aggregate_rows(slice, bound);
            scans.push(ScanAggregate {
                attacked_set: choice.clone(),
                pass_fraction: agg.pass_fraction,
                mean_mse: agg.mean_mse,
            });
        }
        // Headline aggregate: the adversary's best choice.
        let worst = scans
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                a.pass_fraction
                    .partial_cmp(&b.pass_fraction)
                    .unwrap()
                    .then(
                        b.mean_mse
                            .unwrap_or(f64::INFINITY)
                            .partial_cmp(&a.mean_mse.unwrap_or(f64::INFINITY))
                            .unwrap(),
                    )
            })
            .map(|(i, _)| i)
            .unwrap_or(0);
        let slice = &rows[worst * config.trials..(worst + 1) * config.trials];
        result.aggregate = Some(aggregate_rows(slice, bound));
        result.scan = scans;
    } else {
        result.aggregate = Some(aggregate_rows(&rows, bound));
    }
    result.trials = rows;
    Ok(result)
}

fn decode_campaign(config: &ExperimentConfig, system: &LinearSystem) -> Result<ExperimentResult> {
    let n = system.state_dim();
    let strategy = config.strategy()?;
    let choices = config.attacked_choices();
    let jobs: Vec<(usize, usize)> = (0..choices.len())
        .cartesian_product(0..config.trials)
        .collect();

    let rows: Vec<TrialRow> = jobs
        .par_iter()
        .map(|&(ci, trial)| -> Result<TrialRow> {
            let seed = derive_seed(config.seed, trial as u64);
            let x0 = match &config.initial_state {
                Some(x0) => DVector::from_column_slice(x0),
                None => {
                    let mut rng = aux_rng(seed);
                    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
                }
            };
            let plan = AttackPlan::new(
                choices[ci].clone(),
                strategy.clone(),
                CausalityMode::Prediction,
            );
            let trace = simulate(system, n, &x0, &plan, seed)?;
            let symbols: Vec<DVector<f64>> = (0..system.sensor_count())
                .map(|d| DVector::from_fn(n, |t, _| trace.attacked_outputs[t][d]))
                .collect();
            let outcome = noiseless_secure_decode(system, &symbols, config.k)?;
            let err = outcome
                .estimates
                .iter()
                .map(|e| (e - &x0).norm())
                .fold(f64::INFINITY, f64::min);
            let recovered = err.is_finite().then_some(err);
            let pass = outcome.status == DecodeStatus::Unique
                && recovered.map(|e| e < DECODE_PASS_TOL).unwrap_or(false);
            Ok(TrialRow {
                trial,
                seed,
                attacked_set: choices[ci].clone(),
                selected_set: None,
                mse: recovered,
                bound: DECODE_PASS_TOL,
                pass,
                oracle_mse: None,
                opt_good: None,
                decode_status: Some(outcome.status.to_string()),
                trace_dump: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut result = result_shell(config);
    result.bound = Some(DECODE_PASS_TOL);
    result.aggregate = Some(aggregate_rows(&rows, Some(DECODE_PASS_TOL)));
    result.trials = rows;
    Ok(result)
}

/// Execute the configured experiment: seeded Monte Carlo trials for the
/// estimation modes, decode trials for the noiseless mode, or the
/// observability summary.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let system = config.system()?;
    match config.mode {
        Mode::ObservabilityReport => {
            let analysis = sparse_observability_index(&system)?;
            let mut result = result_shell(config);
            result.observability = Some(ObservabilityReportOut {
                theta: analysis.theta,
                max_correctable: analysis.max_correctable,
                max_detectable: analysis.max_detectable,
                min_hamming_distance: analysis.min_hamming_distance,
                p: analysis.p,
                n: system.state_dim(),
            });
            Ok(result)
        }
        Mode::NoiselessDecode => decode_campaign(config, &system),
        Mode::Prediction | Mode::Filtering => estimation_campaign(config, &system),
    }
}

/// Run the oracle estimator (a Kalman filter on the true good set, attacked
/// set known) alongside the secure estimator on the same traces.
///
/// Only meaningful under the zero-out attack, which makes the attacked
/// sensors worthless and the good-set filter the best any estimator can do.
pub fn oracle_comparison(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    if config.attack.strategy != StrategyKind::ZeroOut {
        return Err(Error::config(
            "attack.strategy",
            "oracle comparison requires the zero_out strategy",
        ));
    }
    if !matches!(config.mode, Mode::Prediction | Mode::Filtering) {
        return Err(Error::config(
            "mode",
            "oracle comparison requires prediction or filtering",
        ));
    }
    let attacked = match &config.attack.attacked_set {
        AttackedSet::Fixed(set) => {
            let mut s = set.clone();
            s.sort_unstable();
            s
        }
        AttackedSet::Scan(_) => {
            return Err(Error::config(
                "attack.attacked_set",
                "oracle comparison needs a concrete attacked set, not worst_case_scan",
            ))
        }
    };
    let system = config.system()?;
    let p = system.sensor_count();
    let good: Vec<usize> = (0..p).filter(|i| !attacked.contains(i)).collect();
    if good.is_empty() {
        return Err(Error::config("attack.attacked_set", "no good sensors left"));
    }
    let good_filter = solve_steady_state(&system, &good)?;
    let emode = match config.mode {
        Mode::Prediction => EstimationMode::Prediction,
        Mode::Filtering => EstimationMode::Filtering,
        _ => unreachable!(),
    };
    let opt_good = match emode {
        EstimationMode::Prediction => good_filter.p_opt(),
        EstimationMode::Filtering => good_filter.f_opt(),
    };

    let window = WindowConfig::after_burn_in(
        config.window.n,
        config.window.epsilon.into(),
        config.window.burn_in,
    )?;
    let horizon = config.horizon();
    let x0 = config.initial_state_vector(system.state_dim());

    let rows: Vec<TrialRow> = (0..config.trials)
        .into_par_iter()
        .map(|trial| -> Result<TrialRow> {
            let seed = derive_seed(config.seed, trial as u64);
            let plan = AttackPlan::new(
                attacked.clone(),
                AttackStrategy::ZeroOut,
                config.causality(),
            );
            let trace = simulate(&system, horizon, &x0, &plan, seed)?;
            let (_, oracle_mse) =
                crate::estimator::oracle_estimate(&good_filter, &trace, &window, emode)?;
            let report = run_secure(config, &system, &trace, &window)?;
            let mse = report.selected_set().and_then(|e| e.window_mse);
            let pass = (oracle_mse - opt_good).abs() <= ORACLE_REL_TOL * opt_good;
            Ok(TrialRow {
                trial,
                seed,
                attacked_set: attacked.clone(),
                selected_set: report.selected_sensors().map(|s| s.to_vec()),
                mse,
                bound: report.bound,
                pass,
                oracle_mse: Some(oracle_mse),
                opt_good: Some(opt_good),
                decode_status: None,
                trace_dump: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let oracle_mses: Vec<f64> = rows.iter().filter_map(|r| r.oracle_mse).collect();
    let diffs: Vec<f64> = rows
        .iter()
        .filter_map(|r| Some(r.mse? - r.oracle_mse?))
        .collect();
    let secure_mses: Vec<f64> = rows.iter().filter_map(|r| r.mse).collect();
    let mut result = result_shell(config);
    result.bound = rows.first().map(|r| r.bound);
    result.aggregate = Some(aggregate_rows(&rows, result.bound));
    result.oracle = Some(OracleSummary {
        opt_good,
        mean_oracle_mse: stats::mean(&oracle_mses),
        mean_secure_mse: (!secure_mses.is_empty()).then(|| stats::mean(&secure_mses)),
        mean_secure_minus_oracle: (!diffs.is_empty()).then(|| stats::mean(&diffs)),
        secure_minus_oracle_stderr: (!diffs.is_empty()).then(|| stats::standard_error(&diffs)),
    });
    result.trials = rows;
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

fn fmt_set(set: &[usize]) -> String {
    set.iter().map(|s| s.to_string()).join(";")
}

fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write the per-trial CSV or the aggregate JSON into `dir`, plus one
/// per-timestep CSV per dumped trace. Returns the written paths.
pub fn emit_results(
    result: &ExperimentResult,
    format: OutputFormat,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    match format {
        OutputFormat::Csv => {
            let path = dir.join("results.csv");
            let mut w = csv::Writer::from_path(&path)?;
            let mut header = vec![
                "trial",
                "seed",
                "attacked_set",
                "selected_set",
                "mse",
                "bound",
                "pass",
            ];
            let with_oracle = result.oracle.is_some();
            let with_decode = result.mode == Mode::NoiselessDecode;
            if with_oracle {
                header.push("oracle_mse");
                header.push("opt_good");
            }
            if with_decode {
                header.push("decode_status");
            }
            w.write_record(&header)?;
            for row in &result.trials {
                let mut rec = vec![
                    row.trial.to_string(),
                    row.seed.to_string(),
                    fmt_set(&row.attacked_set),
                    row.selected_set.as_deref().map(fmt_set).unwrap_or_default(),
                    fmt_opt_f64(row.mse),
                    row.bound.to_string(),
                    row.pass.to_string(),
                ];
                if with_oracle {
                    rec.push(fmt_opt_f64(row.oracle_mse));
                    rec.push(fmt_opt_f64(row.opt_good));
                }
                if with_decode {
                    rec.push(row.decode_status.clone().unwrap_or_default());
                }
                w.write_record(&rec)?;
            }
            w.flush()?;
            written.push(path);
        }
        OutputFormat::Json => {
            let path = dir.join("results.json");
            let mut text = serde_json::to_string_pretty(result)?;
            text.push('\n');
            fs::write(&path, text)?;
            written.push(path);
        }
    }

    for row in &result.trials {
        if let Some(dump) = &row.trace_dump {
            let path = dir.join(format!("trace_trial_{:04}.csv", row.trial));
            let mut w = csv::Writer::from_path(&path)?;
            let n = dump.rows.first().map(|r| r.state.len()).unwrap_or(0);
            let mut header = vec!["t".to_string()];
            header.extend((0..n).map(|i| format!("x{i}")));
            header.extend((0..n).map(|i| format!("xhat{i}")));
            header.push("squared_error".to_string());
            w.write_record(&header)?;
            for r in &dump.rows {
                let mut rec = vec![r.t.to_string()];
                rec.extend(r.state.iter().map(|v| v.to_string()));
                rec.extend(r.estimate.iter().map(|v| v.to_string()));
                rec.push(r.squared_error.to_string());
                w.write_record(&rec)?;
            }
            w.flush()?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_config_json(mode: &str, trials: usize, n: usize) -> String {
        format!(
            r#"{{
  "system": {{"a": [[1.0]], "c": [[1.0], [1.0], [1.0]], "sigma_w": 1.0, "sigma_v": 1.0}},
  "k": 1,
  "mode": "{mode}",
  "attack": {{"strategy": "zero_out", "attacked_set": [0]}},
  "window": {{"n": {n}, "epsilon": {{"relative": 0.1}}, "burn_in": 150}},
  "trials": {trials},
  "seed": 7
}}"#
        )
    }

    fn theta2_report_config() -> ExperimentConfig {
        let json = r#"{
  "system": {
    "a": [[1.0, 0.0], [0.0, 1.0]],
    "c": [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, -1.0], [1.0, 2.0]],
    "sigma_w": 0.0, "sigma_v": 0.0
  },
  "k": 2,
  "mode": "observability_report"
}"#;
        ExperimentConfig::from_json_str(json).unwrap()
    }

    #[test]
    fn config_round_trips_through_its_echo() {
        let cfg = ExperimentConfig::from_json_str(&scalar_config_json("prediction", 3, 400)).unwrap();
        let echo = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&echo).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn config_validation_points_at_the_field() {
        let bad = r#"{
  "system": {"a": [[1.0, 0.0]], "c": [[1.0]], "sigma_w": 1.0, "sigma_v": 1.0},
  "k": 0, "mode": "prediction"
}"#;
        let err = ExperimentConfig::from_json_str(bad).unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "system.a[0]"),
            other => panic!("expected config error, got {other}"),
        }

        let bad_set = scalar_config_json("prediction", 1, 100)
            .replace("\"attacked_set\": [0]", "\"attacked_set\": [9]");
        let err = ExperimentConfig::from_json_str(&bad_set).unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "attack.attacked_set"),
            other => panic!("expected config error, got {other}"),
        }

        let bad_scan = scalar_config_json("prediction", 1, 100)
            .replace("\"attacked_set\": [0]", "\"attacked_set\": \"worst-case\"");
        assert!(ExperimentConfig::from_json_str(&bad_scan).is_err());

        let noisy_decode = scalar_config_json("noiseless_decode", 1, 100);
        let err = ExperimentConfig::from_json_str(&noisy_decode).unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "system"),
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn observability_report_for_theta2_plant() {
        let result = run_experiment(&theta2_report_config()).unwrap();
        let report = result.observability.unwrap();
        assert_eq!(report.theta, 2);
        assert_eq!(report.max_correctable, 1);
        assert_eq!(report.max_detectable, 3);
        assert_eq!(report.min_hamming_distance, 4);
        assert!(result.accepted());
    }

    #[test]
    fn single_noiseless_trial_has_zero_mse() {
        let json = r#"{
  "system": {"a": [[1.0]], "c": [[1.0], [1.0], [1.0]], "sigma_w": 0.0, "sigma_v": 0.0},
  "k": 1, "mode": "prediction",
  "window": {"n": 50, "epsilon": 0.0, "burn_in": 20},
  "trials": 1, "seed": 1
}"#;
        let cfg = ExperimentConfig::from_json_str(json).unwrap();
        let result = run_experiment(&cfg).unwrap();
        assert_eq!(result.trials.len(), 1);
        assert_eq!(result.trials[0].mse, Some(0.0));
        assert!(result.trials[0].pass);
        assert!(result.accepted());
    }

    #[test]
    fn decode_campaign_recovers_random_initial_states() {
        let json = r#"{
  "system": {
    "a": [[1.0, 0.0], [0.0, 1.0]],
    "c": [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, -1.0], [1.0, 2.0]],
    "sigma_w": 0.0, "sigma_v": 0.0
  },
  "k": 1,
  "mode": "noiseless_decode",
  "attack": {"strategy": "zero_out", "attacked_set": [4]},
  "trials": 6, "seed": 5
}"#;
        let cfg = ExperimentConfig::from_json_str(json).unwrap();
        let result = run_experiment(&cfg).unwrap();
        assert_eq!(result.trials.len(), 6);
        for row in &result.trials {
            assert_eq!(row.decode_status.as_deref(), Some("unique"));
            assert!(row.pass, "decode error {:?}", row.mse);
        }
        assert!(result.accepted());
    }

    #[test]
    fn worst_case_scan_covers_every_attacked_set() {
        let mut cfg =
            ExperimentConfig::from_json_str(&scalar_config_json("prediction", 2, 300)).unwrap();
        cfg.attack.attacked_set = AttackedSet::Scan("worst_case_scan".into());
        cfg.validate().unwrap();
        let result = run_experiment(&cfg).unwrap();
        assert_eq!(result.scan.len(), 3); // (3 choose 1)
        assert_eq!(result.trials.len(), 6);
        let agg = result.aggregate.unwrap();
        let worst = result
            .scan
            .iter()
            .map(|s| s.pass_fraction)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(agg.pass_fraction, worst);
    }

    #[test]
    fn aggregate_is_recomputable_from_rows() {
        let cfg =
            ExperimentConfig::from_json_str(&scalar_config_json("prediction", 4, 500)).unwrap();
        let result = run_experiment(&cfg).unwrap();
        let agg = result.aggregate.unwrap();
        let mses: Vec<f64> = result.trials.iter().filter_map(|r| r.mse).collect();
        assert!((agg.mean_mse.unwrap() - stats::mean(&mses)).abs() < 1e-12);
        let frac = result.trials.iter().filter(|r| r.pass).count() as f64
            / result.trials.len() as f64;
        assert_eq!(agg.pass_fraction, frac);
    }

    #[test]
    fn emitted_files_are_deterministic_and_consistent() {
        let cfg =
            ExperimentConfig::from_json_str(&scalar_config_json("prediction", 3, 300)).unwrap();
        let r1 = run_experiment(&cfg).unwrap();
        let r2 = run_experiment(&cfg).unwrap();

        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        emit_results(&r1, OutputFormat::Csv, dir1.path()).unwrap();
        emit_results(&r2, OutputFormat::Csv, dir2.path()).unwrap();
        let csv1 = fs::read(dir1.path().join("results.csv")).unwrap();
        let csv2 = fs::read(dir2.path().join("results.csv")).unwrap();
        assert_eq!(csv1, csv2);
        let text = String::from_utf8(csv1).unwrap();
        assert_eq!(text.lines().count(), 1 + 3); // header + one row per trial
        assert!(text.starts_with("trial,seed,attacked_set,selected_set,mse,bound,pass"));

        emit_results(&r1, OutputFormat::Json, dir1.path()).unwrap();
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir1.path().join("results.json")).unwrap())
                .unwrap();
        // Config echo re-parses to an equal config.
        let echoed: ExperimentConfig = serde_json::from_value(json["config"].clone()).unwrap();
        assert_eq!(echoed, cfg);
        // JSON aggregate mean equals the mean of the CSV rows.
        let mean_json = json["aggregate"]["mean_mse"].as_f64().unwrap();
        let mut mses = Vec::new();
        for line in text.lines().skip(1) {
            let mse_field: &str = line.split(',').nth(4).unwrap();
            if !mse_field.is_empty() {
                mses.push(mse_field.parse::<f64>().unwrap());
            }
        }
        assert!((mean_json - stats::mean(&mses)).abs() < 1e-12);
    }

    #[test]
    fn trace_dump_rows_cover_the_window() {
        // Noiseless plant: every set passes deterministically, so a trace is
        // always dumped.
        let json = r#"{
  "system": {"a": [[1.0]], "c": [[1.0], [1.0], [1.0]], "sigma_w": 0.0, "sigma_v": 0.0},
  "k": 1, "mode": "prediction",
  "window": {"n": 120, "epsilon": 0.0, "burn_in": 20},
  "trials": 1, "seed": 1
}"#;
        let mut cfg = ExperimentConfig::from_json_str(json).unwrap();
        cfg.dump_trace = true;
        let result = run_experiment(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let written = emit_results(&result, OutputFormat::Csv, dir.path()).unwrap();
        assert!(written.iter().any(|p| p.ends_with("trace_trial_0000.csv")));
        let text = fs::read_to_string(dir.path().join("trace_trial_0000.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 120);
        assert!(text.starts_with("t,x0,xhat0,squared_error"));
    }

    #[test]
    fn oracle_comparison_requires_zero_out() {
        let mut cfg =
            ExperimentConfig::from_json_str(&scalar_config_json("prediction", 2, 300)).unwrap();
        cfg.attack.strategy = StrategyKind::Bias;
        cfg.attack.params.bias = Some(1.0);
        assert!(matches!(
            oracle_comparison(&cfg),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn oracle_comparison_reports_both_estimators() {
        let cfg =
            ExperimentConfig::from_json_str(&scalar_config_json("prediction", 2, 2000)).unwrap();
        let result = oracle_comparison(&cfg).unwrap();
        let summary = result.oracle.unwrap();
        assert!(summary.opt_good > 0.0);
        for row in &result.trials {
            assert!(row.oracle_mse.is_some());
            assert_eq!(row.opt_good, Some(summary.opt_good));
        }
    }
}
