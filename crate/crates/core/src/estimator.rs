//! Secure state estimation over a time window: a bank of steady-state Kalman
//! filters (one per candidate sensor set of size p - k), residue tests that
//! certify a set's outputs as consistent with its own estimate, and selection
//! among the passing sets.
//!
//! Three entry points:
//! - [`secure_predict_scalar`]: scalar state, per-sensor residue test
//!   `(1/N) sum r_d^2 <= c_d^2 P_opt + sigma_v^2 + eps`.
//! - [`secure_predict`]: vector state, block residue test per size-theta
//!   subset and residue group, prediction threshold
//!   `P_opt + tr(Opinv M Opinv^T) + eps`.
//! - [`secure_filter`]: same structure with filtering estimates and the
//!   filtering threshold, which subtracts twice the sensor-noise cross term.

use std::collections::BTreeMap;
use std::sync::Arc;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kalman::{
    restrict_gain_columns, run_filtering, run_prediction, solve_steady_state, SteadyStateFilter,
};
use crate::linalg::select_coords;
use crate::observability::{sparse_observability_index, SubsetObservabilityData};
use crate::system::{LinearSystem, SimulationTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimationMode {
    Prediction,
    Filtering,
}

/// Slack added to each residue-test threshold (and to the error bound when
/// trials are judged). The relative form scales with the threshold's
/// noise-free part, which keeps pass rates stable across systems.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsilonSpec {
    /// eps = factor * base, where base is the test's noise-free threshold.
    Relative(f64),
    Absolute(f64),
}

impl Default for EpsilonSpec {
    fn default() -> Self {
        EpsilonSpec::Relative(0.1)
    }
}

impl EpsilonSpec {
    pub fn slack(&self, base: f64) -> f64 {
        match *self {
            EpsilonSpec::Relative(f) => f * base.max(0.0),
            EpsilonSpec::Absolute(a) => a,
        }
    }

    fn value(&self) -> f64 {
        match *self {
            EpsilonSpec::Relative(f) | EpsilonSpec::Absolute(f) => f,
        }
    }
}

/// The measured window G = {start, ..., start + len - 1}. The filters run
/// from t = 0 at their steady-state gains; `burn_in` steps must precede the
/// window so empirical moments have converged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub start: usize,
    pub len: usize,
    pub epsilon: EpsilonSpec,
    pub burn_in: usize,
}

pub const DEFAULT_BURN_IN: usize = 200;

impl WindowConfig {
    pub fn new(start: usize, len: usize, epsilon: EpsilonSpec, burn_in: usize) -> Result<Self> {
        let cfg = Self {
            start,
            len,
            epsilon,
            burn_in,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Window starting right after the burn-in.
    pub fn after_burn_in(len: usize, epsilon: EpsilonSpec, burn_in: usize) -> Result<Self> {
        Self::new(burn_in, len, epsilon, burn_in)
    }

    pub fn validate(&self) -> Result<()> {
        if self.len == 0 {
            return Err(Error::Window("window length must be at least 1".into()));
        }
        if self.start < self.burn_in {
            return Err(Error::Window(format!(
                "window start {} lies inside the burn-in ({} steps)",
                self.start, self.burn_in
            )));
        }
        if !(self.epsilon.value() >= 0.0) {
            return Err(Error::Window("epsilon must be nonnegative".into()));
        }
        Ok(())
    }

    /// One past the last window index.
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// One scalar residue test: a sensor within a candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorTest {
    pub sensor: usize,
    pub statistic: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// One residue group G_l = {t in G : (t - start) mod mu = l}.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupTest {
    pub group: usize,
    pub len: usize,
    pub statistic: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Block residue test outcome for one size-theta subset of a candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetTest {
    pub subset: Vec<usize>,
    pub mu: usize,
    pub groups: Vec<GroupTest>,
    pub passed: bool,
}

/// Everything measured about one candidate sensor set.
#[derive(Debug, Clone, PartialEq)]
pub struct SetEvaluation {
    pub sensors: Vec<usize>,
    /// P_opt,s (prediction) or F_opt,s (filtering); None if the set's filter
    /// could not be solved.
    pub opt_trace: Option<f64>,
    pub sensor_tests: Vec<SensorTest>,
    pub subset_tests: Vec<SubsetTest>,
    /// Empirical windowed MSE of this set's estimates against the true states.
    pub window_mse: Option<f64>,
    pub passed: bool,
    /// Largest statistic/threshold ratio over the set's tests; selection
    /// prefers the smallest.
    pub worst_slack: f64,
}

/// Full outcome of one bank run: per-set, per-subset, per-group statistics
/// and verdicts, the selected set, and its estimates on the window.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidueReport {
    pub mode: EstimationMode,
    pub window_start: usize,
    pub window_len: usize,
    /// max over candidate sets of P_opt,s (resp. F_opt,s): the error bound
    /// the selected estimate is held to.
    pub bound: f64,
    pub sets: Vec<SetEvaluation>,
    pub selected: Option<usize>,
    /// Estimates of the selected set on the window; empty when nothing passed.
    pub estimates: Vec<DVector<f64>>,
}

impl ResidueReport {
    pub fn selected_set(&self) -> Option<&SetEvaluation> {
        self.selected.map(|i| &self.sets[i])
    }

    pub fn selected_sensors(&self) -> Option<&[usize]> {
        self.selected_set().map(|e| e.sensors.as_slice())
    }
}

fn slack_ratio(statistic: f64, threshold: f64) -> f64 {
    if threshold > 0.0 {
        statistic / threshold
    } else if statistic <= 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn window_mse(states: &[DVector<f64>], estimates: &[DVector<f64>], start: usize) -> f64 {
    let n = estimates.len();
    let sum: f64 = estimates
        .iter()
        .enumerate()
        .map(|(j, e)| (&states[start + j] - e).norm_squared())
        .sum();
    sum / n as f64
}

fn unsolvable(sensors: Vec<usize>) -> SetEvaluation {
    SetEvaluation {
        sensors,
        opt_trace: None,
        sensor_tests: Vec::new(),
        subset_tests: Vec::new(),
        window_mse: None,
        passed: false,
        worst_slack: f64::INFINITY,
    }
}

/// Among passing sets, pick the one with the smallest worst slack; ties keep
/// the lexicographically first (sets are enumerated in lexicographic order).
fn select(sets: &[SetEvaluation]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, eval) in sets.iter().enumerate() {
        if !eval.passed {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(b) if eval.worst_slack < sets[b].worst_slack => best = Some(i),
            _ => {}
        }
    }
    best
}

fn assemble(
    mode: EstimationMode,
    window: &WindowConfig,
    set_size: usize,
    evals: Vec<(SetEvaluation, Vec<DVector<f64>>)>,
) -> Result<ResidueReport> {
    if evals.iter().all(|(e, _)| e.opt_trace.is_none()) {
        return Err(Error::NoObservableSet { size: set_size });
    }
    let bound = evals
        .iter()
        .filter_map(|(e, _)| e.opt_trace)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sets = Vec::with_capacity(evals.len());
    let mut estimates_by_set = Vec::with_capacity(evals.len());
    for (eval, est) in evals {
        sets.push(eval);
        estimates_by_set.push(est);
    }
    let selected = select(&sets);
    let estimates = selected
        .map(|i| std::mem::take(&mut estimates_by_set[i]))
        .unwrap_or_default();
    Ok(ResidueReport {
        mode,
        window_start: window.start,
        window_len: window.len,
        bound,
        sets,
        selected,
        estimates,
    })
}

/// Secure state prediction for a scalar state: run one Kalman filter per set
/// of p - k sensors and keep the sets whose per-sensor mean squared residues
/// stay under `c_d^2 P_opt,s + sigma_v^2 + eps` on the window.
pub fn secure_predict_scalar(
    system: &LinearSystem,
    trace: &SimulationTrace,
    window: &WindowConfig,
    k: usize,
) -> Result<ResidueReport> {
    let n = system.state_dim();
    if n != 1 {
        return Err(Error::NotScalar(n));
    }
    let p = system.sensor_count();
    if p < 2 * k + 1 {
        return Err(Error::TooFewSensors { p, k });
    }
    window.validate()?;
    let needed = window.end();
    if trace.horizon < needed {
        return Err(Error::InsufficientHorizon {
            horizon: trace.horizon,
            needed,
        });
    }

    let sv2 = system.sigma_v() * system.sigma_v();
    let sets: Vec<Vec<usize>> = (0..p).combinations(p - k).collect();
    let x0 = DVector::zeros(1);

    let evals: Vec<(SetEvaluation, Vec<DVector<f64>>)> = sets
        .par_iter()
        .map(|s| -> Result<(SetEvaluation, Vec<DVector<f64>>)> {
            let filter = match solve_steady_state(system, s) {
                Ok(f) => f,
                Err(
                    Error::UnobservableSubset(_)
                    | Error::SingularInnovation
                    | Error::RiccatiDivergence(_),
                ) => return Ok((unsolvable(s.clone()), Vec::new())),
                Err(e) => return Err(e),
            };
            let outputs: Vec<DVector<f64>> = trace.attacked_outputs[..needed]
                .iter()
                .map(|y| select_coords(y, s))
                .collect();
            let full = run_prediction(&filter, &outputs, &x0)?;
            let est_window = full[window.start..].to_vec();

            let mut tests = Vec::with_capacity(s.len());
            let mut worst = 0.0_f64;
            for (slot, &d) in s.iter().enumerate() {
                let c_d = system.c()[(d, 0)];
                let sum: f64 = (0..window.len)
                    .map(|j| {
                        let r = outputs[window.start + j][slot] - c_d * est_window[j][0];
                        r * r
                    })
                    .sum();
                let statistic = sum / window.len as f64;
                let base = c_d * c_d * filter.p_opt() + sv2;
                let threshold = base + window.epsilon.slack(base);
                let passed = statistic <= threshold;
                worst = worst.max(slack_ratio(statistic, threshold));
                tests.push(SensorTest {
                    sensor: d,
                    statistic,
                    threshold,
                    passed,
                });
            }
            let passed = tests.iter().all(|t| t.passed);
            let mse = window_mse(&trace.states, &est_window, window.start);
            Ok((
                SetEvaluation {
                    sensors: s.clone(),
                    opt_trace: Some(filter.p_opt()),
                    sensor_tests: tests,
                    subset_tests: Vec::new(),
                    window_mse: Some(mse),
                    passed,
                    worst_slack: worst,
                },
                est_window,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    assemble(EstimationMode::Prediction, window, p - k, evals)
}

/// Stacked residues `r_i(t) = [y_i(t); ...; y_i(t + mu - 1)] - O_i xhat(t)`
/// for each window index, truncated to the largest prefix whose length is a
/// multiple of mu.
///
/// `outputs_on_subset[j]` must be the subset's reported output at window
/// index j, supplied through the mu - 1 look-ahead; `estimates[j]` the set's
/// state estimate at window index j.
pub fn compute_block_residues(
    data: &SubsetObservabilityData,
    outputs_on_subset: &[DVector<f64>],
    estimates: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    let mu = data.mu;
    let theta = data.size();
    let used = mu * (estimates.len() / mu);
    if used == 0 {
        return Err(Error::WindowTooShort {
            len: estimates.len(),
            mu,
        });
    }
    if outputs_on_subset.len() < used + mu - 1 {
        return Err(Error::InsufficientHorizon {
            horizon: outputs_on_subset.len(),
            needed: used + mu - 1,
        });
    }
    if let Some(bad) = outputs_on_subset.iter().find(|y| y.len() != theta) {
        return Err(Error::Dimension(format!(
            "subset output has length {}, expected {theta}",
            bad.len()
        )));
    }

    let mut residues = Vec::with_capacity(used);
    for j in 0..used {
        let mut stacked = DVector::zeros(theta * mu);
        for b in 0..mu {
            stacked
                .rows_mut(b * theta, theta)
                .copy_from(&outputs_on_subset[j + b]);
        }
        residues.push(stacked - &data.observability_matrix * &estimates[j]);
    }
    Ok(residues)
}

fn group_tests(
    data: &SubsetObservabilityData,
    residues: &[DVector<f64>],
    base_threshold: f64,
    epsilon: EpsilonSpec,
) -> Result<Vec<GroupTest>> {
    let mu = data.mu;
    if residues.is_empty() || residues.len() % mu != 0 {
        return Err(Error::WindowTooShort {
            len: residues.len(),
            mu,
        });
    }
    let n_b = residues.len() / mu;
    let threshold = base_threshold + epsilon.slack(base_threshold);
    let mut tests = Vec::with_capacity(mu);
    for l in 0..mu {
        // tr(Opinv r r^T Opinv^T) is exactly |Opinv r|^2.
        let sum: f64 = (0..n_b)
            .map(|b| (&data.pinv * &residues[b * mu + l]).norm_squared())
            .sum();
        let statistic = sum / n_b as f64;
        tests.push(GroupTest {
            group: l,
            len: n_b,
            statistic,
            threshold,
            passed: statistic <= threshold,
        });
    }
    Ok(tests)
}

/// Per-group block residue test with the prediction threshold
/// `P_opt,s + tr(Opinv M Opinv^T) + eps`.
pub fn block_residue_test_prediction(
    data: &SubsetObservabilityData,
    residues: &[DVector<f64>],
    p_opt: f64,
    epsilon: EpsilonSpec,
) -> Result<Vec<GroupTest>> {
    group_tests(data, residues, p_opt + data.residue_noise_trace(), epsilon)
}

/// Per-group block residue test with the filtering threshold
/// `F_opt,s + tr(Opinv M Opinv^T) - 2 * cross_term + eps`.
pub fn block_residue_test_filtering(
    data: &SubsetObservabilityData,
    residues: &[DVector<f64>],
    f_opt: f64,
    cross_term: f64,
    epsilon: EpsilonSpec,
) -> Result<Vec<GroupTest>> {
    group_tests(
        data,
        residues,
        f_opt + data.residue_noise_trace() - 2.0 * cross_term,
        epsilon,
    )
}

/// Expected interaction between the filtering estimate's dependence on the
/// current sensor noise and the same noise inside the block residue:
/// `E(v_i^T(t) L_i^T Opinv v_stack)`.
///
/// Since `E(v_stack v_i^T(t)) = sigma_v^2 [I_theta; 0]`, this collapses to
/// `sigma_v^2 tr(L_i^T Opinv[:, 0..theta])`.
pub fn filtering_cross_term(data: &SubsetObservabilityData, gain_cols: &DMatrix<f64>) -> f64 {
    let theta = data.size();
    let first_cols = data.pinv.columns(0, theta);
    let sv2 = data.sigma_v * data.sigma_v;
    sv2 * (gain_cols.transpose() * first_cols).trace()
}

fn bank_vector(
    system: &LinearSystem,
    trace: &SimulationTrace,
    window: &WindowConfig,
    k: usize,
    mode: EstimationMode,
) -> Result<ResidueReport> {
    window.validate()?;
    let p = system.sensor_count();
    let n = system.state_dim();
    let analysis = sparse_observability_index(system)?;
    if !analysis.tolerates(k) {
        return Err(Error::SparseCondition {
            theta: analysis.theta,
            p,
            k,
        });
    }
    let theta = analysis.theta;
    let sets: Vec<Vec<usize>> = (0..p).combinations(p - k).collect();

    // Shared subset data: the same theta-subset appears in many sets.
    let mut cache: BTreeMap<Vec<usize>, Arc<SubsetObservabilityData>> = BTreeMap::new();
    for s in &sets {
        for subset in s.iter().copied().combinations(theta) {
            if !cache.contains_key(&subset) {
                let data = crate::observability::build_subset_data(system, &subset)?;
                cache.insert(subset, Arc::new(data));
            }
        }
    }
    let max_mu = cache.values().map(|d| d.mu).max().unwrap_or(1);
    if window.len < max_mu {
        return Err(Error::WindowTooShort {
            len: window.len,
            mu: max_mu,
        });
    }
    let needed = window.end() + max_mu - 1;
    if trace.horizon < needed {
        return Err(Error::InsufficientHorizon {
            horizon: trace.horizon,
            needed,
        });
    }

    let x0 = DVector::zeros(n);
    let evals: Vec<(SetEvaluation, Vec<DVector<f64>>)> = sets
        .par_iter()
        .map(|s| -> Result<(SetEvaluation, Vec<DVector<f64>>)> {
            let filter = match solve_steady_state(system, s) {
                Ok(f) => f,
                Err(
                    Error::UnobservableSubset(_)
                    | Error::SingularInnovation
                    | Error::RiccatiDivergence(_),
                ) => return Ok((unsolvable(s.clone()), Vec::new())),
                Err(e) => return Err(e),
            };
            let outputs: Vec<DVector<f64>> = trace.attacked_outputs[..window.end()]
                .iter()
                .map(|y| select_coords(y, s))
                .collect();
            let full = match mode {
                EstimationMode::Prediction => run_prediction(&filter, &outputs, &x0)?,
                EstimationMode::Filtering => run_filtering(&filter, &outputs, &x0)?,
            };
            let est_window = full[window.start..].to_vec();

            let mut subset_tests = Vec::new();
            let mut worst = 0.0_f64;
            for subset in s.iter().copied().combinations(theta) {
                let data = &cache[&subset];
                let lookahead_end = window.start + window.len + data.mu - 1;
                let outs_i: Vec<DVector<f64>> = trace.attacked_outputs
                    [window.start..lookahead_end]
                    .iter()
                    .map(|y| select_coords(y, &subset))
                    .collect();
                let residues = compute_block_residues(data, &outs_i, &est_window)?;
                let groups = match mode {
                    EstimationMode::Prediction => block_residue_test_prediction(
                        data,
                        &residues,
                        filter.p_opt(),
                        window.epsilon,
                    )?,
                    EstimationMode::Filtering => {
                        let gain_cols = restrict_gain_columns(&filter, &subset)?;
                        let cross = filtering_cross_term(data, &gain_cols);
                        block_residue_test_filtering(
                            data,
                            &residues,
                            filter.f_opt(),
                            cross,
                            window.epsilon,
                        )?
                    }
                };
                for g in &groups {
                    worst = worst.max(slack_ratio(g.statistic, g.threshold));
                }
                let passed = groups.iter().all(|g| g.passed);
                subset_tests.push(SubsetTest {
                    subset,
                    mu: data.mu,
                    groups,
                    passed,
                });
            }
            let passed = subset_tests.iter().all(|t| t.passed);
            let opt = match mode {
                EstimationMode::Prediction => filter.p_opt(),
                EstimationMode::Filtering => filter.f_opt(),
            };
            let mse = window_mse(&trace.states, &est_window, window.start);
            Ok((
                SetEvaluation {
                    sensors: s.clone(),
                    opt_trace: Some(opt),
                    sensor_tests: Vec::new(),
                    subset_tests,
                    window_mse: Some(mse),
                    passed,
                    worst_slack: worst,
                },
                est_window,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    assemble(mode, window, p - k, evals)
}

/// Secure state prediction for a vector state: the filter bank plus the
/// per-subset, per-group block residue test at the prediction threshold.
pub fn secure_predict(
    system: &LinearSystem,
    trace: &SimulationTrace,
    window: &WindowConfig,
    k: usize,
) -> Result<ResidueReport> {
    bank_vector(system, trace, window, k, EstimationMode::Prediction)
}

/// Secure state filtering: identical bank structure with filtering estimates
/// and the filtering threshold.
pub fn secure_filter(
    system: &LinearSystem,
    trace: &SimulationTrace,
    window: &WindowConfig,
    k: usize,
) -> Result<ResidueReport> {
    bank_vector(system, trace, window, k, EstimationMode::Filtering)
}

/// A Kalman filter run on a known-good sensor set (the oracle of the
/// impossibility bound): no residue tests, just the estimate and its
/// windowed MSE.
pub fn oracle_estimate(
    filter: &SteadyStateFilter,
    trace: &SimulationTrace,
    window: &WindowConfig,
    mode: EstimationMode,
) -> Result<(Vec<DVector<f64>>, f64)> {
    window.validate()?;
    if trace.horizon < window.end() {
        return Err(Error::InsufficientHorizon {
            horizon: trace.horizon,
            needed: window.end(),
        });
    }
    let outputs: Vec<DVector<f64>> = trace.attacked_outputs[..window.end()]
        .iter()
        .map(|y| select_coords(y, filter.sensor_set()))
        .collect();
    let x0 = DVector::zeros(trace.states[0].len());
    let full = match mode {
        EstimationMode::Prediction => run_prediction(filter, &outputs, &x0)?,
        EstimationMode::Filtering => run_filtering(filter, &outputs, &x0)?,
    };
    let est_window = full[window.start..].to_vec();
    let mse = window_mse(&trace.states, &est_window, window.start);
    Ok((est_window, mse))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::adversary::{AttackPlan, AttackStrategy, CausalityMode};
    use crate::observability::build_subset_data;
    use crate::stats;
    use crate::system::simulate;

    fn scalar_three_sensor(sigma_w: f64, sigma_v: f64) -> LinearSystem {
        LinearSystem::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 1.0]),
            sigma_w,
            sigma_v,
        )
        .unwrap()
    }

    fn rotation_system(p_sensors: usize, sigma_w: f64, sigma_v: f64) -> LinearSystem {
        let th = 0.3_f64;
        let a = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]) * 0.99;
        let rows: Vec<f64> = (0..p_sensors)
            .flat_map(|j| {
                let ang = 2.0 * std::f64::consts::PI * j as f64 / p_sensors as f64;
                [ang.cos(), ang.sin()]
            })
            .collect();
        let c = DMatrix::from_row_slice(p_sensors, 2, &rows);
        LinearSystem::new(a, c, sigma_w, sigma_v).unwrap()
    }

    #[test]
    fn window_validation() {
        assert!(WindowConfig::new(200, 0, EpsilonSpec::default(), 200).is_err());
        assert!(WindowConfig::new(100, 10, EpsilonSpec::default(), 200).is_err());
        assert!(WindowConfig::new(200, 10, EpsilonSpec::Absolute(-1.0), 200).is_err());
        let w = WindowConfig::after_burn_in(50, EpsilonSpec::default(), 30).unwrap();
        assert_eq!(w.end(), 80);
    }

    #[test]
    fn scalar_estimator_preconditions() {
        let sys2 = rotation_system(5, 1.0, 1.0);
        let trace = simulate(&sys2, 50, &DVector::zeros(2), &AttackPlan::none(), 1).unwrap();
        let w = WindowConfig::after_burn_in(10, EpsilonSpec::default(), 20).unwrap();
        assert!(matches!(
            secure_predict_scalar(&sys2, &trace, &w, 1),
            Err(Error::NotScalar(2))
        ));

        let sys1 = scalar_three_sensor(1.0, 1.0);
        let trace = simulate(&sys1, 50, &DVector::zeros(1), &AttackPlan::none(), 1).unwrap();
        assert!(matches!(
            secure_predict_scalar(&sys1, &trace, &w, 2),
            Err(Error::TooFewSensors { .. })
        ));
        // Horizon must cover the window.
        let w_long = WindowConfig::after_burn_in(100, EpsilonSpec::default(), 20).unwrap();
        assert!(matches!(
            secure_predict_scalar(&sys1, &trace, &w_long, 1),
            Err(Error::InsufficientHorizon { .. })
        ));
    }

    #[test]
    fn sparse_condition_is_checked_up_front() {
        // theta = 2 with five sensors tolerates k = 1 but not k = 2.
        let system = LinearSystem::new(
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(5, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, -1.0, 1.0, 2.0]),
            1.0,
            1.0,
        )
        .unwrap();
        let trace = simulate(&system, 400, &DVector::zeros(2), &AttackPlan::none(), 1).unwrap();
        let w = WindowConfig::after_burn_in(100, EpsilonSpec::default(), 200).unwrap();
        assert!(matches!(
            secure_predict(&system, &trace, &w, 2),
            Err(Error::SparseCondition { theta: 2, p: 5, k: 2 })
        ));
        assert!(secure_predict(&system, &trace, &w, 1).is_ok());
    }

    #[test]
    fn noiseless_unattacked_bank_passes_exactly() {
        let system = rotation_system(5, 0.0, 0.0);
        let trace = simulate(&system, 320, &DVector::zeros(2), &AttackPlan::none(), 1).unwrap();
        let w = WindowConfig::after_burn_in(100, EpsilonSpec::Absolute(0.0), 200).unwrap();
        for report in [
            secure_predict(&system, &trace, &w, 2).unwrap(),
            secure_filter(&system, &trace, &w, 2).unwrap(),
        ] {
            assert!(report.sets.iter().all(|s| s.passed));
            assert!(report.selected.is_some());
            assert!(report.estimates.iter().all(|e| e.amax() == 0.0));
            assert_eq!(report.bound, 0.0);
            assert!(report
                .sets
                .iter()
                .all(|s| s.window_mse == Some(0.0)));
        }

        let scalar = scalar_three_sensor(0.0, 0.0);
        let trace = simulate(&scalar, 320, &DVector::zeros(1), &AttackPlan::none(), 1).unwrap();
        let report = secure_predict_scalar(&scalar, &trace, &w, 1).unwrap();
        assert!(report.sets.iter().all(|s| s.passed));
        for set in &report.sets {
            for t in &set.sensor_tests {
                assert_eq!(t.statistic, 0.0);
            }
        }
    }

    #[test]
    fn block_residues_are_plain_innovations_when_mu_is_one() {
        let system = LinearSystem::new(
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
            1.0,
            1.0,
        )
        .unwrap();
        let data = build_subset_data(&system, &[0, 1]).unwrap();
        assert_eq!(data.mu, 1);
        let outputs = vec![
            DVector::from_column_slice(&[1.0, 2.0]),
            DVector::from_column_slice(&[3.0, -1.0]),
        ];
        let estimates = vec![
            DVector::from_column_slice(&[0.5, 0.5]),
            DVector::from_column_slice(&[1.0, 1.0]),
        ];
        let residues = compute_block_residues(&data, &outputs, &estimates).unwrap();
        assert_eq!(residues.len(), 2);
        for (j, r) in residues.iter().enumerate() {
            let expect = &outputs[j] - &data.observability_matrix * &estimates[j];
            assert_eq!(r, &expect);
        }
    }

    /// The block residue decomposes as O_i (x - xhat) + J_i w_stack + v_stack;
    /// reconstruct it from the trace internals and compare.
    #[test]
    fn block_residue_decomposition_matches_trace_internals() {
        let system = rotation_system(5, 0.8, 0.6);
        let set = vec![0usize, 1, 2];
        let subset = vec![0usize];
        let data = build_subset_data(&system, &subset).unwrap();
        assert_eq!(data.mu, 2);

        let trace = simulate(&system, 260, &DVector::zeros(2), &AttackPlan::none(), 31).unwrap();
        let w = WindowConfig::after_burn_in(40, EpsilonSpec::default(), 200).unwrap();
        let filter = crate::kalman::solve_steady_state(&system, &set).unwrap();
        let outputs: Vec<DVector<f64>> = trace.attacked_outputs[..w.end()]
            .iter()
            .map(|y| select_coords(y, &set))
            .collect();
        let full = crate::kalman::run_prediction(&filter, &outputs, &DVector::zeros(2)).unwrap();
        let est_window = full[w.start..].to_vec();

        let outs_i: Vec<DVector<f64>> = trace.attacked_outputs[w.start..w.end() + data.mu - 1]
            .iter()
            .map(|y| select_coords(y, &subset))
            .collect();
        let residues = compute_block_residues(&data, &outs_i, &est_window).unwrap();

        for (j, r) in residues.iter().enumerate() {
            let t = w.start + j;
            let mut w_stack = DVector::zeros(2 * (data.mu - 1));
            for b in 0..data.mu - 1 {
                w_stack
                    .rows_mut(b * 2, 2)
                    .copy_from(&trace.process_noise[t + b]);
            }
            let mut v_stack = DVector::zeros(data.mu);
            for b in 0..data.mu {
                v_stack[b] = trace.sensor_noise[t + b][0];
            }
            let expect = &data.observability_matrix * (&trace.states[t] - &est_window[j])
                + &data.noise_coupling * w_stack
                + v_stack;
            assert!((r - expect).amax() < 1e-10);
        }
    }

    /// The closed form of the filtering cross term is implementer-derived, so
    /// it is held against a direct Monte Carlo of E(v_i^T L^T Opinv v_stack).
    #[test]
    fn filtering_cross_term_matches_monte_carlo() {
        let system = rotation_system(5, 0.8, 0.7);
        let set = vec![0usize, 2, 3];
        let subset = vec![2usize];
        let data = build_subset_data(&system, &subset).unwrap();
        let filter = crate::kalman::solve_steady_state(&system, &set).unwrap();
        let gain_cols = crate::kalman::restrict_gain_columns(&filter, &subset).unwrap();
        let closed = filtering_cross_term(&data, &gain_cols);

        let theta = data.size();
        let dim = theta * data.mu;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 200_000;
        let mut samples = Vec::with_capacity(draws);
        let m = gain_cols.transpose() * &data.pinv; // theta x dim
        for _ in 0..draws {
            let v_stack =
                DVector::from_fn(dim, |_, _| data.sigma_v * rng.sample::<f64, _>(StandardNormal));
            let v_t = v_stack.rows(0, theta).into_owned();
            samples.push((v_t.transpose() * &m * v_stack)[(0, 0)]);
        }
        let band = 3.0 * stats::standard_error(&samples);
        assert!(
            (stats::mean(&samples) - closed).abs() < band,
            "closed form {closed} vs MC {} (band {band})",
            stats::mean(&samples)
        );
        // sigma_v = 0 kills the term.
        let mut dry = data.clone();
        dry.sigma_v = 0.0;
        assert_eq!(filtering_cross_term(&dry, &gain_cols), 0.0);
    }

    #[test]
    fn huge_bias_is_rejected_wherever_it_appears() {
        let system = rotation_system(5, 1.0, 1.0);
        let plan = AttackPlan::new(
            vec![1],
            AttackStrategy::Bias(1e6),
            CausalityMode::Prediction,
        );
        let trace = simulate(&system, 4300, &DVector::zeros(2), &plan, 17).unwrap();
        let w = WindowConfig::after_burn_in(4000, EpsilonSpec::default(), 200).unwrap();
        let report = secure_predict(&system, &trace, &w, 1).unwrap();
        for set in &report.sets {
            if set.sensors.contains(&1) {
                assert!(!set.passed, "set {:?} should reject the bias", set.sensors);
            }
        }
        let selected = report.selected_sensors().unwrap();
        assert!(!selected.contains(&1));
    }

    /// On a scalar plant the block test with theta = 1, mu = 1 degenerates to
    /// the per-sensor test: same selected set, same estimates.
    #[test]
    fn scalar_and_vector_banks_agree() {
        let system = scalar_three_sensor(1.0, 1.0);
        for seed in [3u64, 5, 8] {
            let plan = AttackPlan::new(vec![0], AttackStrategy::ZeroOut, CausalityMode::Prediction);
            let trace = simulate(&system, 2300, &DVector::zeros(1), &plan, seed).unwrap();
            let w = WindowConfig::after_burn_in(2000, EpsilonSpec::default(), 200).unwrap();
            let scalar = secure_predict_scalar(&system, &trace, &w, 1).unwrap();
            let vector = secure_predict(&system, &trace, &w, 1).unwrap();
            assert_eq!(scalar.selected_sensors(), vector.selected_sensors());
            assert_eq!(scalar.estimates.len(), vector.estimates.len());
            for (a, b) in scalar.estimates.iter().zip(&vector.estimates) {
                assert!((a - b).amax() < 1e-10);
            }
            for (sa, sb) in scalar.sets.iter().zip(&vector.sets) {
                assert_eq!(sa.passed, sb.passed);
            }
        }
    }

    #[test]
    fn window_shorter_than_mu_errors() {
        let system = rotation_system(5, 1.0, 1.0);
        let trace = simulate(&system, 260, &DVector::zeros(2), &AttackPlan::none(), 1).unwrap();
        let w = WindowConfig::after_burn_in(1, EpsilonSpec::default(), 200).unwrap();
        assert!(matches!(
            secure_predict(&system, &trace, &w, 1),
            Err(Error::WindowTooShort { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// tr(Opinv r r^T Opinv^T) = |Opinv r|^2 exactly (algebraic identity
        /// the group statistic relies on).
        #[test]
        fn trace_of_outer_product_equals_squared_norm(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = 4;
            let cols = 2;
            let pinv = DMatrix::from_fn(cols, rows, |_, _| rng.sample::<f64, _>(StandardNormal));
            let r = DVector::from_fn(rows, |_, _| rng.sample::<f64, _>(StandardNormal));
            let projected = &pinv * &r;
            let outer = &projected * projected.transpose();
            prop_assert!((outer.trace() - projected.norm_squared()).abs() < 1e-12);
        }
    }
}
