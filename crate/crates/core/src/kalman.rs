//! Steady-state Kalman filters for arbitrary sensor subsets.
//!
//! The prediction error covariance is the stabilizing fixed point of
//!   P <- A P A^T + sigma_w^2 I - A P C^T (C P C^T + sigma_v^2 I)^{-1} C P A^T,
//! found by fixed-point iteration from P0 = sigma_w^2 I. The iteration is the
//! covariance recursion of the filter itself, so it converges for observable
//! pairs whenever sigma_v > 0, and it doubles as a brute-force oracle for any
//! faster solver added later.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::system::LinearSystem;

pub const RICCATI_TOL: f64 = 1e-10;
pub const RICCATI_MAX_ITERS: usize = 1_000_000;

/// Steady-state gains and error covariances of the Kalman filter running on
/// one sensor set.
///
/// Prediction and filtering use different gains: the prediction update
/// `xh(t+1) = A xh(t) + L (y(t) - C xh(t))` uses `gain_pred = A K`, while the
/// filtering update `xh(t) = xp(t) + K (y(t) - C xp(t))` uses
/// `gain_filt = K = P C^T S^{-1}` directly.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyStateFilter {
    sensor_set: Vec<usize>,
    a: DMatrix<f64>,
    c_s: DMatrix<f64>,
    p_pred: DMatrix<f64>,
    p_filt: DMatrix<f64>,
    gain_pred: DMatrix<f64>,
    gain_filt: DMatrix<f64>,
    p_opt: f64,
    f_opt: f64,
}

impl SteadyStateFilter {
    pub fn sensor_set(&self) -> &[usize] {
        &self.sensor_set
    }

    /// Steady-state prediction error covariance.
    pub fn prediction_covariance(&self) -> &DMatrix<f64> {
        &self.p_pred
    }

    /// Steady-state filtering error covariance.
    pub fn filtering_covariance(&self) -> &DMatrix<f64> {
        &self.p_filt
    }

    pub fn prediction_gain(&self) -> &DMatrix<f64> {
        &self.gain_pred
    }

    pub fn filtering_gain(&self) -> &DMatrix<f64> {
        &self.gain_filt
    }

    /// tr(P_pred).
    pub fn p_opt(&self) -> f64 {
        self.p_opt
    }

    /// tr(P_filt).
    pub fn f_opt(&self) -> f64 {
        self.f_opt
    }

    pub fn output_map(&self) -> &DMatrix<f64> {
        &self.c_s
    }
}

/// Invert the innovation covariance S = C P C^T + sigma_v^2 I.
///
/// With sigma_v > 0 the matrix is positive definite. With sigma_v = 0 it is
/// only invertible when the output map has full row rank; the one exception
/// is the fully degenerate noiseless plant (S exactly zero, which happens iff
/// sigma_w = 0 too), where the correction term vanishes and the zero filter
/// is the correct limit.
fn invert_innovation(s: &DMatrix<f64>, sigma_v: f64) -> Result<DMatrix<f64>> {
    if sigma_v == 0.0 && s.amax() == 0.0 {
        return Ok(DMatrix::zeros(s.nrows(), s.ncols()));
    }
    if let Some(chol) = s.clone().cholesky() {
        return Ok(chol.inverse());
    }
    if sigma_v > 0.0 {
        // SPD in exact arithmetic; fall back to LU for near-degenerate cases.
        if let Some(inv) = s.clone().try_inverse() {
            return Ok(inv);
        }
    }
    Err(Error::SingularInnovation)
}

/// Solve for the steady-state prediction and filtering filter on a sensor set.
pub fn solve_steady_state(system: &LinearSystem, sensor_set: &[usize]) -> Result<SteadyStateFilter> {
    let p = system.sensor_count();
    let n = system.state_dim();
    let mut set = sensor_set.to_vec();
    set.sort_unstable();
    if set.is_empty() {
        return Err(Error::Dimension("sensor set must be non-empty".into()));
    }
    for pair in set.windows(2) {
        if pair[0] == pair[1] {
            return Err(Error::Dimension(format!(
                "sensor set contains {} twice",
                pair[0]
            )));
        }
    }
    if *set.last().unwrap() >= p {
        return Err(Error::SensorOutsideSet {
            sensor: *set.last().unwrap(),
            set: (0..p).collect(),
        });
    }

    let a = system.a().clone();
    let c_s = system.c_rows(&set);
    let sw2 = system.sigma_w() * system.sigma_w();
    let sv2 = system.sigma_v() * system.sigma_v();
    let q = DMatrix::identity(n, n) * sw2;
    let r = DMatrix::identity(set.len(), set.len()) * sv2;

    let mut p_pred = q.clone();
    let mut converged = false;
    for _ in 0..RICCATI_MAX_ITERS {
        let s = &c_s * &p_pred * c_s.transpose() + &r;
        let s_inv = invert_innovation(&s, system.sigma_v())?;
        let gain = &p_pred * c_s.transpose() * &s_inv;
        let corrected = &p_pred - &gain * &c_s * &p_pred;
        let mut next = &a * corrected * a.transpose() + &q;
        // Symmetrize to keep roundoff from accumulating.
        next = (&next + next.transpose()) * 0.5;
        let diff = (&next - &p_pred).amax();
        p_pred = next;
        if diff < RICCATI_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::RiccatiDivergence(RICCATI_MAX_ITERS));
    }

    let s = &c_s * &p_pred * c_s.transpose() + &r;
    let s_inv = invert_innovation(&s, system.sigma_v())?;
    let gain_filt = &p_pred * c_s.transpose() * &s_inv;
    let gain_pred = &a * &gain_filt;
    let mut p_filt = &p_pred - &gain_filt * &c_s * &p_pred;
    p_filt = (&p_filt + p_filt.transpose()) * 0.5;

    Ok(SteadyStateFilter {
        sensor_set: set,
        a,
        c_s,
        p_opt: p_pred.trace(),
        f_opt: p_filt.trace(),
        p_pred,
        p_filt,
        gain_pred,
        gain_filt,
    })
}

fn check_run_inputs(
    filter: &SteadyStateFilter,
    outputs: &[DVector<f64>],
    x_hat0: &DVector<f64>,
) -> Result<()> {
    let n = filter.a.nrows();
    let m = filter.sensor_set.len();
    if x_hat0.len() != n {
        return Err(Error::Dimension(format!(
            "initial estimate has length {}, expected {n}",
            x_hat0.len()
        )));
    }
    if let Some(bad) = outputs.iter().find(|y| y.len() != m) {
        return Err(Error::Dimension(format!(
            "output vector has length {}, expected {m}",
            bad.len()
        )));
    }
    Ok(())
}

/// Run the steady-state prediction recursion over a sequence of outputs
/// restricted to the filter's sensor set. Entry t of the result is the
/// prediction of x(t), which depends only on outputs before t.
pub fn run_prediction(
    filter: &SteadyStateFilter,
    outputs: &[DVector<f64>],
    x_hat0: &DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    check_run_inputs(filter, outputs, x_hat0)?;
    let mut estimates = Vec::with_capacity(outputs.len());
    let mut xh = x_hat0.clone();
    for y in outputs {
        estimates.push(xh.clone());
        let innovation = y - &filter.c_s * &xh;
        xh = &filter.a * &xh + &filter.gain_pred * innovation;
    }
    Ok(estimates)
}

/// Run the steady-state filtering recursion. Entry t of the result estimates
/// x(t) using outputs up to and including t.
pub fn run_filtering(
    filter: &SteadyStateFilter,
    outputs: &[DVector<f64>],
    x_hat0: &DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    check_run_inputs(filter, outputs, x_hat0)?;
    let mut estimates = Vec::with_capacity(outputs.len());
    let mut xp = x_hat0.clone();
    for y in outputs {
        let innovation = y - &filter.c_s * &xp;
        let xf = &xp + &filter.gain_filt * innovation;
        xp = &filter.a * &xf;
        estimates.push(xf);
    }
    Ok(estimates)
}

/// Columns of the filtering gain for a subset of the filter's sensor set, in
/// subset order. This is the gain slice the filtering residue test needs.
pub fn restrict_gain_columns(
    filter: &SteadyStateFilter,
    subset: &[usize],
) -> Result<DMatrix<f64>> {
    let n = filter.a.nrows();
    let mut out = DMatrix::zeros(n, subset.len());
    for (slot, &sensor) in subset.iter().enumerate() {
        let pos = filter
            .sensor_set
            .iter()
            .position(|&s| s == sensor)
            .ok_or_else(|| Error::SensorOutsideSet {
                sensor,
                set: filter.sensor_set.clone(),
            })?;
        out.column_mut(slot).copy_from(&filter.gain_filt.column(pos));
    }
    Ok(out)
}
