//! Observability analysis: observability matrices and indices, the sparse
//! observability index, attack-tolerance bounds, Hamming-distance witnesses,
//! and the noiseless brute-force secure decoder.
//!
//! The coding-theoretic view treats one sensor's length-n noiseless output
//! sequence as a single symbol; a system whose every theta-subset of sensors
//! is observable produces observation vectors with minimum symbol Hamming
//! distance p - theta + 1, which is what makes correction of k-sparse sensor
//! corruptions possible exactly when theta <= p - 2k.

use std::collections::BTreeMap;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{left_pseudo_inverse, numerical_rank, nullspace, vstack};
use crate::system::LinearSystem;

/// Per-symbol tolerance when deciding that two noiseless observation symbols
/// coincide.
const SYMBOL_MATCH_TOL: f64 = 1e-9;

/// State-merging tolerance and relative residual threshold for the noiseless
/// decoder. The underlying theory is exact-arithmetic; floating point forces
/// explicit tolerances.
const DECODE_TOL: f64 = 1e-6;

/// Summary of how observable the plant stays under sensor removal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservabilityAnalysis {
    /// Smallest subset size such that every subset of that size is observable.
    pub theta: usize,
    /// Sensor count of the analyzed plant.
    pub p: usize,
    /// Observability verdict for every subset examined during the search.
    pub per_subset_observable: BTreeMap<Vec<usize>, bool>,
    /// floor((p - theta) / 2): corruptions correctable by exact decoding.
    pub max_correctable: usize,
    /// p - theta: corruptions that remain detectable.
    pub max_detectable: usize,
    /// p - theta + 1: minimum symbol Hamming distance between observation
    /// vectors of distinct initial states.
    pub min_hamming_distance: usize,
}

impl ObservabilityAnalysis {
    /// True iff exact estimation against k corrupted sensors is possible,
    /// i.e. theta <= p - 2k.
    pub fn tolerates(&self, k: usize) -> bool {
        self.theta as isize <= self.p as isize - 2 * k as isize
    }
}

/// True iff theta <= p - 2k for the analyzed system.
pub fn check_sparse_condition(analysis: &ObservabilityAnalysis, k: usize) -> bool {
    analysis.tolerates(k)
}

/// Everything the block residue machinery needs about one sensor subset.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetObservabilityData {
    /// Sensor indices, ascending.
    pub subset: Vec<usize>,
    /// Stacked observability matrix with `mu` block rows; full column rank.
    pub observability_matrix: DMatrix<f64>,
    /// Observability index: the minimal number of block rows.
    pub mu: usize,
    /// Left pseudo-inverse of the observability matrix.
    pub pinv: DMatrix<f64>,
    /// Block lower-triangular map from stacked process noise into the block
    /// residue; first block row is zero.
    pub noise_coupling: DMatrix<f64>,
    /// Covariance of the stacked noise entering the block residue:
    /// sigma_w^2 J J^T + sigma_v^2 I.
    pub residue_covariance: DMatrix<f64>,
    pub sigma_w: f64,
    pub sigma_v: f64,
}

impl SubsetObservabilityData {
    pub fn size(&self) -> usize {
        self.subset.len()
    }

    /// tr(Opinv M Opinv^T): the noise floor of the block residue statistic.
    pub fn residue_noise_trace(&self) -> f64 {
        (&self.pinv * &self.residue_covariance * self.pinv.transpose()).trace()
    }
}

/// Stack C, CA, ..., CA^{mu-1} for increasing mu and return the first stack
/// of full column rank together with its mu. If no stack up to `max_rows`
/// block rows reaches rank n, returns the tallest stack and `None`.
pub fn build_observability_matrix(
    a: &DMatrix<f64>,
    c_sub: &DMatrix<f64>,
    max_rows: usize,
) -> Result<(DMatrix<f64>, Option<usize>)> {
    let n = a.nrows();
    if n == 0 || n != a.ncols() {
        return Err(Error::Dimension(format!(
            "A must be square and non-empty, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if c_sub.nrows() == 0 || c_sub.ncols() != n {
        return Err(Error::Dimension(format!(
            "output map must have {n} columns and at least one row, got {}x{}",
            c_sub.nrows(),
            c_sub.ncols()
        )));
    }
    if max_rows == 0 {
        return Err(Error::Dimension("max_rows must be at least 1".into()));
    }

    let mut blocks = vec![c_sub.clone()];
    let mut stack = c_sub.clone();
    for mu in 1..=max_rows {
        if mu > 1 {
            let next = blocks.last().unwrap() * a;
            blocks.push(next);
            stack = vstack(&blocks);
        }
        if numerical_rank(&stack) == n {
            return Ok((stack, Some(mu)));
        }
    }
    Ok((stack, None))
}

fn subset_observable(system: &LinearSystem, subset: &[usize]) -> Result<bool> {
    let c_sub = system.c_rows(subset);
    let (_, mu) = build_observability_matrix(system.a(), &c_sub, system.state_dim())?;
    Ok(mu.is_some())
}

/// Find the sparse observability index theta: the smallest subset size such
/// that every subset of that size is observable. Subset sizes are scanned in
/// ascending order, bailing out of a size at its first failing subset.
///
/// Errors if the full sensor set itself is not observable.
pub fn sparse_observability_index(system: &LinearSystem) -> Result<ObservabilityAnalysis> {
    let p = system.sensor_count();
    let all: Vec<usize> = (0..p).collect();
    if !subset_observable(system, &all)? {
        return Err(Error::Unobservable);
    }

    let mut per_subset = BTreeMap::new();
    let mut theta = p;
    'sizes: for size in 1..=p {
        for subset in (0..p).combinations(size) {
            let ok = subset_observable(system, &subset)?;
            per_subset.insert(subset, ok);
            if !ok {
                continue 'sizes;
            }
        }
        theta = size;
        break;
    }

    Ok(ObservabilityAnalysis {
        theta,
        p,
        per_subset_observable: per_subset,
        max_correctable: (p - theta) / 2,
        max_detectable: p - theta,
        min_hamming_distance: p - theta + 1,
    })
}

/// The noiseless length-n output sequence of one sensor, viewed as a symbol.
fn sensor_symbol(system: &LinearSystem, sensor: usize, x0: &DVector<f64>) -> DVector<f64> {
    let n = system.state_dim();
    let row = system.c().row(sensor);
    let mut sym = DVector::zeros(n);
    let mut x = x0.clone();
    for t in 0..n {
        sym[t] = (row * &x)[(0, 0)];
        if t + 1 < n {
            x = system.a() * x;
        }
    }
    sym
}

/// Search for a pair of initial states whose noiseless observation vectors
/// agree on as many symbols as possible.
///
/// Every (theta-1)-subset with a rank-deficient observability stack
/// contributes nullspace directions; each direction x is paired with the
/// zero state and the symbols that differ are counted. Returns the minimum
/// symbol distance found and the witness pair. For theta = 1 there is no
/// rank-deficient subset: any two distinct states already differ on every
/// sensor, so the distance is p and no witness pair is reported.
pub fn hamming_witness(
    system: &LinearSystem,
) -> Result<(usize, Option<(DVector<f64>, DVector<f64>)>)> {
    let analysis = sparse_observability_index(system)?;
    let p = system.sensor_count();
    let n = system.state_dim();
    if analysis.theta == 1 {
        return Ok((p, None));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_D157);
    let mut best_distance = p;
    let mut witness = None;
    for subset in (0..p).combinations(analysis.theta - 1) {
        let c_sub = system.c_rows(&subset);
        let blocks: Vec<DMatrix<f64>> = (0..n)
            .scan(c_sub.clone(), |acc, t| {
                if t > 0 {
                    *acc = &*acc * system.a();
                }
                Some(acc.clone())
            })
            .collect();
        let stack = vstack(&blocks);
        if numerical_rank(&stack) == n {
            continue;
        }
        let basis = nullspace(&stack);
        if basis.is_empty() {
            continue;
        }
        let candidates: Vec<DVector<f64>> = if basis.len() == 1 {
            vec![basis[0].clone()]
        } else {
            // Higher-dimensional nullspace: sample a handful of directions.
            (0..5)
                .map(|_| {
                    let mut v = DVector::zeros(n);
                    for b in &basis {
                        v += b * rng.sample::<f64, _>(StandardNormal);
                    }
                    let norm = v.norm();
                    if norm > 0.0 {
                        v /= norm;
                    }
                    v
                })
                .collect()
        };
        for x in candidates {
            if x.norm() == 0.0 {
                continue;
            }
            let distance = (0..p)
                .filter(|&d| sensor_symbol(system, d, &x).norm() >= SYMBOL_MATCH_TOL)
                .count();
            if distance < best_distance || witness.is_none() {
                best_distance = distance;
                witness = Some((x, DVector::zeros(n)));
            }
        }
    }
    Ok((best_distance, witness))
}

/// Verdict of the noiseless decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeStatus {
    Unique,
    Ambiguous,
    Infeasible,
}

impl std::fmt::Display for DecodeStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DecodeStatus::Unique => write!(f, "unique"),
            DecodeStatus::Ambiguous => write!(f, "ambiguous"),
            DecodeStatus::Infeasible => write!(f, "infeasible"),
        }
    }
}

/// Output of the noiseless decoder: the distinct initial states consistent
/// with some (p-k)-subset of symbols, plus any subsets that had to be skipped
/// because their stacks were rank-deficient.
#[derive(Debug, Clone)]
pub struct DecodeOutcome {
    pub estimates: Vec<DVector<f64>>,
    pub status: DecodeStatus,
    pub unobservable_subsets: Vec<Vec<usize>>,
}

/// Brute-force exact decoding of the initial state from noiseless per-sensor
/// symbols, tolerating up to k corrupted symbols.
///
/// Every subset of p - k symbols is solved in the least-squares sense; a
/// solution is accepted when its relative residual is below 1e-6 and accepted
/// states within 1e-6 of each other are merged. Under theta <= p - 2k and a
/// valid k-sparse corruption the result is unique and exact.
pub fn noiseless_secure_decode(
    system: &LinearSystem,
    symbols: &[DVector<f64>],
    k: usize,
) -> Result<DecodeOutcome> {
    let p = system.sensor_count();
    let n = system.state_dim();
    if symbols.len() != p {
        return Err(Error::Dimension(format!(
            "expected one symbol per sensor ({p}), got {}",
            symbols.len()
        )));
    }
    for (d, sym) in symbols.iter().enumerate() {
        if sym.len() != n {
            return Err(Error::Dimension(format!(
                "symbol for sensor {d} has length {}, expected {n}",
                sym.len()
            )));
        }
    }
    if k >= p {
        return Err(Error::Dimension(format!(
            "k = {k} leaves no symbols to decode from (p = {p})"
        )));
    }

    // Per-sensor n-row stacks [c_d; c_d A; ...; c_d A^{n-1}].
    let per_sensor: Vec<DMatrix<f64>> = (0..p)
        .map(|d| {
            let c_d = system.c_rows(&[d]);
            let blocks: Vec<DMatrix<f64>> = (0..n)
                .scan(c_d.clone(), |acc, t| {
                    if t > 0 {
                        *acc = &*acc * system.a();
                    }
                    Some(acc.clone())
                })
                .collect();
            vstack(&blocks)
        })
        .collect();

    let mut estimates: Vec<DVector<f64>> = Vec::new();
    let mut unobservable = Vec::new();
    for subset in (0..p).combinations(p - k) {
        let stack = vstack(
            &subset
                .iter()
                .map(|&d| per_sensor[d].clone())
                .collect::<Vec<_>>(),
        );
        let mut rhs = DVector::zeros(subset.len() * n);
        for (slot, &d) in subset.iter().enumerate() {
            rhs.rows_mut(slot * n, n).copy_from(&symbols[d]);
        }
        if numerical_rank(&stack) < n {
            unobservable.push(subset);
            continue;
        }
        let svd = stack.clone().svd(true, true);
        let x = match svd.solve(&rhs, 1e-12) {
            Ok(x) => x,
            Err(_) => continue,
        };
        let residual = (&stack * &x - &rhs).norm();
        if residual < DECODE_TOL * (1.0 + rhs.norm()) {
            let duplicate = estimates.iter().any(|e| (e - &x).norm() <= DECODE_TOL);
            if !duplicate {
                estimates.push(x);
            }
        }
    }

    let status = match estimates.len() {
        0 => DecodeStatus::Infeasible,
        1 => DecodeStatus::Unique,
        _ => DecodeStatus::Ambiguous,
    };
    Ok(DecodeOutcome {
        estimates,
        status,
        unobservable_subsets: unobservable,
    })
}

/// Build the block residue data for one observable subset: the minimal-row
/// observability matrix, its pseudo-inverse, the process-noise coupling J
/// (first block row zero; block (r, q) is C A^{r-1-q} for q < r) and the
/// stacked-noise covariance M.
pub fn build_subset_data(system: &LinearSystem, subset: &[usize]) -> Result<SubsetObservabilityData> {
    let n = system.state_dim();
    let mut subset = subset.to_vec();
    subset.sort_unstable();
    let c_i = system.c_rows(&subset);
    let theta = subset.len();

    let (obs, mu) = build_observability_matrix(system.a(), &c_i, n)?;
    let mu = mu.ok_or_else(|| Error::UnobservableSubset(subset.clone()))?;
    let pinv =
        left_pseudo_inverse(&obs).ok_or_else(|| Error::UnobservableSubset(subset.clone()))?;

    // c_i A^e for e = 0..mu-2.
    let mut powers = Vec::with_capacity(mu.saturating_sub(1));
    if mu > 1 {
        powers.push(c_i.clone());
        for _ in 1..mu - 1 {
            let next = powers.last().unwrap() * system.a();
            powers.push(next);
        }
    }
    let mut coupling = DMatrix::zeros(theta * mu, n * mu.saturating_sub(1));
    for r in 1..mu {
        for q in 0..r {
            coupling
                .view_mut((r * theta, q * n), (theta, n))
                .copy_from(&powers[r - 1 - q]);
        }
    }

    let sw2 = system.sigma_w() * system.sigma_w();
    let sv2 = system.sigma_v() * system.sigma_v();
    let residue_covariance =
        &coupling * coupling.transpose() * sw2 + DMatrix::identity(theta * mu, theta * mu) * sv2;

    Ok(SubsetObservabilityData {
        subset,
        observability_matrix: obs,
        mu,
        pinv,
        noise_coupling: coupling,
        residue_covariance,
        sigma_w: system.sigma_w(),
        sigma_v: system.sigma_v(),
    })
}
