//! Linear plant model and trajectory simulation with reproducible noise streams.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::adversary::{AdversaryView, AttackPlan};
use crate::error::{Error, Result};

/// Simulation aborts once any state coordinate passes this magnitude.
pub const STATE_OVERFLOW_LIMIT: f64 = 1e15;

// Per-trace RNG stream channels. Every noise source draws from its own
// keystream so that adding sensors or reordering work never perturbs the
// other sources.
const STREAM_PROCESS: u64 = 0;
const STREAM_ADVERSARY: u64 = 1;
const STREAM_AUX: u64 = 2;
const STREAM_SENSOR_BASE: u64 = 3;

fn stream_rng(seed: u64, channel: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(channel);
    rng
}

/// Auxiliary per-trace stream (e.g. random initial states in decode mode).
pub fn aux_rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, STREAM_AUX)
}

/// Derive an independent sub-seed, e.g. one per Monte Carlo trial.
/// splitmix64 over the master seed and the index.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Discrete-time linear plant
/// `x(t+1) = A x(t) + w(t)`, `y(t) = C x(t) + v(t)`,
/// with isotropic Gaussian process noise (std `sigma_w`) and sensor noise
/// (std `sigma_v`).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    c: DMatrix<f64>,
    sigma_w: f64,
    sigma_v: f64,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, c: DMatrix<f64>, sigma_w: f64, sigma_v: f64) -> Result<Self> {
        if a.nrows() == 0 || a.nrows() != a.ncols() {
            return Err(Error::Dimension(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if c.nrows() == 0 || c.ncols() != a.nrows() {
            return Err(Error::Dimension(format!(
                "C must have at least one row and {} columns, got {}x{}",
                a.nrows(),
                c.nrows(),
                c.ncols()
            )));
        }
        if !(sigma_w >= 0.0) || !(sigma_v >= 0.0) {
            return Err(Error::Dimension(
                "noise standard deviations must be nonnegative".into(),
            ));
        }
        Ok(Self {
            a,
            c,
            sigma_w,
            sigma_v,
        })
    }

    /// State dimension n.
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Sensor count p.
    pub fn sensor_count(&self) -> usize {
        self.c.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn sigma_w(&self) -> f64 {
        self.sigma_w
    }

    pub fn sigma_v(&self) -> f64 {
        self.sigma_v
    }

    /// Rows of C for the given sensor indices, in the order given.
    pub fn c_rows(&self, sensors: &[usize]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(sensors.len(), self.state_dim());
        for (r, &s) in sensors.iter().enumerate() {
            out.row_mut(r).copy_from(&self.c.row(s));
        }
        out
    }
}

/// One simulated trajectory: true states, clean and reported outputs, the
/// noise realizations that produced them, and the corruption applied.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub horizon: usize,
    pub seed: u64,
    /// x(t) for t = 0..horizon-1.
    pub states: Vec<DVector<f64>>,
    /// C x(t) + v(t).
    pub clean_outputs: Vec<DVector<f64>>,
    /// y(t) = C x(t) + v(t) + phi(t); what the estimator sees.
    pub attacked_outputs: Vec<DVector<f64>>,
    /// w(t) for t = 0..horizon-2 (the draw that produced states[t+1]).
    pub process_noise: Vec<DVector<f64>>,
    /// v(t) for t = 0..horizon-1.
    pub sensor_noise: Vec<DVector<f64>>,
    /// phi(t), zero outside the attacked set.
    pub attack_vectors: Vec<DVector<f64>>,
}

impl SimulationTrace {
    /// Reported outputs restricted to the given sensors.
    pub fn outputs_for(&self, sensors: &[usize]) -> Vec<DVector<f64>> {
        self.attacked_outputs
            .iter()
            .map(|y| crate::linalg::select_coords(y, sensors))
            .collect()
    }
}

/// Simulate `horizon` steps of the plant under the given attack plan.
///
/// The loop is strictly sequential in t: the adversary's corruption for step
/// t is committed before the process noise w(t) driving the next state is
/// drawn, so no strategy can ever observe unrealized noise.
pub fn simulate(
    system: &LinearSystem,
    horizon: usize,
    initial_state: &DVector<f64>,
    plan: &AttackPlan,
    seed: u64,
) -> Result<SimulationTrace> {
    if horizon == 0 {
        return Err(Error::InvalidHorizon);
    }
    let n = system.state_dim();
    let p = system.sensor_count();
    if initial_state.len() != n {
        return Err(Error::Dimension(format!(
            "initial state has length {}, expected {n}",
            initial_state.len()
        )));
    }
    plan.validate(p)?;

    let mut process_rng = stream_rng(seed, STREAM_PROCESS);
    let mut sensor_rngs: Vec<ChaCha8Rng> = (0..p)
        .map(|j| stream_rng(seed, STREAM_SENSOR_BASE + j as u64))
        .collect();
    let adversary_seed = stream_rng(seed, STREAM_ADVERSARY).gen::<u64>();

    let mut states = Vec::with_capacity(horizon);
    let mut clean_outputs = Vec::with_capacity(horizon);
    let mut attacked_outputs: Vec<DVector<f64>> = Vec::with_capacity(horizon);
    let mut process_noise = Vec::with_capacity(horizon.saturating_sub(1));
    let mut sensor_noise = Vec::with_capacity(horizon);
    let mut attack_vectors = Vec::with_capacity(horizon);

    let mut x = initial_state.clone();
    for t in 0..horizon {
        states.push(x.clone());
        let v = DVector::from_fn(p, |j, _| {
            system.sigma_v * sensor_rngs[j].sample::<f64, _>(StandardNormal)
        });
        let clean = system.c() * &x + &v;

        let view = AdversaryView {
            t,
            system,
            history: &attacked_outputs,
            clean_now: &clean,
            attacked: plan.attacked_set(),
            mode: plan.causality_mode(),
            adversary_seed,
        };
        let phi_on_set = plan.strategy().corruption(&view)?;
        let mut phi = DVector::zeros(p);
        for (slot, &j) in plan.attacked_set().iter().enumerate() {
            phi[j] = phi_on_set[slot];
        }

        attacked_outputs.push(&clean + &phi);
        clean_outputs.push(clean);
        attack_vectors.push(phi);
        sensor_noise.push(v);

        if t + 1 < horizon {
            let w = DVector::from_fn(n, |_, _| {
                system.sigma_w * process_rng.sample::<f64, _>(StandardNormal)
            });
            x = system.a() * &x + &w;
            process_noise.push(w);
            let peak = x.amax();
            if !peak.is_finite() || peak > STATE_OVERFLOW_LIMIT {
                return Err(Error::StateOverflow {
                    t: t + 1,
                    limit: STATE_OVERFLOW_LIMIT,
                });
            }
        }
    }

    Ok(SimulationTrace {
        horizon,
        seed,
        states,
        clean_outputs,
        attacked_outputs,
        process_noise,
        sensor_noise,
        attack_vectors,
    })
}
