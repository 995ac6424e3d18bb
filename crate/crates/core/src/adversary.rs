//! Attack strategies for a static k-adversary and the causal view they act on.
//!
//! The adversary corrupts a fixed set of sensors over the whole horizon. What
//! it is allowed to see at each step depends on the causality mode: in
//! prediction mode it may additionally observe the current clean outputs of
//! every sensor, while in filtering mode it only sees its own sensors'
//! current clean outputs plus the full reported-output history. Neither mode
//! ever exposes noise that has not been realized yet; the simulation loop
//! draws future noise only after the corruption for the current step is
//! committed.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::system::LinearSystem;

/// Which estimation problem the adversary is matched against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CausalityMode {
    /// Corruption at time t may depend on everything realized up to and
    /// including time t outputs.
    Prediction,
    /// Corruption at time t must be independent of all good-sensor noise and
    /// process noise at times >= t.
    Filtering,
}

/// Everything the adversary is shown before emitting its corruption at time t.
///
/// Accessors enforce the causal contract; the view never carries raw noise or
/// anything from the future.
pub struct AdversaryView<'a> {
    pub(crate) t: usize,
    pub(crate) system: &'a LinearSystem,
    pub(crate) history: &'a [DVector<f64>],
    pub(crate) clean_now: &'a DVector<f64>,
    pub(crate) attacked: &'a [usize],
    pub(crate) mode: CausalityMode,
    pub(crate) adversary_seed: u64,
}

impl<'a> AdversaryView<'a> {
    pub fn time(&self) -> usize {
        self.t
    }

    /// The adversary knows the plant model and noise statistics.
    pub fn system(&self) -> &LinearSystem {
        self.system
    }

    pub fn attacked_set(&self) -> &[usize] {
        self.attacked
    }

    pub fn mode(&self) -> CausalityMode {
        self.mode
    }

    /// Seed for strategies that want their own reproducible randomness.
    pub fn adversary_seed(&self) -> u64 {
        self.adversary_seed
    }

    /// Reported outputs y(0..t-1) of all sensors, corruptions included.
    pub fn output_history(&self) -> &[DVector<f64>] {
        self.history
    }

    /// Current clean outputs of the attacked sensors, in attacked-set order.
    /// Available in both causality modes.
    pub fn attacked_clean_now(&self) -> Vec<f64> {
        self.attacked.iter().map(|&j| self.clean_now[j]).collect()
    }

    /// Current clean outputs of every sensor. Prediction mode only; filtering
    /// mode withholds time-t information about good sensors.
    pub fn all_clean_now(&self) -> Option<&DVector<f64>> {
        match self.mode {
            CausalityMode::Prediction => Some(self.clean_now),
            CausalityMode::Filtering => None,
        }
    }
}

pub type CustomAttack = Arc<dyn Fn(&AdversaryView) -> Vec<f64> + Send + Sync>;

/// How the attacked sensors are corrupted.
#[derive(Clone)]
pub enum AttackStrategy {
    /// No corruption; phi = 0 everywhere.
    None,
    /// Attacked outputs read exactly zero.
    ZeroOut,
    /// Constant additive offset on every attacked sensor.
    Bias(f64),
    /// Attacked outputs are replaced with the reported outputs `delay` steps
    /// earlier; zero corruption while t < delay.
    Replay { delay: usize },
    /// phi_j(t) = table[t][j] on the attacked set. The table must cover the
    /// horizon and each row must have one entry per sensor.
    Scripted(Vec<Vec<f64>>),
    /// Arbitrary deterministic function of the view; must return one value
    /// per attacked sensor.
    Custom(CustomAttack),
}

impl fmt::Debug for AttackStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackStrategy::None => write!(f, "None"),
            AttackStrategy::ZeroOut => write!(f, "ZeroOut"),
            AttackStrategy::Bias(b) => write!(f, "Bias({b})"),
            AttackStrategy::Replay { delay } => write!(f, "Replay {{ delay: {delay} }}"),
            AttackStrategy::Scripted(t) => write!(f, "Scripted({} rows)", t.len()),
            AttackStrategy::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl AttackStrategy {
    /// Corruption restricted to the attacked set, one value per attacked
    /// sensor in attacked-set order.
    pub fn corruption(&self, view: &AdversaryView) -> Result<Vec<f64>> {
        let k = view.attacked_set().len();
        let phi = match self {
            AttackStrategy::None => vec![0.0; k],
            AttackStrategy::ZeroOut => zero_out_attack(view),
            AttackStrategy::Bias(b) => bias_attack(view, *b),
            AttackStrategy::Replay { delay } => replay_attack(view, *delay)?,
            AttackStrategy::Scripted(table) => scripted_attack(view, table)?,
            AttackStrategy::Custom(f) => {
                let out = f(view);
                if out.len() != k {
                    return Err(Error::Attack(format!(
                        "custom strategy returned {} values for {} attacked sensors",
                        out.len(),
                        k
                    )));
                }
                out
            }
        };
        debug_assert_eq!(phi.len(), k);
        Ok(phi)
    }
}

/// Cancel the clean output and its noise so the attacked sensor reads 0.
pub fn zero_out_attack(view: &AdversaryView) -> Vec<f64> {
    view.attacked_clean_now().into_iter().map(|c| -c).collect()
}

/// Constant additive offset.
pub fn bias_attack(view: &AdversaryView, bias: f64) -> Vec<f64> {
    vec![bias; view.attacked_set().len()]
}

/// Replace attacked outputs with the reported outputs `delay` steps earlier.
pub fn replay_attack(view: &AdversaryView, delay: usize) -> Result<Vec<f64>> {
    if delay < 1 {
        return Err(Error::Attack("replay delay must be at least 1".into()));
    }
    let clean = view.attacked_clean_now();
    let t = view.time();
    if t < delay {
        return Ok(vec![0.0; clean.len()]);
    }
    let past = &view.output_history()[t - delay];
    Ok(view
        .attacked_set()
        .iter()
        .zip(clean)
        .map(|(&j, c)| past[j] - c)
        .collect())
}

/// Look up phi from a per-timestep table.
pub fn scripted_attack(view: &AdversaryView, table: &[Vec<f64>]) -> Result<Vec<f64>> {
    let t = view.time();
    let row = table.get(t).ok_or_else(|| {
        Error::Attack(format!(
            "scripted table covers {} steps but t = {t} was requested",
            table.len()
        ))
    })?;
    let p = view.system().sensor_count();
    if row.len() != p {
        return Err(Error::Attack(format!(
            "scripted table row {t} has {} entries, expected one per sensor ({p})",
            row.len()
        )));
    }
    Ok(view.attacked_set().iter().map(|&j| row[j]).collect())
}

/// A static k-adversary: a fixed attacked set, a strategy, and the causal
/// knowledge regime it operates under.
#[derive(Debug, Clone)]
pub struct AttackPlan {
    attacked_set: Vec<usize>,
    strategy: AttackStrategy,
    causality_mode: CausalityMode,
}

impl AttackPlan {
    pub fn new(mut attacked_set: Vec<usize>, strategy: AttackStrategy, mode: CausalityMode) -> Self {
        attacked_set.sort_unstable();
        Self {
            attacked_set,
            strategy,
            causality_mode: mode,
        }
    }

    /// The benign plan: nothing attacked.
    pub fn none() -> Self {
        Self::new(Vec::new(), AttackStrategy::None, CausalityMode::Prediction)
    }

    pub fn attacked_set(&self) -> &[usize] {
        &self.attacked_set
    }

    pub fn strategy(&self) -> &AttackStrategy {
        &self.strategy
    }

    pub fn causality_mode(&self) -> CausalityMode {
        self.causality_mode
    }

    /// Check the plan against a plant with `p` sensors.
    pub fn validate(&self, p: usize) -> Result<()> {
        if self.attacked_set.len() > p {
            return Err(Error::Attack(format!(
                "attacked set has {} sensors but the plant only has {p}",
                self.attacked_set.len()
            )));
        }
        for pair in self.attacked_set.windows(2) {
            if pair[0] == pair[1] {
                return Err(Error::Attack(format!(
                    "attacked set contains sensor {} twice",
                    pair[0]
                )));
            }
        }
        if let Some(&last) = self.attacked_set.last() {
            if last >= p {
                return Err(Error::Attack(format!(
                    "attacked sensor {last} out of range for {p} sensors"
                )));
            }
        }
        if let AttackStrategy::Replay { delay } = self.strategy {
            if delay < 1 {
                return Err(Error::Attack("replay delay must be at least 1".into()));
            }
        }
        Ok(())
    }
}
