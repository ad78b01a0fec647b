use crate::autodiff::{Tape, Var};

use super::{
    check_dims, plain_binary, taped_binary, taped_floored_log, Interval, Outcome, Prior, ResourceCost,
    ResourceKind, SensorError, SensorModel,
};

/// `p(0 | ω, τ) = (1 + e^{-τ/T2} cos(ωτ)) / 2`; `t2 = None` means no dephasing.
pub fn ramsey_p0(omega: f64, tau: f64, t2: Option<f64>) -> Result<f64, SensorError> {
    if tau < 0.0 {
        return Err(SensorError::NegativeTime(tau));
    }
    Ok((1.0 + decay(tau, t2) * (omega * tau).cos()) * 0.5)
}

pub(super) fn decay(tau: f64, t2: Option<f64>) -> f64 {
    match t2 {
        Some(t2) => (-(tau / t2)).exp(),
        None => 1.0,
    }
}

pub(super) fn taped_decay(tape: &mut Tape, tau: Var, t2: Option<f64>) -> Result<Var, SensorError> {
    Ok(match t2 {
        Some(t2) => {
            let t2 = tape.scalar(t2)?;
            let ratio = tape.div(tau, t2)?;
            let neg = tape.neg(ratio)?;
            tape.exp(neg)?
        }
        None => tape.scalar(1.0)?,
    })
}

/// `(1 + decay · cos(ω τ)) · 0.5` on the tape, same operation order as
/// [`ramsey_p0`].
pub(super) fn taped_fringe(tape: &mut Tape, omega: Var, tau: Var, decay: Var) -> Result<Var, SensorError> {
    let phase = tape.mul(omega, tau)?;
    let c = tape.cos(phase)?;
    let damped = tape.mul(decay, c)?;
    let one = tape.scalar(1.0)?;
    let shifted = tape.add(one, damped)?;
    let half = tape.scalar(0.5)?;
    Ok(tape.mul(shifted, half)?)
}

pub(super) fn taped_tau(tape: &mut Tape, control: Var) -> Result<Var, SensorError> {
    let tau = tape.index(control, 0)?;
    let t = tape.item(tau);
    if t < 0.0 {
        return Err(SensorError::NegativeTime(t));
    }
    Ok(tau)
}

/// Single-qubit Ramsey fringe with unknown precession frequency ω (rad/µs)
/// and controllable free-evolution time τ (µs).
#[derive(Clone, Debug, PartialEq)]
pub struct Ramsey {
    t2: Option<f64>,
    overhead: f64,
    controls: [Interval; 1],
    prior: Prior,
}

impl Ramsey {
    pub fn new(t2: Option<f64>, overhead: f64, tau: Interval, omega: Interval) -> Result<Self, SensorError> {
        if t2.is_some_and(|t| !(t > 0.0)) {
            return Err(SensorError::InvalidConstant("t2 must be positive"));
        }
        if !(overhead >= 0.0 && overhead.is_finite()) {
            return Err(SensorError::InvalidConstant("overhead must be non-negative"));
        }
        if !tau.is_proper() || tau.low < 0.0 {
            return Err(SensorError::InvalidConstant("tau bounds must be proper and non-negative"));
        }
        Ok(Ramsey {
            t2,
            overhead,
            controls: [tau],
            prior: Prior::uniform_box(vec![omega])?,
        })
    }

    pub fn t2(&self) -> Option<f64> {
        self.t2
    }
}

impl Default for Ramsey {
    fn default() -> Self {
        Ramsey::new(None, 0.0, Interval::new(0.1, 100.0), Interval::new(0.0, 1.0)).expect("valid defaults")
    }
}

impl SensorModel for Ramsey {
    fn name(&self) -> &'static str {
        "ramsey"
    }

    fn prior(&self) -> &Prior {
        &self.prior
    }

    fn control_bounds(&self) -> &[Interval] {
        &self.controls
    }

    fn n_outcomes(&self) -> usize {
        2
    }

    fn resource_kind(&self) -> ResourceKind {
        ResourceKind::Time
    }

    fn probability(&self, theta: &[f64], control: &[f64], outcome: Outcome) -> Result<f64, SensorError> {
        check_dims(self, theta.len(), control.len())?;
        plain_binary(ramsey_p0(theta[0], control[0], self.t2)?, outcome)
    }

    fn taped_log_likelihood(
        &self,
        tape: &mut Tape,
        theta: &[Var],
        control: Var,
        outcome: Outcome,
    ) -> Result<Var, SensorError> {
        check_dims(self, theta.len(), control.shape().len())?;
        let tau = taped_tau(tape, control)?;
        let d = taped_decay(tape, tau, self.t2)?;
        let p0 = taped_fringe(tape, theta[0], tau, d)?;
        let p = taped_binary(tape, p0, outcome)?;
        taped_floored_log(tape, p)
    }

    fn resource_cost(&self, control: &[f64]) -> ResourceCost {
        ResourceCost(control[0] + self.overhead)
    }

    fn min_step_cost(&self) -> f64 {
        self.controls[0].low + self.overhead
    }
}
