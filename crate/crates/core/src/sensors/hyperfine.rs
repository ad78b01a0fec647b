use crate::autodiff::{Tape, Var};

use super::ramsey::{decay, taped_decay, taped_fringe, taped_tau};
use super::{
    check_dims, plain_binary, taped_binary, taped_floored_log, Interval, Outcome, Prior, ResourceCost,
    ResourceKind, SensorError, SensorModel,
};

/// Ramsey fringe of an electron spin whose precession frequency is split by
/// ±A∥/2 depending on the projection of a neighbouring nuclear spin. The
/// nuclear spin is an unpolarized mixture, so the two fringes are averaged:
///
/// `p(0) = ½·[(1 + D cos((ω0 + A∥/2)τ))/2 + (1 + D cos((ω0 − A∥/2)τ))/2]`
/// with `D = e^{-τ/T2}`.
pub fn hyperfine_p0(coupling: f64, tau: f64, omega0: f64, t2: Option<f64>) -> Result<f64, SensorError> {
    if tau < 0.0 {
        return Err(SensorError::NegativeTime(tau));
    }
    let d = decay(tau, t2);
    let half = coupling * 0.5;
    let up = (1.0 + d * ((omega0 + half) * tau).cos()) * 0.5;
    let down = (1.0 + d * ((omega0 - half) * tau).cos()) * 0.5;
    Ok((up + down) * 0.5)
}

/// Parallel hyperfine coupling A∥ (rad/µs) probed by Ramsey sequences of
/// controllable length τ (µs).
#[derive(Clone, Debug, PartialEq)]
pub struct Hyperfine {
    omega0: f64,
    t2: Option<f64>,
    overhead: f64,
    controls: [Interval; 1],
    prior: Prior,
}

impl Hyperfine {
    pub fn new(
        omega0: f64,
        t2: Option<f64>,
        overhead: f64,
        tau: Interval,
        coupling: Interval,
    ) -> Result<Self, SensorError> {
        if !omega0.is_finite() {
            return Err(SensorError::InvalidConstant("omega0 must be finite"));
        }
        if t2.is_some_and(|t| !(t > 0.0)) {
            return Err(SensorError::InvalidConstant("t2 must be positive"));
        }
        if !(overhead >= 0.0 && overhead.is_finite()) {
            return Err(SensorError::InvalidConstant("overhead must be non-negative"));
        }
        if !tau.is_proper() || tau.low < 0.0 {
            return Err(SensorError::InvalidConstant("tau bounds must be proper and non-negative"));
        }
        Ok(Hyperfine {
            omega0,
            t2,
            overhead,
            controls: [tau],
            prior: Prior::uniform_box(vec![coupling])?,
        })
    }

    pub fn omega0(&self) -> f64 {
        self.omega0
    }
}

impl Default for Hyperfine {
    fn default() -> Self {
        Hyperfine::new(0.5, Some(100.0), 0.0, Interval::new(0.1, 100.0), Interval::new(0.0, 0.1))
            .expect("valid defaults")
    }
}

impl SensorModel for Hyperfine {
    fn name(&self) -> &'static str {
        "hyperfine"
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
        plain_binary(hyperfine_p0(theta[0], control[0], self.omega0, self.t2)?, outcome)
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
        let half = tape.scalar(0.5)?;
        let split = tape.mul(theta[0], half)?;
        let omega0 = tape.scalar(self.omega0)?;
        let w_up = tape.add(omega0, split)?;
        let w_down = tape.sub(omega0, split)?;
        let up = taped_fringe(tape, w_up, tau, d)?;
        let down = taped_fringe(tape, w_down, tau, d)?;
        let both = tape.add(up, down)?;
        let p0 = tape.mul(both, half)?;
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

#[cfg(test)]
mod tests {
    use super::super::ramsey_p0;
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn zero_coupling_is_bit_identical_to_ramsey() {
        for &tau in &[0.1, 1.0, 7.3, 55.0, 100.0] {
            for t2 in [None, Some(100.0), Some(3.0)] {
                assert_eq!(
                    hyperfine_p0(0.0, tau, 0.5, t2).unwrap(),
                    ramsey_p0(0.5, tau, t2).unwrap()
                );
            }
        }
    }

    #[test]
    fn no_evolution_gives_certain_zero() {
        assert_eq!(hyperfine_p0(0.07, 0.0, 0.5, Some(100.0)).unwrap(), 1.0);
    }

    #[test]
    fn both_fringes_at_minus_one() {
        // ω0 = 0 and A∥τ = 2π put both cosines at cos(±π) = −1.
        let tau = 40.0;
        let coupling = 2.0 * PI / tau;
        let t2 = 100.0;
        let p = hyperfine_p0(coupling, tau, 0.0, Some(t2)).unwrap();
        assert!((p - (1.0 - (-tau / t2).exp()) / 2.0).abs() < 1e-14);
    }
}
