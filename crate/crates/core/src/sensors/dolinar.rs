use crate::autodiff::{Tape, Var};

use super::{
    check_dims, plain_binary, taped_binary, taped_floored_log, Interval, Outcome, Prior, ResourceCost,
    ResourceKind, SensorError, SensorModel,
};

/// `exp(−|s·α_seg + β|²)` for real amplitudes.
pub fn dolinar_no_click_probability(sign: f64, segment_amplitude: f64, beta: f64) -> f64 {
    let field = sign * segment_amplitude + beta;
    (-(field * field)).exp()
}

/// Segmented receiver for the binary coherent-state alphabet `{|α⟩, |−α⟩}`.
///
/// The signal is cut into `segments` slices of amplitude `s·α/√M`; each
/// slice is displaced by the control β and hits an on/off photodetector.
/// Outcome 0 is no-click, 1 is click. Each slice costs one unit of the
/// count resource.
#[derive(Clone, Debug, PartialEq)]
pub struct Dolinar {
    mean_photons: f64,
    segments: usize,
    segment_amplitude: f64,
    controls: [Interval; 1],
    prior: Prior,
}

impl Dolinar {
    pub fn new(mean_photons: f64, segments: usize, beta: Interval) -> Result<Self, SensorError> {
        if !(mean_photons > 0.0 && mean_photons.is_finite()) {
            return Err(SensorError::InvalidConstant("mean photon number must be positive"));
        }
        if segments == 0 {
            return Err(SensorError::InvalidConstant("segments must be at least 1"));
        }
        if !beta.is_proper() {
            return Err(SensorError::InvalidConstant("beta bounds must be proper"));
        }
        Ok(Dolinar {
            mean_photons,
            segments,
            segment_amplitude: (mean_photons / segments as f64).sqrt(),
            controls: [beta],
            prior: Prior::discrete(vec![vec![1.0], vec![-1.0]])?,
        })
    }

    /// Total |α|².
    pub fn mean_photons(&self) -> f64 {
        self.mean_photons
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn segment_amplitude(&self) -> f64 {
        self.segment_amplitude
    }

    /// Minimum error probability for the two states, `(1 − √(1 − e^{−4|α|²}))/2`.
    pub fn helstrom_bound(&self) -> f64 {
        (1.0 - (1.0 - (-4.0 * self.mean_photons).exp()).sqrt()) / 2.0
    }

    /// Error of the fixed-nulling receiver, `e^{−4|α|²}/2`.
    pub fn kennedy_error(&self) -> f64 {
        (-4.0 * self.mean_photons).exp() / 2.0
    }
}

impl Default for Dolinar {
    fn default() -> Self {
        Dolinar::new(0.2, 8, Interval::new(-2.0, 2.0)).expect("valid defaults")
    }
}

impl SensorModel for Dolinar {
    fn name(&self) -> &'static str {
        "dolinar"
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
        ResourceKind::Count
    }

    fn probability(&self, theta: &[f64], control: &[f64], outcome: Outcome) -> Result<f64, SensorError> {
        check_dims(self, theta.len(), control.len())?;
        let p0 = dolinar_no_click_probability(theta[0], self.segment_amplitude, control[0]);
        plain_binary(p0, outcome)
    }

    fn taped_log_likelihood(
        &self,
        tape: &mut Tape,
        theta: &[Var],
        control: Var,
        outcome: Outcome,
    ) -> Result<Var, SensorError> {
        check_dims(self, theta.len(), control.shape().len())?;
        let beta = tape.index(control, 0)?;
        let amp = tape.scalar(self.segment_amplitude)?;
        let signal = tape.mul(theta[0], amp)?;
        let field = tape.add(signal, beta)?;
        let intensity = tape.square(field)?;
        let neg = tape.neg(intensity)?;
        let p0 = tape.exp(neg)?;
        let p = taped_binary(tape, p0, outcome)?;
        taped_floored_log(tape, p)
    }

    fn resource_cost(&self, _control: &[f64]) -> ResourceCost {
        ResourceCost(1.0)
    }

    fn min_step_cost(&self) -> f64 {
        1.0
    }
}
