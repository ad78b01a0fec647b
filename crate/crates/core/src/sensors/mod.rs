//! Sensor models: the likelihood of each measurement outcome, a sampler for
//! simulated outcomes, the resource each measurement consumes, and the
//! prior over the unknown parameters.

mod dolinar;
mod hyperfine;
mod ramsey;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Var};

pub use dolinar::{dolinar_no_click_probability, Dolinar};
pub use hyperfine::{hyperfine_p0, Hyperfine};
pub use ramsey::{ramsey_p0, Ramsey};

/// Probabilities are floored here before taking logs, both for the
/// likelihood and when sampling outcomes.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensorError {
    #[error("prior interval [{low}, {high}] has zero volume")]
    DegeneratePrior { low: f64, high: f64 },
    #[error("discrete prior needs at least two distinct hypotheses of equal dimension")]
    DegenerateHypotheses,
    #[error("evolution time must be non-negative, got {0}")]
    NegativeTime(f64),
    #[error("expected {expected} control values, got {got}")]
    ControlDimension { expected: usize, got: usize },
    #[error("expected {expected} parameters, got {got}")]
    ParameterDimension { expected: usize, got: usize },
    #[error("outcome {0} outside the model's alphabet")]
    UnknownOutcome(usize),
    #[error("outcome probabilities sum to {0}")]
    Normalization(f64),
    #[error("invalid model constant: {0}")]
    InvalidConstant(&'static str),
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

/// Closed interval `[low, high]`, serialized as a two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn new(low: f64, high: f64) -> Self {
        Interval { low, high }
    }

    pub fn width(&self) -> f64 {
        self.high - self.low
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.low + self.high)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.low && x <= self.high
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.low, self.high)
    }

    pub fn is_proper(&self) -> bool {
        self.low.is_finite() && self.high.is_finite() && self.low < self.high
    }
}

impl From<[f64; 2]> for Interval {
    fn from(b: [f64; 2]) -> Self {
        Interval::new(b[0], b[1])
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.low, i.high]
    }
}

/// Prior over the unknown parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Prior {
    /// Independent uniform distribution on each interval.
    UniformBox(Vec<Interval>),
    /// Equal mass on a finite set of hypotheses.
    Discrete(Vec<Vec<f64>>),
}

impl Prior {
    pub fn uniform_box(bounds: Vec<Interval>) -> Result<Self, SensorError> {
        if bounds.is_empty() {
            return Err(SensorError::ParameterDimension {
                expected: 1,
                got: 0,
            });
        }
        if let Some(b) = bounds.iter().find(|b| !b.is_proper()) {
            return Err(SensorError::DegeneratePrior {
                low: b.low,
                high: b.high,
            });
        }
        Ok(Prior::UniformBox(bounds))
    }

    pub fn discrete(points: Vec<Vec<f64>>) -> Result<Self, SensorError> {
        let d = points.first().map_or(0, Vec::len);
        let consistent = d > 0 && points.iter().all(|p| p.len() == d);
        let distinct = points.iter().skip(1).any(|p| p != &points[0]);
        if !consistent || !distinct {
            return Err(SensorError::DegenerateHypotheses);
        }
        Ok(Prior::Discrete(points))
    }

    pub fn dim(&self) -> usize {
        match self {
            Prior::UniformBox(b) => b.len(),
            Prior::Discrete(p) => p[0].len(),
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Prior::Discrete(_))
    }

    /// Bounding box of the support.
    pub fn bounds(&self) -> Vec<Interval> {
        match self {
            Prior::UniformBox(b) => b.clone(),
            Prior::Discrete(points) => (0..self.dim())
                .map(|j| {
                    let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                        (lo.min(p[j]), hi.max(p[j]))
                    });
                    Interval::new(lo, hi)
                })
                .collect(),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            Prior::UniformBox(b) => b.iter().map(Interval::midpoint).collect(),
            Prior::Discrete(points) => (0..self.dim())
                .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / points.len() as f64)
                .collect(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Prior::UniformBox(b) => b
                .iter()
                .map(|i| i.low + (i.high - i.low) * rng.random::<f64>())
                .collect(),
            Prior::Discrete(points) => points[rng.random_range(0..points.len())].clone(),
        }
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        match self {
            Prior::UniformBox(b) => {
                theta.len() == b.len() && b.iter().zip(theta).all(|(i, &x)| i.contains(x))
            }
            Prior::Discrete(points) => points.iter().any(|p| p.as_slice() == theta),
        }
    }

    /// Clips each coordinate into the bounding box.
    pub fn clip(&self, theta: &mut [f64]) {
        for (x, b) in theta.iter_mut().zip(self.bounds()) {
            *x = b.clamp(*x);
        }
    }
}

/// Label of a measurement outcome in the model's finite alphabet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Outcome(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    /// Total evolution time, in microseconds.
    Time,
    /// Number of measurements.
    Count,
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResourceKind::Time => write!(f, "time"),
            ResourceKind::Count => write!(f, "count"),
        }
    }
}

/// Amount of resource consumed by one measurement.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ResourceCost(pub f64);

/// A physical estimation task.
///
/// Implementations provide the outcome probabilities twice: as plain floats
/// for simulation and evaluation, and as tape operations so that gradients
/// can flow through the likelihood into the controls. Both routes must
/// produce identical primal values.
pub trait SensorModel: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn prior(&self) -> &Prior;

    fn control_bounds(&self) -> &[Interval];

    fn n_outcomes(&self) -> usize;

    fn resource_kind(&self) -> ResourceKind;

    /// Unfloored probability of `outcome` given parameters and controls.
    fn probability(&self, theta: &[f64], control: &[f64], outcome: Outcome) -> Result<f64, SensorError>;

    /// Floored log-likelihood on the tape. Each entry of `theta` is either a
    /// scalar (one parameter point) or a vector over particles; `control` is
    /// a vector of the model's control dimension.
    fn taped_log_likelihood(
        &self,
        tape: &mut Tape,
        theta: &[Var],
        control: Var,
        outcome: Outcome,
    ) -> Result<Var, SensorError>;

    fn resource_cost(&self, control: &[f64]) -> ResourceCost;

    /// Cost of the cheapest admissible measurement.
    fn min_step_cost(&self) -> f64;

    fn d_params(&self) -> usize {
        self.prior().dim()
    }

    fn d_controls(&self) -> usize {
        self.control_bounds().len()
    }

    fn log_likelihood(&self, theta: &[f64], control: &[f64], outcome: Outcome) -> Result<f64, SensorError> {
        Ok(self.probability(theta, control, outcome)?.max(PROBABILITY_FLOOR).ln())
    }
}

/// `ln(max(p, floor))` on the tape.
pub(crate) fn taped_floored_log(tape: &mut Tape, p: Var) -> Result<Var, SensorError> {
    let floor = tape.scalar(PROBABILITY_FLOOR)?;
    let floored = tape.max(p, floor)?;
    Ok(tape.log(floored)?)
}

/// Picks the outcome probability or its binary complement on the tape.
pub(crate) fn taped_binary(tape: &mut Tape, p0: Var, outcome: Outcome) -> Result<Var, SensorError> {
    match outcome.0 {
        0 => Ok(p0),
        1 => {
            let one = tape.scalar(1.0)?;
            Ok(tape.sub(one, p0)?)
        }
        y => Err(SensorError::UnknownOutcome(y)),
    }
}

pub(crate) fn plain_binary(p0: f64, outcome: Outcome) -> Result<f64, SensorError> {
    match outcome.0 {
        0 => Ok(p0),
        1 => Ok(1.0 - p0),
        y => Err(SensorError::UnknownOutcome(y)),
    }
}

pub(crate) fn check_dims(model: &dyn SensorModel, theta: usize, control: usize) -> Result<(), SensorError> {
    if theta != model.d_params() {
        return Err(SensorError::ParameterDimension {
            expected: model.d_params(),
            got: theta,
        });
    }
    if control != model.d_controls() {
        return Err(SensorError::ControlDimension {
            expected: model.d_controls(),
            got: control,
        });
    }
    Ok(())
}

/// Floored outcome distribution, checked for normalization.
pub fn outcome_distribution(
    model: &dyn SensorModel,
    theta: &[f64],
    control: &[f64],
) -> Result<Vec<f64>, SensorError> {
    let probs = (0..model.n_outcomes())
        .map(|y| Ok(model.probability(theta, control, Outcome(y))?.max(PROBABILITY_FLOOR)))
        .collect::<Result<Vec<f64>, SensorError>>()?;
    let total: f64 = probs.iter().sum();
    if !((total - 1.0).abs() <= NORMALIZATION_TOLERANCE) {
        return Err(SensorError::Normalization(total));
    }
    Ok(probs)
}

/// Draws an outcome at `theta` by inverse CDF over the floored distribution.
pub fn sample_outcome<R: Rng + ?Sized>(
    model: &dyn SensorModel,
    theta: &[f64],
    control: &[f64],
    rng: &mut R,
) -> Result<Outcome, SensorError> {
    let probs = outcome_distribution(model, theta, control)?;
    let total: f64 = probs.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (y, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(Outcome(y));
        }
    }
    Ok(Outcome(probs.len() - 1))
}
