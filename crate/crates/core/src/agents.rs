//! Control policies: trainable agents (MLP, static schedule) and the
//! heuristic baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Tensor, Var};
use crate::particle_filter::{ParticleEnsemble, PosteriorSummary};
use crate::rng::{stream, Purpose};
use crate::sensors::{Interval, Outcome};

/// Added to the particle distance before inversion in the PGH rule.
pub const PGH_EPSILON: f64 = 1e-9;

/// Clamp range of the log-scaled std feature.
const LOG_STD_FLOOR: f64 = -10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("feature vector has length {got}, agent expects {expected}")]
    FeatureDimension { expected: usize, got: usize },
    #[error("agent emits {got} controls, model takes {expected}")]
    ControlDimension { expected: usize, got: usize },
    #[error("checkpoint layer {layer}: {reason}")]
    LayerShape { layer: usize, reason: String },
    #[error("parameter vector has length {got}, agent has {expected}")]
    ParameterCount { expected: usize, got: usize },
    #[error("checkpoint contains a non-finite parameter")]
    NonFinite,
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

/// Number of features for a model with `d_params` parameters.
pub fn feature_len(d_params: usize) -> usize {
    2 * d_params + 3
}

/// Fixed-size, normalized view of the posterior and the loop state.
///
/// Layout: normalized means (d), log-scaled stds (d), consumed-resource
/// fraction, last outcome, step fraction.
pub fn build_features(
    summary: &PosteriorSummary,
    prior_bounds: &[Interval],
    consumed_fraction: f64,
    last_outcome: Option<(Outcome, usize)>,
    step_fraction: f64,
) -> Vec<f64> {
    let mut f = Vec::with_capacity(feature_len(prior_bounds.len()));
    for (m, b) in summary.mean.iter().zip(prior_bounds) {
        f.push(2.0 * (m - b.low) / b.width() - 1.0);
    }
    for (s, b) in summary.std.iter().zip(prior_bounds) {
        let log = (s / b.width()).ln().clamp(LOG_STD_FLOOR, 0.0);
        f.push(2.0 * (log - LOG_STD_FLOOR) / -LOG_STD_FLOOR - 1.0);
    }
    f.push(consumed_fraction.clamp(0.0, 1.0));
    f.push(match last_outcome {
        None => 0.0,
        Some((_, n)) if n < 2 => 0.0,
        Some((Outcome(y), n)) => 2.0 * y as f64 / (n - 1) as f64 - 1.0,
    });
    f.push(step_fraction.clamp(0.0, 1.0));
    f
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Mlp {
        inputs: usize,
        hidden: Vec<usize>,
        outputs: usize,
        activation: Activation,
    },
    /// One trainable control row per measurement step.
    Static { max_steps: usize, controls: usize },
}

impl Architecture {
    pub fn outputs(&self) -> usize {
        match self {
            Architecture::Mlp { outputs, .. } => *outputs,
            Architecture::Static { controls, .. } => *controls,
        }
    }

    /// `(rows, cols, bias length)` of every layer.
    fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        match self {
            Architecture::Mlp {
                inputs, hidden, outputs, ..
            } => {
                let widths: Vec<usize> = std::iter::once(*inputs)
                    .chain(hidden.iter().copied())
                    .chain(std::iter::once(*outputs))
                    .collect();
                widths.windows(2).map(|w| (w[1], w[0], w[1])).collect()
            }
            Architecture::Static { max_steps, controls } => vec![(*max_steps, *controls, 0)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Row-major; `w[out][in]` for MLP layers, `w[step][control]` for a
    /// static schedule.
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

/// A trainable agent. Serializes directly as its checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAgent")]
pub struct TrainableAgent {
    architecture: Architecture,
    layers: Vec<Layer>,
}

#[derive(Deserialize)]
struct RawAgent {
    architecture: Architecture,
    layers: Vec<Layer>,
}

impl TryFrom<RawAgent> for TrainableAgent {
    type Error = AgentError;

    fn try_from(raw: RawAgent) -> Result<Self, AgentError> {
        TrainableAgent::from_layers(raw.architecture, raw.layers)
    }
}

impl TrainableAgent {
    pub fn from_layers(architecture: Architecture, layers: Vec<Layer>) -> Result<Self, AgentError> {
        let shapes = architecture.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(AgentError::LayerShape {
                layer: layers.len().min(shapes.len()),
                reason: format!("expected {} layers, found {}", shapes.len(), layers.len()),
            });
        }
        for (k, ((rows, cols, nb), layer)) in shapes.iter().zip(&layers).enumerate() {
            if layer.w.len() != *rows || layer.w.iter().any(|r| r.len() != *cols) || layer.b.len() != *nb {
                return Err(AgentError::LayerShape {
                    layer: k,
                    reason: format!("expected w {rows}x{cols} and b of length {nb}"),
                });
            }
            if layer.w.iter().flatten().chain(&layer.b).any(|x| !x.is_finite()) {
                return Err(AgentError::NonFinite);
            }
        }
        Ok(TrainableAgent { architecture, layers })
    }

    /// Glorot-uniform weights and zero biases, drawn from the agent-init
    /// stream of `seed`.
    pub fn mlp(inputs: usize, hidden: &[usize], outputs: usize, seed: u64) -> Self {
        let architecture = Architecture::Mlp {
            inputs,
            hidden: hidden.to_vec(),
            outputs,
            activation: Activation::Tanh,
        };
        let mut rng = stream(seed, Purpose::AgentInit, 0);
        let layers = architecture
            .layer_shapes()
            .into_iter()
            .map(|(rows, cols, nb)| {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                Layer {
                    w: (0..rows)
                        .map(|_| (0..cols).map(|_| rng.random_range(-limit..limit)).collect())
                        .collect(),
                    b: vec![0.0; nb],
                }
            })
            .collect();
        TrainableAgent { architecture, layers }
    }

    /// Schedule whose raw rows are all zero, i.e. every control at its
    /// bound midpoint.
    pub fn static_schedule(max_steps: usize, controls: usize) -> Self {
        TrainableAgent {
            architecture: Architecture::Static { max_steps, controls },
            layers: vec![Layer {
                w: vec![vec![0.0; controls]; max_steps],
                b: Vec::new(),
            }],
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() * l.w.first().map_or(0, Vec::len) + l.b.len()).sum()
    }

    /// Flat parameter vector: per layer, `w` row-major then `b`.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().flatten().chain(&l.b).copied())
            .collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<(), AgentError> {
        if flat.len() != self.n_params() {
            return Err(AgentError::ParameterCount {
                expected: self.n_params(),
                got: flat.len(),
            });
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            for x in l.w.iter_mut().flatten().chain(l.b.iter_mut()) {
                *x = *it.next().unwrap();
            }
        }
        Ok(())
    }

    fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<Var>, AdError> {
        let mut vars = Vec::new();
        for layer in &self.layers {
            match self.architecture {
                Architecture::Mlp { .. } => {
                    let rows = layer.w.len();
                    let cols = layer.w[0].len();
                    let w = Tensor::matrix(rows, cols, layer.w.concat())?;
                    vars.push(tape.leaf(w, requires_grad)?);
                    vars.push(tape.leaf(Tensor::vector(layer.b.clone()), requires_grad)?);
                }
                Architecture::Static { .. } => {
                    for row in &layer.w {
                        vars.push(tape.leaf(Tensor::vector(row.clone()), requires_grad)?);
                    }
                }
            }
        }
        Ok(vars)
    }
}

/// Any control policy the measurement loop can run.
#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    Trainable(TrainableAgent),
    /// Particle guess heuristic.
    Pgh,
    /// Inverse posterior standard deviation.
    Sigma,
    /// Uniform over the control bounds.
    Random,
    /// The same control every step.
    Fixed(Vec<f64>),
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Trainable(a) => match a.architecture {
                Architecture::Mlp { .. } => "mlp",
                Architecture::Static { .. } => "static_schedule",
            },
            Policy::Pgh => "pgh",
            Policy::Sigma => "sigma",
            Policy::Random => "random",
            Policy::Fixed(_) => "static",
        }
    }

    pub fn trainable(&self) -> Option<&TrainableAgent> {
        match self {
            Policy::Trainable(a) => Some(a),
            _ => None,
        }
    }

    /// Places the trainable parameters on `tape` as leaves.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<BoundPolicy<'_>, AgentError> {
        let params = match self {
            Policy::Trainable(a) => a.bind(tape, requires_grad)?,
            _ => Vec::new(),
        };
        Ok(BoundPolicy { policy: self, params })
    }
}

/// Inputs to one decision.
pub struct DecisionContext<'a> {
    pub ensemble: &'a ParticleEnsemble,
    pub summary: &'a PosteriorSummary,
    pub features: &'a [f64],
    pub step: usize,
    pub control_bounds: &'a [Interval],
}

/// A policy whose parameters live on a tape.
pub struct BoundPolicy<'a> {
    policy: &'a Policy,
    params: Vec<Var>,
}

impl BoundPolicy<'_> {
    /// Parameter leaves in flat-parameter order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// Next control as a vector on the tape. Heuristics return constants.
    pub fn decide<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        ctx: &DecisionContext,
        rng: &mut R,
    ) -> Result<Var, AgentError> {
        let bounds = ctx.control_bounds;
        let raw = match self.policy {
            Policy::Trainable(agent) => {
                if agent.architecture.outputs() != bounds.len() {
                    return Err(AgentError::ControlDimension {
                        expected: bounds.len(),
                        got: agent.architecture.outputs(),
                    });
                }
                match &agent.architecture {
                    Architecture::Mlp { inputs, .. } => {
                        if *inputs != ctx.features.len() {
                            return Err(AgentError::FeatureDimension {
                                expected: *inputs,
                                got: ctx.features.len(),
                            });
                        }
                        let x = tape.constant(Tensor::vector(ctx.features.to_vec()))?;
                        let mut h = tape.stop_gradient(x)?;
                        let n_layers = self.params.len() / 2;
                        for (k, pair) in self.params.chunks(2).enumerate() {
                            let z = tape.matvec(pair[0], h)?;
                            let z = tape.add(z, pair[1])?;
                            h = if k + 1 < n_layers { tape.tanh(z)? } else { z };
                        }
                        h
                    }
                    Architecture::Static { max_steps, .. } => self.params[ctx.step.min(max_steps - 1)],
                }
            }
            heuristic => {
                let c = heuristic_control(heuristic, ctx, rng);
                return Ok(tape.constant(Tensor::vector(c))?);
            }
        };
        squash(tape, raw, bounds)
    }
}

/// `low + (high − low) · sigmoid(raw)` per control.
fn squash(tape: &mut Tape, raw: Var, bounds: &[Interval]) -> Result<Var, AgentError> {
    let low = tape.constant(Tensor::vector(bounds.iter().map(|b| b.low).collect()))?;
    let width = tape.constant(Tensor::vector(bounds.iter().map(Interval::width).collect()))?;
    let s = tape.sigmoid(raw)?;
    let scaled = tape.mul(s, width)?;
    Ok(tape.add(scaled, low)?)
}

fn heuristic_control<R: Rng + ?Sized>(policy: &Policy, ctx: &DecisionContext, rng: &mut R) -> Vec<f64> {
    let bounds = ctx.control_bounds;
    let mut c: Vec<f64> = bounds.iter().map(Interval::midpoint).collect();
    match policy {
        Policy::Pgh => c[0] = pgh_time(ctx.ensemble, bounds[0], rng),
        Policy::Sigma => c[0] = sigma_time(ctx.summary, bounds[0]),
        Policy::Random => {
            for (x, b) in c.iter_mut().zip(bounds) {
                *x = rng.random_range(b.low..=b.high);
            }
        }
        Policy::Fixed(v) => {
            for ((x, b), v) in c.iter_mut().zip(bounds).zip(v) {
                *x = b.clamp(*v);
            }
        }
        Policy::Trainable(_) => unreachable!("trainable agents decide on the tape"),
    }
    c
}

fn pick<R: Rng + ?Sized>(weights: &[f64], skip: Option<usize>, rng: &mut R) -> Option<usize> {
    let total: f64 = weights
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(_, w)| w)
        .sum();
    if !(total > 0.0) {
        return None;
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, w) in weights.iter().enumerate() {
        if Some(i) == skip || *w <= 0.0 {
            continue;
        }
        acc += w;
        last = Some(i);
        if u < acc {
            return last;
        }
    }
    last
}

/// Particle guess heuristic: draw two distinct particles by weight and
/// return the inverse of their distance, clamped to `bound`. A degenerate
/// ensemble gives the upper bound.
pub fn pgh_time<R: Rng + ?Sized>(ensemble: &ParticleEnsemble, bound: Interval, rng: &mut R) -> f64 {
    let w = ensemble.weights();
    let Some(i) = pick(&w, None, rng) else {
        return bound.high;
    };
    let Some(j) = pick(&w, Some(i), rng) else {
        return bound.high;
    };
    let dist = ensemble
        .particle(i)
        .iter()
        .zip(ensemble.particle(j))
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    bound.clamp(1.0 / (dist + PGH_EPSILON))
}

/// `1 / std` of the first parameter, clamped; zero spread gives the upper
/// bound.
pub fn sigma_time(summary: &PosteriorSummary, bound: Interval) -> f64 {
    let s = summary.std[0];
    if s > 0.0 {
        bound.clamp(1.0 / s)
    } else {
        bound.high
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensors::Prior;
    use proptest::prelude::*;
    use rand::Rng;

    fn tau_bounds() -> Vec<Interval> {
        vec![Interval::new(0.1, 100.0)]
    }

    fn summary(mean: f64, std: f64) -> PosteriorSummary {
        PosteriorSummary {
            mean: vec![mean],
            covariance: vec![std * std],
            std: vec![std],
            ess: 10.0,
        }
    }

    fn context_parts() -> (ParticleEnsemble, PosteriorSummary) {
        let ens = ParticleEnsemble::from_points(vec![vec![0.2], vec![0.7]], None).unwrap();
        let s = ens.summarize();
        (ens, s)
    }

    fn decide_value(policy: &Policy, features: &[f64], step: usize, bounds: &[Interval]) -> Vec<f64> {
        let (ens, s) = context_parts();
        let mut tape = Tape::new();
        let bound = policy.bind(&mut tape, false).unwrap();
        let ctx = DecisionContext {
            ensemble: &ens,
            summary: &s,
            features,
            step,
            control_bounds: bounds,
        };
        let c = bound.decide(&mut tape, &ctx, &mut stream(0, Purpose::Scratch, 0)).unwrap();
        tape.value(c).data().to_vec()
    }

    #[test]
    fn feature_examples() {
        let bounds = [Interval::new(0.0, 2.0)];
        let f = build_features(&summary(1.0, 2.0), &bounds, 1.0, Some((Outcome(1), 2)), 0.5);
        assert_eq!(f.len(), feature_len(1));
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 1.0);
        assert_eq!(f[2], 1.0);
        assert_eq!(f[3], 1.0);
        assert_eq!(f[4], 0.5);

        let f = build_features(&summary(0.0, 0.0), &bounds, 0.0, Some((Outcome(0), 2)), 0.0);
        assert_eq!(f[0], -1.0);
        assert_eq!(f[1], -1.0);
        assert_eq!(f[3], -1.0);
        let f = build_features(&summary(0.0, 0.0), &bounds, 0.0, None, 0.0);
        assert_eq!(f[3], 0.0);
    }

    #[test]
    fn zero_mlp_outputs_bound_midpoint() {
        let mut agent = TrainableAgent::mlp(5, &[4, 3], 1, 1);
        agent.set_params(&vec![0.0; agent.n_params()]).unwrap();
        let c = decide_value(&Policy::Trainable(agent), &[0.3, -0.1, 0.5, 1.0, 0.2], 0, &tau_bounds());
        assert!((c[0] - 50.05).abs() < 1e-12);
    }

    #[test]
    fn mlp_rejects_wrong_feature_length() {
        let agent = TrainableAgent::mlp(5, &[4], 1, 1);
        let (ens, s) = context_parts();
        let mut tape = Tape::new();
        let policy = Policy::Trainable(agent);
        let bound = policy.bind(&mut tape, false).unwrap();
        let ctx = DecisionContext {
            ensemble: &ens,
            summary: &s,
            features: &[0.0; 3],
            step: 0,
            control_bounds: &tau_bounds(),
        };
        assert!(matches!(
            bound.decide(&mut tape, &ctx, &mut stream(0, Purpose::Scratch, 0)),
            Err(AgentError::FeatureDimension { expected: 5, got: 3 })
        ));
    }

    #[test]
    fn mlp_output_in_bounds_for_random_weights() {
        let bounds = [Interval::new(-2.0, 2.0), Interval::new(0.1, 100.0)];
        let mut rng = stream(3, Purpose::Scratch, 0);
        let mut agent = TrainableAgent::mlp(7, &[8], 2, 0);
        let features = [0.1, -0.4, 0.9, -1.0, 0.0, 0.3, 1.0];
        for _ in 0..10_000 {
            let p: Vec<f64> = (0..agent.n_params()).map(|_| rng.random_range(-20.0..20.0)).collect();
            agent.set_params(&p).unwrap();
            let c = decide_value(&Policy::Trainable(agent.clone()), &features, 0, &bounds);
            for (x, b) in c.iter().zip(&bounds) {
                assert!(b.contains(*x), "{x}");
            }
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let bounds = [Interval::new(0.1, 100.0)];
        let features = [0.2, -0.7, 0.4, 1.0, 0.1];
        let agent = TrainableAgent::mlp(5, &[6, 4], 1, 11);
        let eval = |p: &[f64]| {
            let mut a = agent.clone();
            a.set_params(p).unwrap();
            decide_value(&Policy::Trainable(a), &features, 0, &bounds)[0]
        };
        let policy = Policy::Trainable(agent.clone());
        let (ens, s) = context_parts();
        let mut tape = Tape::new();
        let bound = policy.bind(&mut tape, true).unwrap();
        let ctx = DecisionContext {
            ensemble: &ens,
            summary: &s,
            features: &features,
            step: 0,
            control_bounds: &bounds,
        };
        let c = bound.decide(&mut tape, &ctx, &mut stream(0, Purpose::Scratch, 0)).unwrap();
        let out = tape.index(c, 0).unwrap();
        let params = bound.params().to_vec();
        let g = tape.backward(out).unwrap();
        let analytic: Vec<f64> = params.iter().flat_map(|v| g.wrt(*v).into_data()).collect();
        let p0 = agent.params();
        let h = 1e-5;
        for (k, a) in analytic.iter().enumerate() {
            let mut plus = p0.clone();
            let mut minus = p0.clone();
            plus[k] += h;
            minus[k] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert!((a - fd).abs() / a.abs().max(1.0) < 1e-5, "param {k}: {a} vs {fd}");
        }
    }

    #[test]
    fn static_schedule_rows_and_gradient() {
        let mut agent = TrainableAgent::static_schedule(3, 1);
        agent.set_params(&[-1.0, 0.0, 2.0]).unwrap();
        let bounds = [Interval::new(0.0, 1.0)];
        let policy = Policy::Trainable(agent);
        assert_eq!(decide_value(&policy, &[], 0, &bounds), vec![crate::autodiff::sigmoid(-1.0)]);
        assert_eq!(decide_value(&policy, &[], 7, &bounds), vec![crate::autodiff::sigmoid(2.0)]);

        let (ens, s) = context_parts();
        let mut tape = Tape::new();
        let bound = policy.bind(&mut tape, true).unwrap();
        let ctx = DecisionContext {
            ensemble: &ens,
            summary: &s,
            features: &[],
            step: 1,
            control_bounds: &bounds,
        };
        let c = bound.decide(&mut tape, &ctx, &mut stream(0, Purpose::Scratch, 0)).unwrap();
        let out = tape.index(c, 0).unwrap();
        let rows = bound.params().to_vec();
        let g = tape.backward(out).unwrap();
        let nonzero: Vec<bool> = rows.iter().map(|r| g.wrt(*r).item() != 0.0).collect();
        assert_eq!(nonzero, vec![false, true, false]);
    }

    #[test]
    fn pgh_examples() {
        let ens = ParticleEnsemble::from_points(vec![vec![0.25], vec![0.75]], None).unwrap();
        let b = Interval::new(0.1, 100.0);
        for s in 0..20 {
            let t = pgh_time(&ens, b, &mut stream(s, Purpose::Scratch, 0));
            assert!((t - 2.0).abs() < 1e-7);
        }
        let same = ParticleEnsemble::from_points(vec![vec![0.4], vec![0.4]], None).unwrap();
        assert_eq!(pgh_time(&same, b, &mut stream(0, Purpose::Scratch, 0)), 100.0);
        let one_hot =
            ParticleEnsemble::from_points(vec![vec![0.1], vec![0.9]], Some(vec![0.0, f64::NEG_INFINITY])).unwrap();
        assert_eq!(pgh_time(&one_hot, b, &mut stream(0, Purpose::Scratch, 0)), 100.0);
    }

    #[test]
    fn pgh_inverse_time_matches_expected_distance() {
        // Exact expectation of the distance for two draws without
        // replacement, compared with the Monte Carlo mean of 1/τ.
        let pts = vec![vec![0.1], vec![0.3], vec![0.35], vec![0.8]];
        let w = [0.4, 0.3, 0.2, 0.1];
        let ens = ParticleEnsemble::from_points(pts.clone(), Some(w.iter().map(|x: &f64| x.ln()).collect())).unwrap();
        let mut expected = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    expected += w[i] * w[j] / (1.0 - w[i]) * (pts[i][0] - pts[j][0]).abs();
                }
            }
        }
        let b = Interval::new(0.01, 1000.0);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|s| 1.0 / pgh_time(&ens, b, &mut stream(2, Purpose::Scratch, s)))
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - expected).abs() < 4.0 * (var / n as f64).sqrt(), "{mean} vs {expected}");
    }

    #[test]
    fn sigma_examples() {
        let b = Interval::new(0.1, 100.0);
        assert!((sigma_time(&summary(0.0, 0.1), b) - 10.0).abs() < 1e-12);
        assert_eq!(sigma_time(&summary(0.0, 20.0), b), 0.1);
        assert_eq!(sigma_time(&summary(0.0, 0.0), b), 100.0);
        assert_eq!(sigma_time(&summary(0.0, 1e-300), b), 100.0);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let agent = TrainableAgent::mlp(5, &[7, 3], 2, 99);
        let json = serde_json::to_string(&agent).unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["architecture"]["kind"], "mlp");
        assert_eq!(value["layers"].as_array().unwrap().len(), 3);
        assert!(value["layers"][0]["w"].is_array() && value["layers"][0]["b"].is_array());
        let back: TrainableAgent = serde_json::from_str(&json).unwrap();
        assert_eq!(back, agent);
        for (a, b) in back.params().iter().zip(agent.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn checkpoint_shape_is_validated() {
        let agent = TrainableAgent::mlp(5, &[4], 1, 0);
        let mut value = serde_json::to_value(&agent).unwrap();
        value["layers"][0]["b"] = serde_json::json!([0.0]);
        assert!(serde_json::from_value::<TrainableAgent>(value).is_err());
    }

    proptest! {
        #[test]
        fn heuristics_stay_in_bounds(
            mean in 0.0f64..=1.0,
            std in 0.0f64..5.0,
            pts in proptest::collection::vec(0.0f64..1.0, 2..20),
            seed in 0u64..1000,
        ) {
            let ens = ParticleEnsemble::from_points(pts.iter().map(|p| vec![*p]).collect(), None).unwrap();
            let s = summary(mean, std);
            let bounds = tau_bounds();
            let prior = Prior::uniform_box(vec![Interval::new(0.0, 1.0)]).unwrap();
            let features = build_features(&s, &prior.bounds(), 0.3, None, 0.1);
            for f in &features {
                prop_assert!(f.is_finite() && f.abs() <= 1.1);
            }
            for policy in [Policy::Pgh, Policy::Sigma, Policy::Random, Policy::Fixed(vec![1e9])] {
                let mut tape = Tape::new();
                let bound = policy.bind(&mut tape, false).unwrap();
                let ctx = DecisionContext {
                    ensemble: &ens,
                    summary: &s,
                    features: &features,
                    step: 0,
                    control_bounds: &bounds,
                };
                let c = bound.decide(&mut tape, &ctx, &mut stream(seed, Purpose::Scratch, 0)).unwrap();
                prop_assert!(bounds[0].contains(tape.value(c).data()[0]));
            }
        }
    }
}
