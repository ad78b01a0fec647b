//! Measurement-loop simulation, losses, the hybrid policy-gradient
//! estimator and the optimizer loop.

mod episode;
mod evaluate;
mod optim;
mod toy;

pub use episode::{run_episode, run_taped, EpisodeConfig, EpisodeSeed, EpisodeTrace, Replay, StepRecord, TapedEpisode};
pub use evaluate::{bootstrap_ci, evaluate, median, CurvePoint, EvaluationConfig};
pub use optim::{cosine_learning_rate, Adam};
pub use toy::BernoulliToy;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentError, Policy, TrainableAgent};
use crate::autodiff::{AdError, Gradients, Tape, Tensor, Var};
use crate::particle_filter::FilterError;
use crate::sensors::{SensorError, SensorModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("particle filter collapsed")]
    Collapse,
    #[error("non-finite {what} in iteration {iteration}, episode {episode} (seed {seed})")]
    NonFinite {
        what: &'static str,
        iteration: usize,
        episode: usize,
        seed: u64,
    },
    #[error("{failed} of {total} episodes failed; more than 1% indicates a misconfiguration")]
    TooManyFailures { failed: usize, total: usize },
    #[error("a leave-one-out baseline needs at least 2 episodes per batch, got {0}")]
    BatchTooSmall(usize),
    #[error("error-probability loss needs a model with discrete hypotheses")]
    LossNeedsDiscretePrior,
    #[error("invalid setting {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error(transparent)]
    Filter(FilterError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

/// Episode loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Loss {
    /// `(θ̂ − θ)ᵀ W (θ̂ − θ)`; `weights` is row-major `d × d`, identity when
    /// absent.
    Mse {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
    /// Hard 0/1 error of the MAP hypothesis in evaluation; posterior mass
    /// on wrong hypotheses in training.
    ErrorProbability,
}

impl Default for Loss {
    fn default() -> Self {
        Loss::Mse { weights: None }
    }
}

impl Loss {
    pub fn validate(&self, model: &dyn SensorModel) -> Result<(), TrainError> {
        match self {
            Loss::ErrorProbability if !model.prior().is_discrete() => Err(TrainError::LossNeedsDiscretePrior),
            Loss::Mse { weights: Some(w) } => {
                let d = model.d_params();
                if w.len() != d * d {
                    return Err(TrainError::Config {
                        field: "loss.weights",
                        reason: format!("expected {} entries, got {}", d * d, w.len()),
                    });
                }
                let symmetric = (0..d).all(|i| (0..d).all(|j| w[i * d + j] == w[j * d + i]));
                let diag_ok = (0..d).all(|i| w[i * d + i] >= 0.0);
                if !symmetric || !diag_ok || w.iter().any(|x| !x.is_finite()) {
                    return Err(TrainError::Config {
                        field: "loss.weights",
                        reason: "must be a finite symmetric matrix with a nonnegative diagonal".into(),
                    });
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Evaluation metric of a finished episode.
    pub fn evaluate(&self, trace: &EpisodeTrace) -> f64 {
        match self {
            Loss::Mse { weights } => quadratic_form(weights.as_deref(), &trace.estimate, &trace.true_theta),
            Loss::ErrorProbability => {
                let w = trace.posterior.weights();
                // ties go to the lowest index
                let map = (0..w.len()).fold(0, |best, i| if w[i] > w[best] { i } else { best });
                if trace.posterior.particle(map) == trace.true_theta.as_slice() {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }

    /// Differentiable training loss of a taped episode.
    pub fn taped(&self, ep: &mut TapedEpisode) -> Result<Var, TrainError> {
        let tape = &mut ep.tape;
        let truth = &ep.trace.true_theta;
        match self {
            Loss::Mse { weights } => {
                let t = tape.constant(Tensor::vector(truth.clone()))?;
                let diff = tape.sub(ep.estimate, t)?;
                match weights {
                    None => {
                        let sq = tape.square(diff)?;
                        Ok(tape.sum(sq)?)
                    }
                    Some(w) => {
                        let d = truth.len();
                        let m = tape.constant(Tensor::matrix(d, d, w.clone())?)?;
                        let wd = tape.matvec(m, diff)?;
                        let prod = tape.mul(diff, wd)?;
                        Ok(tape.sum(prod)?)
                    }
                }
            }
            Loss::ErrorProbability => {
                let post = &ep.trace.posterior;
                let wrong: Vec<f64> = (0..post.len())
                    .map(|i| if post.particle(i) == truth.as_slice() { 0.0 } else { 1.0 })
                    .collect();
                let mask = tape.constant(Tensor::vector(wrong))?;
                let w = tape.exp(ep.log_weights)?;
                let masked = tape.mul(w, mask)?;
                Ok(tape.sum(masked)?)
            }
        }
    }
}

fn quadratic_form(weights: Option<&[f64]>, a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    match weights {
        None => d.iter().map(|x| x * x).sum(),
        Some(w) => {
            let n = d.len();
            (0..n).map(|i| (0..n).map(|j| d[i] * w[i * n + j] * d[j]).sum::<f64>()).sum()
        }
    }
}

/// One simulated episode reduced to what the estimator needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub loss: f64,
    /// Pathwise gradient of the loss.
    pub grad_loss: Vec<f64>,
    /// Gradient of `Σ_t log p(y_t | θ_true, c_t)`.
    pub grad_log_prob: Vec<f64>,
}

/// A stochastic objective the estimator can differentiate.
pub trait Task: Sync {
    fn rollout(&self, params: &[f64], iteration: usize, slot: usize) -> Result<Rollout, TrainError>;

    /// Seed reported when an episode produces non-finite values.
    fn seed(&self) -> u64;
}

/// Flattens the gradients of `params` in order.
pub fn flatten(grads: &Gradients, params: &[Var]) -> Vec<f64> {
    params.iter().flat_map(|v| grads.wrt(*v).into_data()).collect()
}

/// Sweeps a tape once for both the loss and the score gradients.
pub fn rollout_from_tape(tape: &mut Tape, params: &[Var], loss: Var, log_prob: Var) -> Result<Rollout, TrainError> {
    let value = tape.item(loss);
    let grads = tape.backward_many(&[loss, log_prob])?;
    Ok(Rollout {
        loss: value,
        grad_loss: flatten(&grads[0], params),
        grad_log_prob: flatten(&grads[1], params),
    })
}

/// The measurement loop with a trainable agent as a [`Task`].
pub struct MeasurementTask<'a> {
    pub model: &'a dyn SensorModel,
    pub agent: TrainableAgent,
    pub episode: EpisodeConfig,
    pub loss: Loss,
    pub seed: u64,
}

impl Task for MeasurementTask<'_> {
    fn rollout(&self, params: &[f64], iteration: usize, slot: usize) -> Result<Rollout, TrainError> {
        let mut agent = self.agent.clone();
        agent.set_params(params)?;
        let policy = Policy::Trainable(agent);
        let mut ep = run_taped(
            self.model,
            &policy,
            &self.episode,
            EpisodeSeed::train(self.seed, iteration, slot),
            None,
        )?;
        let loss = self.loss.taped(&mut ep)?;
        rollout_from_tape(&mut ep.tape, &ep.params, loss, ep.log_prob)
    }

    fn seed(&self) -> u64 {
        self.seed
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Pathwise term plus the score-function term.
    Hybrid,
    /// Pathwise term only. Biased whenever outcomes depend on the controls.
    PathwiseOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Mean loss of the other episodes in the batch.
    LeaveOneOut,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradient {
    pub gradient: Vec<f64>,
    pub mean_loss: f64,
    pub failed: usize,
}

/// `(1/B) Σ_b ∇[L_b + detach(L_b − baseline_b) · Σ_t log p(y_bt | θ_true, c_bt)]`
/// over the episodes that did not fail.
pub fn batch_gradient(
    task: &dyn Task,
    params: &[f64],
    iteration: usize,
    batch_size: usize,
    estimator: Estimator,
    baseline: Baseline,
) -> Result<BatchGradient, TrainError> {
    if baseline == Baseline::LeaveOneOut && batch_size < 2 {
        return Err(TrainError::BatchTooSmall(batch_size));
    }
    let results: Vec<Result<Rollout, TrainError>> = (0..batch_size)
        .into_par_iter()
        .map(|slot| task.rollout(params, iteration, slot))
        .collect();

    let mut ok = Vec::with_capacity(batch_size);
    let mut failed = 0;
    for (slot, r) in results.into_iter().enumerate() {
        match r {
            Ok(r) => {
                if !r.loss.is_finite() {
                    return Err(non_finite("loss", iteration, slot, task));
                }
                if r.grad_loss.iter().chain(&r.grad_log_prob).any(|g| !g.is_finite()) {
                    return Err(non_finite("gradient", iteration, slot, task));
                }
                ok.push(r);
            }
            Err(TrainError::Collapse) => failed += 1,
            Err(e) => return Err(e),
        }
    }
    let n = ok.len();
    if n == 0 || (baseline == Baseline::LeaveOneOut && n < 2) {
        return Err(TrainError::TooManyFailures {
            failed,
            total: batch_size,
        });
    }
    let total_loss: f64 = ok.iter().map(|r| r.loss).sum();
    let mut gradient = vec![0.0; params.len()];
    for r in &ok {
        for (g, gl) in gradient.iter_mut().zip(&r.grad_loss) {
            *g += gl;
        }
        if estimator == Estimator::Hybrid {
            let b = match baseline {
                Baseline::LeaveOneOut => (total_loss - r.loss) / (n - 1) as f64,
                Baseline::None => 0.0,
            };
            let advantage = r.loss - b;
            for (g, gs) in gradient.iter_mut().zip(&r.grad_log_prob) {
                *g += advantage * gs;
            }
        }
    }
    for g in &mut gradient {
        *g /= n as f64;
    }
    Ok(BatchGradient {
        gradient,
        mean_loss: total_loss / n as f64,
        failed,
    })
}

fn non_finite(what: &'static str, iteration: usize, episode: usize, task: &dyn Task) -> TrainError {
    TrainError::NonFinite {
        what,
        iteration,
        episode,
        seed: task.seed(),
    }
}

/// Optimizer and batch settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Decay the step size to zero along a half cosine.
    pub cosine_decay: bool,
    pub estimator: Estimator,
    pub baseline: Baseline,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 64,
            iterations: 3000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 10.0,
            cosine_decay: true,
            estimator: Estimator::Hybrid,
            baseline: Baseline::LeaveOneOut,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field, reason: &str| {
            Err(TrainError::Config {
                field,
                reason: reason.to_string(),
            })
        };
        if self.baseline == Baseline::LeaveOneOut && self.batch_size < 2 {
            return Err(TrainError::BatchTooSmall(self.batch_size));
        }
        if self.batch_size == 0 {
            return bad("training.batch_size", "must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("training.learning_rate", "must be finite and nonnegative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("training.beta1", "decay rates must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("training.epsilon", "must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("training.clip_norm", "must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub loss_mean: f64,
    /// Before clipping.
    pub grad_norm: f64,
    pub learning_rate: f64,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: Vec<f64>,
    pub history: Vec<HistoryRow>,
}

/// Runs `config.iterations` steps of: simulate a batch, estimate the
/// gradient, clip its global norm, take an Adam step.
pub fn train(
    task: &dyn Task,
    initial: Vec<f64>,
    config: &TrainingConfig,
    mut progress: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut params = initial;
    let mut adam = Adam::new(params.len(), config.beta1, config.beta2, config.epsilon);
    let mut history = Vec::with_capacity(config.iterations);
    let allowed_failures = config.batch_size * config.iterations / 100;
    let mut failed_total = 0;
    for it in 0..config.iterations {
        let lr = if config.cosine_decay {
            cosine_learning_rate(config.learning_rate, it, config.iterations)
        } else {
            config.learning_rate
        };
        let batch = batch_gradient(task, &params, it, config.batch_size, config.estimator, config.baseline)?;
        failed_total += batch.failed;
        if failed_total > allowed_failures {
            return Err(TrainError::TooManyFailures {
                failed: failed_total,
                total: config.batch_size * config.iterations,
            });
        }
        let mut grad = batch.gradient;
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > config.clip_norm {
            let scale = config.clip_norm / norm;
            grad.iter_mut().for_each(|g| *g *= scale);
        }
        adam.step(&mut params, &grad, lr);
        let row = HistoryRow {
            iteration: it,
            loss_mean: batch.mean_loss,
            grad_norm: norm,
            learning_rate: lr,
            failed: batch.failed,
        };
        progress(&row);
        history.push(row);
    }
    Ok(TrainOutcome { params, history })
}
