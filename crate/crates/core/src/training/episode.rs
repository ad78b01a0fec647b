//! One run of the measurement loop.

use serde::{Deserialize, Serialize};

use crate::agents::{build_features, BoundPolicy, DecisionContext, Policy};
use crate::autodiff::{Tape, Tensor, Var};
use crate::particle_filter::{taped_bayes_update, taped_mean, FilterError, LiuWest, ParticleEnsemble};
use crate::rng::{pair_index, stream, Purpose};
use crate::sensors::{sample_outcome, Outcome, SensorModel};

use super::TrainError;

/// Settings shared by every episode of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    /// Total resource available, in the model's unit.
    pub budget: f64,
    /// Hard cap on loop iterations.
    pub max_steps: usize,
    pub n_particles: usize,
    /// Resample when ESS drops below this fraction of the particle count.
    /// Zero disables resampling.
    pub resample_threshold: f64,
    pub liu_west: LiuWest,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            budget: 100.0,
            max_steps: 256,
            n_particles: 480,
            resample_threshold: 0.5,
            liu_west: LiuWest::default(),
        }
    }
}

/// Stream addresses for one episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSeed {
    pub seed: u64,
    pub truth: Purpose,
    pub episode: Purpose,
    pub index: u64,
}

impl EpisodeSeed {
    pub fn train(seed: u64, iteration: usize, slot: usize) -> Self {
        EpisodeSeed {
            seed,
            truth: Purpose::TrainTruth,
            episode: Purpose::TrainEpisode,
            index: pair_index(iteration as u64, slot as u64),
        }
    }

    pub fn eval(seed: u64, episode: usize) -> Self {
        EpisodeSeed {
            seed,
            truth: Purpose::EvalTruth,
            episode: Purpose::EvalEpisode,
            index: episode as u64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub features: Vec<f64>,
    pub control: Vec<f64>,
    pub outcome: Outcome,
    /// `log p(outcome | θ_true, control)`.
    pub log_likelihood: f64,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub true_theta: Vec<f64>,
    pub steps: Vec<StepRecord>,
    /// Posterior mean at termination.
    pub estimate: Vec<f64>,
    pub resource_used: f64,
    pub posterior: ParticleEnsemble,
    pub resamples: usize,
}

/// Frozen outcomes, features and step count from an earlier run. Used to
/// probe the pathwise chain with finite differences.
#[derive(Clone, Copy, Debug)]
pub struct Replay<'a> {
    pub steps: &'a [StepRecord],
}

/// An episode whose whole computation is on one tape.
pub struct TapedEpisode {
    pub tape: Tape,
    pub trace: EpisodeTrace,
    /// Agent parameter leaves in flat-parameter order.
    pub params: Vec<Var>,
    pub estimate: Var,
    pub log_weights: Var,
    /// `Σ_t log p(y_t | θ_true, c_t)`.
    pub log_prob: Var,
}

/// Runs the loop with the whole computation taped.
pub fn run_taped(
    model: &dyn SensorModel,
    policy: &Policy,
    cfg: &EpisodeConfig,
    seed: EpisodeSeed,
    replay: Option<Replay>,
) -> Result<TapedEpisode, TrainError> {
    simulate(model, policy, cfg, seed, true, replay)
}

/// Runs the loop keeping only one step's worth of tape at a time. Primal
/// values are identical to [`run_taped`].
pub fn run_episode(
    model: &dyn SensorModel,
    policy: &Policy,
    cfg: &EpisodeConfig,
    seed: EpisodeSeed,
) -> Result<EpisodeTrace, TrainError> {
    Ok(simulate(model, policy, cfg, seed, false, None)?.trace)
}

struct Bound<'p> {
    policy: BoundPolicy<'p>,
    columns: Vec<Var>,
    log_weights: Var,
}

fn bind<'p>(tape: &mut Tape, policy: &'p Policy, ens: &ParticleEnsemble, record: bool) -> Result<Bound<'p>, TrainError> {
    let policy = policy.bind(tape, record)?;
    let (columns, log_weights) = bind_ensemble(tape, ens)?;
    Ok(Bound {
        policy,
        columns,
        log_weights,
    })
}

/// Particle coordinates and log-weights as tape constants. Floored
/// likelihoods keep every log-weight finite.
fn bind_ensemble(tape: &mut Tape, ens: &ParticleEnsemble) -> Result<(Vec<Var>, Var), TrainError> {
    let columns = (0..ens.dim())
        .map(|j| tape.constant(Tensor::vector(ens.column(j))))
        .collect::<Result<Vec<_>, _>>()?;
    let log_weights = tape.constant(Tensor::vector(ens.log_weights().to_vec()))?;
    Ok((columns, log_weights))
}

fn simulate(
    model: &dyn SensorModel,
    policy: &Policy,
    cfg: &EpisodeConfig,
    seed: EpisodeSeed,
    record: bool,
    replay: Option<Replay>,
) -> Result<TapedEpisode, TrainError> {
    let prior = model.prior();
    let prior_bounds = prior.bounds();
    let control_bounds = model.control_bounds();
    let n_outcomes = model.n_outcomes();
    let true_theta = prior.sample(&mut stream(seed.seed, seed.truth, seed.index));
    let mut rng = stream(seed.seed, seed.episode, seed.index);
    let mut ens = ParticleEnsemble::from_prior(prior, cfg.n_particles, &mut rng)?;

    let mut tape = Tape::new();
    let mut b = bind(&mut tape, policy, &ens, record)?;
    let mut log_prob_terms = Vec::new();
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut consumed = 0.0;
    let mut resamples = 0;
    let min_cost = model.min_step_cost();

    loop {
        let t = steps.len();
        let more = match replay {
            Some(r) => t < r.steps.len(),
            None => {
                let remaining = cfg.budget - consumed;
                t < cfg.max_steps && remaining > 0.0 && remaining >= min_cost
            }
        };
        if !more {
            break;
        }
        if !record {
            tape = Tape::new();
            b = bind(&mut tape, policy, &ens, false)?;
        }
        let summary = ens.summarize();
        let features = match replay {
            Some(r) => r.steps[t].features.clone(),
            None => build_features(
                &summary,
                &prior_bounds,
                consumed / cfg.budget,
                steps.last().map(|s| (s.outcome, n_outcomes)),
                t as f64 / cfg.max_steps as f64,
            ),
        };
        let control_var = b.policy.decide(
            &mut tape,
            &DecisionContext {
                ensemble: &ens,
                summary: &summary,
                features: &features,
                step: t,
                control_bounds,
            },
            &mut rng,
        )?;
        let control = tape.value(control_var).data().to_vec();
        let outcome = match replay {
            Some(r) => r.steps[t].outcome,
            None => sample_outcome(model, &true_theta, &control, &mut rng)?,
        };

        let truth = true_theta
            .iter()
            .map(|x| tape.constant(Tensor::scalar(*x)))
            .collect::<Result<Vec<_>, _>>()?;
        let ll_truth = model.taped_log_likelihood(&mut tape, &truth, control_var, outcome)?;
        log_prob_terms.push(ll_truth);
        let ll = model.taped_log_likelihood(&mut tape, &b.columns, control_var, outcome)?;
        b.log_weights = taped_bayes_update(&mut tape, b.log_weights, ll)?;
        ens.set_log_weights(tape.value(b.log_weights).data().to_vec())?;

        let cost = model.resource_cost(&control).0;
        consumed += cost;
        steps.push(StepRecord {
            features,
            control,
            outcome,
            log_likelihood: tape.item(ll_truth),
            cost,
        });

        if replay.is_none() && cfg.resample_threshold > 0.0 && !prior.is_discrete() {
            let ess = ens.effective_sample_size()?;
            if ess < cfg.resample_threshold * ens.len() as f64 {
                ens = ens.resample(prior, &cfg.liu_west, &mut rng)?;
                let (columns, log_weights) = bind_ensemble(&mut tape, &ens)?;
                b.columns = columns;
                b.log_weights = log_weights;
                resamples += 1;
            }
        }
    }

    if !record {
        tape = Tape::new();
        b = bind(&mut tape, policy, &ens, false)?;
        log_prob_terms.clear();
    }
    let estimate = taped_mean(&mut tape, &ens, b.log_weights)?;
    let log_prob = if log_prob_terms.is_empty() {
        tape.scalar(0.0)?
    } else {
        let all = tape.concat(&log_prob_terms)?;
        tape.sum(all)?
    };
    let trace = EpisodeTrace {
        true_theta,
        steps,
        estimate: tape.value(estimate).data().to_vec(),
        resource_used: consumed,
        posterior: ens,
        resamples,
    };
    Ok(TapedEpisode {
        tape,
        trace,
        params: b.policy.params().to_vec(),
        estimate,
        log_weights: b.log_weights,
        log_prob,
    })
}

impl From<FilterError> for TrainError {
    fn from(e: FilterError) -> Self {
        match e {
            FilterError::Collapse => TrainError::Collapse,
            other => TrainError::Filter(other),
        }
    }
}
