use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::Policy;
use crate::rng::{stream, Purpose};
use crate::sensors::SensorModel;

use super::{run_episode, EpisodeConfig, EpisodeSeed, Loss, TrainError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub n_episodes: usize,
    pub bootstrap_resamples: usize,
    /// Two-sided coverage of the bootstrap intervals.
    pub confidence: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            n_episodes: 1000,
            bootstrap_resamples: 1000,
            confidence: 0.9,
        }
    }
}

/// Loss statistics at one budget.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub budget: f64,
    pub mean: f64,
    pub median: f64,
    /// Bootstrap interval of the median, widened if needed to contain the
    /// sample median.
    pub median_ci: (f64, f64),
    pub mean_ci: (f64, f64),
    pub n_episodes: usize,
}

/// Runs `n_episodes` untaped episodes at each budget. Episode `e` draws the
/// same true parameters at every budget.
pub fn evaluate(
    model: &dyn SensorModel,
    policy: &Policy,
    episode: &EpisodeConfig,
    budgets: &[f64],
    loss: &Loss,
    config: &EvaluationConfig,
    seed: u64,
) -> Result<Vec<CurvePoint>, TrainError> {
    if config.n_episodes < 2 {
        return Err(TrainError::Config {
            field: "evaluation.n_episodes",
            reason: "need at least 2 episodes".into(),
        });
    }
    budgets
        .iter()
        .enumerate()
        .map(|(k, &budget)| {
            let cfg = EpisodeConfig {
                budget,
                ..episode.clone()
            };
            let losses = (0..config.n_episodes)
                .into_par_iter()
                .map(|e| run_episode(model, policy, &cfg, EpisodeSeed::eval(seed, e)).map(|t| loss.evaluate(&t)))
                .collect::<Result<Vec<f64>, TrainError>>()?;
            if let Some(e) = losses.iter().position(|l| !l.is_finite()) {
                return Err(TrainError::NonFinite {
                    what: "evaluation loss",
                    iteration: k,
                    episode: e,
                    seed,
                });
            }
            let mut rng = stream(seed, Purpose::Bootstrap, k as u64);
            let (median_ci, mean_ci) = bootstrap_ci(&losses, config.bootstrap_resamples, config.confidence, &mut rng);
            let med = median(&losses);
            Ok(CurvePoint {
                budget,
                mean: losses.iter().sum::<f64>() / losses.len() as f64,
                median: med,
                median_ci: (median_ci.0.min(med), median_ci.1.max(med)),
                mean_ci,
                n_episodes: losses.len(),
            })
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap intervals for the median and the mean, from the same
/// resamples.
pub fn bootstrap_ci<R: Rng + ?Sized>(
    values: &[f64],
    resamples: usize,
    confidence: f64,
    rng: &mut R,
) -> ((f64, f64), (f64, f64)) {
    let n = values.len();
    let mut medians = Vec::with_capacity(resamples);
    let mut means = Vec::with_capacity(resamples);
    let mut draw = vec![0.0; n];
    for _ in 0..resamples {
        for d in draw.iter_mut() {
            *d = values[rng.random_range(0..n)];
        }
        means.push(draw.iter().sum::<f64>() / n as f64);
        medians.push(median(&draw));
    }
    medians.sort_by(f64::total_cmp);
    means.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - confidence);
    (
        (quantile(&medians, tail), quantile(&medians, 1.0 - tail)),
        (quantile(&means, tail), quantile(&means, 1.0 - tail)),
    )
}
