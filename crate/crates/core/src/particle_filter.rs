//! Weighted particle representation of the posterior over the unknown
//! parameters, with log-domain Bayes updates and Liu–West resampling.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Tensor, Var};
use crate::sensors::{Prior, SensorError};

/// Tolerance on `|logsumexp(log_weights)|` for an ensemble to count as
/// normalized.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("an ensemble needs at least 2 particles, got {0}")]
    TooFewParticles(usize),
    #[error("particles must all have dimension {expected}, found {got}")]
    Ragged { expected: usize, got: usize },
    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite particle coordinate")]
    NonFiniteParticle,
    #[error("log-likelihood entry {0} is NaN or +inf")]
    InvalidLikelihood(usize),
    #[error("posterior has zero total mass; the filter collapsed")]
    Collapse,
    #[error("log-weights are not normalized (logsumexp = {0})")]
    Unnormalized(f64),
    #[error("resampling with jitter is undefined for discrete hypotheses")]
    DiscreteSupport,
    #[error(transparent)]
    Prior(#[from] SensorError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

/// Liu–West resampling settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiuWest {
    /// Shrinkage `a`: particles move to `a·θ + (1 − a)·mean` plus jitter of
    /// covariance `(1 − a²)·Σ`.
    pub shrinkage: f64,
    /// Covariance diagonal floor, relative to the squared prior width.
    pub covariance_floor: f64,
}

impl Default for LiuWest {
    fn default() -> Self {
        LiuWest {
            shrinkage: 0.98,
            covariance_floor: 1e-12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSummary {
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub covariance: Vec<f64>,
    pub std: Vec<f64>,
    pub ess: f64,
}

impl PosteriorSummary {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov(&self, i: usize, j: usize) -> f64 {
        self.covariance[i * self.dim() + j]
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    particles: Vec<Vec<f64>>,
    log_weights: Vec<f64>,
}

/// Particles (rows, one parameter vector each) with unnormalized natural-log
/// weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Snapshot", into = "Snapshot")]
pub struct ParticleEnsemble {
    dim: usize,
    particles: Vec<f64>,
    log_weights: Vec<f64>,
}

impl TryFrom<Snapshot> for ParticleEnsemble {
    type Error = FilterError;

    fn try_from(s: Snapshot) -> Result<Self, Self::Error> {
        ParticleEnsemble::from_points(s.particles, Some(s.log_weights))
    }
}

impl From<ParticleEnsemble> for Snapshot {
    fn from(e: ParticleEnsemble) -> Self {
        Snapshot {
            particles: e.particles.chunks(e.dim).map(<[f64]>::to_vec).collect(),
            log_weights: e.log_weights,
        }
    }
}

impl ParticleEnsemble {
    /// Draws `n` particles i.i.d. from a box prior with uniform weights.
    /// A discrete prior is represented exactly: one particle per hypothesis,
    /// `n` is ignored.
    pub fn from_prior<R: Rng + ?Sized>(prior: &Prior, n: usize, rng: &mut R) -> Result<Self, FilterError> {
        match prior {
            Prior::Discrete(points) => ParticleEnsemble::from_points(points.clone(), None),
            Prior::UniformBox(bounds) => {
                if n < 2 {
                    return Err(FilterError::TooFewParticles(n));
                }
                if let Some(b) = bounds.iter().find(|b| !b.is_proper()) {
                    return Err(SensorError::DegeneratePrior {
                        low: b.low,
                        high: b.high,
                    }
                    .into());
                }
                let particles = (0..n).flat_map(|_| prior.sample(rng)).collect();
                Ok(ParticleEnsemble {
                    dim: bounds.len(),
                    particles,
                    log_weights: vec![-(n as f64).ln(); n],
                })
            }
        }
    }

    /// Ensemble on given points. Without explicit log-weights the weights are
    /// uniform; explicit ones are normalized.
    pub fn from_points(points: Vec<Vec<f64>>, log_weights: Option<Vec<f64>>) -> Result<Self, FilterError> {
        let n = points.len();
        if n < 2 {
            return Err(FilterError::TooFewParticles(n));
        }
        let dim = points[0].len();
        if let Some(p) = points.iter().find(|p| p.len() != dim || p.is_empty()) {
            return Err(FilterError::Ragged {
                expected: dim,
                got: p.len(),
            });
        }
        let particles: Vec<f64> = points.into_iter().flatten().collect();
        if particles.iter().any(|x| !x.is_finite()) {
            return Err(FilterError::NonFiniteParticle);
        }
        let mut ens = ParticleEnsemble {
            dim,
            particles,
            log_weights: vec![-(n as f64).ln(); n],
        };
        if let Some(lw) = log_weights {
            ens.set_log_weights(lw)?;
            ens.normalize()?;
        }
        Ok(ens)
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.particles[i * self.dim..(i + 1) * self.dim]
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Coordinate `j` of every particle.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.particles.iter().skip(j).step_by(self.dim).copied().collect()
    }

    /// Normalized linear weights.
    pub fn weights(&self) -> Vec<f64> {
        let lse = crate::autodiff::logsumexp(&self.log_weights);
        self.log_weights.iter().map(|lw| (lw - lse).exp()).collect()
    }

    /// Replaces the log-weights, e.g. with the primal of a taped update.
    pub fn set_log_weights(&mut self, log_weights: Vec<f64>) -> Result<(), FilterError> {
        if log_weights.len() != self.len() {
            return Err(FilterError::LengthMismatch {
                expected: self.len(),
                got: log_weights.len(),
            });
        }
        if let Some(i) = log_weights.iter().position(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(FilterError::InvalidLikelihood(i));
        }
        self.log_weights = log_weights;
        Ok(())
    }

    pub fn normalize(&mut self) -> Result<(), FilterError> {
        let lse = crate::autodiff::logsumexp(&self.log_weights);
        if !lse.is_finite() {
            return Err(FilterError::Collapse);
        }
        for lw in &mut self.log_weights {
            *lw -= lse;
        }
        Ok(())
    }

    /// Bayes' rule in the log domain: add the log-likelihoods, renormalize.
    pub fn bayes_update(&mut self, log_likelihoods: &[f64]) -> Result<(), FilterError> {
        if log_likelihoods.len() != self.len() {
            return Err(FilterError::LengthMismatch {
                expected: self.len(),
                got: log_likelihoods.len(),
            });
        }
        if let Some(i) = log_likelihoods.iter().position(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(FilterError::InvalidLikelihood(i));
        }
        let updated: Vec<f64> = self
            .log_weights
            .iter()
            .zip(log_likelihoods)
            .map(|(w, l)| w + l)
            .collect();
        let lse = crate::autodiff::logsumexp(&updated);
        if !lse.is_finite() {
            return Err(FilterError::Collapse);
        }
        self.log_weights = updated.into_iter().map(|x| x - lse).collect();
        Ok(())
    }

    fn check_normalized(&self) -> Result<(), FilterError> {
        let lse = crate::autodiff::logsumexp(&self.log_weights);
        if lse.abs() <= NORMALIZATION_TOLERANCE {
            Ok(())
        } else {
            Err(FilterError::Unnormalized(lse))
        }
    }

    /// `1 / Σ w_i²` for normalized weights.
    pub fn effective_sample_size(&self) -> Result<f64, FilterError> {
        self.check_normalized()?;
        let sum_sq: f64 = self.log_weights.iter().map(|lw| (2.0 * lw).exp()).sum();
        Ok((1.0 / sum_sq).clamp(1.0, self.len() as f64))
    }

    /// Weighted mean, covariance (normalized by the total weight), per
    /// coordinate standard deviation, and effective sample size.
    pub fn summarize(&self) -> PosteriorSummary {
        let d = self.dim;
        let w = self.weights();
        let mut mean = vec![0.0; d];
        for (i, wi) in w.iter().enumerate() {
            for (m, x) in mean.iter_mut().zip(self.particle(i)) {
                *m += wi * x;
            }
        }
        let mut covariance = vec![0.0; d * d];
        for (i, wi) in w.iter().enumerate() {
            let p = self.particle(i);
            for a in 0..d {
                let da = p[a] - mean[a];
                for b in a..d {
                    covariance[a * d + b] += wi * da * (p[b] - mean[b]);
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                covariance[a * d + b] = covariance[b * d + a];
            }
        }
        let std = (0..d).map(|a| covariance[a * d + a].max(0.0).sqrt()).collect();
        let sum_sq: f64 = w.iter().map(|x| x * x).sum();
        PosteriorSummary {
            mean,
            covariance,
            std,
            ess: (1.0 / sum_sq).clamp(1.0, self.len() as f64),
        }
    }

    /// Systematic resampling followed by Liu–West jitter; weights become
    /// uniform and jittered particles are clipped to the prior's support.
    pub fn resample<R: Rng + ?Sized>(&self, prior: &Prior, config: &LiuWest, rng: &mut R) -> Result<Self, FilterError> {
        if prior.is_discrete() {
            return Err(FilterError::DiscreteSupport);
        }
        self.check_normalized()?;
        let n = self.len();
        let d = self.dim;
        let summary = self.summarize();
        let a = config.shrinkage;

        let mut cov = summary.covariance.clone();
        for (j, b) in prior.bounds().iter().enumerate() {
            let floor = config.covariance_floor * b.width() * b.width();
            cov[j * d + j] = cov[j * d + j].max(floor);
        }
        let scale = 1.0 - a * a;
        let chol = cholesky(&cov.iter().map(|c| c * scale).collect::<Vec<_>>(), d);

        let indices = systematic_indices(&self.weights(), n, rng.random::<f64>());
        let mut particles = Vec::with_capacity(n * d);
        let mut z = vec![0.0; d];
        for &i in &indices {
            let src = self.particle(i);
            for zj in z.iter_mut() {
                *zj = StandardNormal.sample(rng);
            }
            let start = particles.len();
            for r in 0..d {
                let jitter: f64 = (0..=r).map(|c| chol[r * d + c] * z[c]).sum();
                particles.push(a * src[r] + (1.0 - a) * summary.mean[r] + jitter);
            }
            prior.clip(&mut particles[start..]);
        }
        Ok(ParticleEnsemble {
            dim: d,
            particles,
            log_weights: vec![-(n as f64).ln(); n],
        })
    }
}

/// Lower Cholesky factor of a small symmetric matrix. Falls back to the
/// square root of the clamped diagonal when the matrix is not positive
/// definite.
fn cholesky(m: &[f64], d: usize) -> Vec<f64> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum();
            if i == j {
                let v = m[i * d + i] - s;
                if !(v > 0.0) {
                    return (0..d * d)
                        .map(|k| if k % (d + 1) == 0 { m[k].max(0.0).sqrt() } else { 0.0 })
                        .collect();
                }
                l[i * d + i] = v.sqrt();
            } else {
                l[i * d + j] = (m[i * d + j] - s) / l[j * d + j];
            }
        }
    }
    l
}

/// Indices selected by systematic resampling with offset `u ∈ [0, 1)`.
pub fn systematic_indices(weights: &[f64], n: usize, u: f64) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(n);
    let mut cumulative = weights[0] / total;
    let mut i = 0;
    for k in 0..n {
        let position = (u + k as f64) / n as f64;
        while position >= cumulative && i + 1 < weights.len() {
            i += 1;
            cumulative += weights[i] / total;
        }
        out.push(i);
    }
    out
}

/// Differentiable Bayes update: `log_weights + log_likelihoods`, renormalized
/// through a taped logsumexp.
pub fn taped_bayes_update(tape: &mut Tape, log_weights: Var, log_likelihoods: Var) -> Result<Var, FilterError> {
    let updated = tape.add(log_weights, log_likelihoods)?;
    if let Some(i) = tape
        .value(updated)
        .data()
        .iter()
        .position(|x| x.is_nan() || *x == f64::INFINITY)
    {
        return Err(FilterError::InvalidLikelihood(i));
    }
    let lse = tape.logsumexp(updated)?;
    if !tape.item(lse).is_finite() {
        return Err(FilterError::Collapse);
    }
    Ok(tape.sub(updated, lse)?)
}

/// Posterior mean on the tape given normalized taped log-weights over the
/// (constant) particles of `ensemble`.
pub fn taped_mean(tape: &mut Tape, ensemble: &ParticleEnsemble, log_weights: Var) -> Result<Var, FilterError> {
    let w = tape.exp(log_weights)?;
    let coords = (0..ensemble.dim())
        .map(|j| {
            let col = tape.constant(Tensor::vector(ensemble.column(j)))?;
            let weighted = tape.mul(w, col)?;
            tape.sum(weighted)
        })
        .collect::<Result<Vec<_>, AdError>>()?;
    Ok(tape.concat(&coords)?)
}
