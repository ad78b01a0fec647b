//! Experiment configuration, result files and the comparison of result
//! files. Everything a run needs is in one JSON config.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{feature_len, Architecture, Policy, TrainableAgent};
use crate::particle_filter::LiuWest;
use crate::sensors::{Dolinar, Hyperfine, Interval, Ramsey, SensorModel};
use crate::training::{
    evaluate, train, CurvePoint, EpisodeConfig, EvaluationConfig, HistoryRow, Loss, MeasurementTask, TrainError,
    TrainingConfig,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config is not valid JSON: {0}")]
    Syntax(String),
    #[error("unknown model {0:?}; expected one of ramsey, hyperfine, dolinar")]
    UnknownModel(String),
    #[error("unknown config field {0:?}")]
    UnknownField(String),
    #[error("invalid {field}: {reason}")]
    Field { field: String, reason: String },
    #[error("cannot read {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

fn field_error(field: impl Into<String>, reason: impl ToString) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot read checkpoint {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("checkpoint architecture {found} does not match the configured {expected}")]
    Mismatch { expected: String, found: String },
}

const MODEL_KINDS: [&str; 3] = ["ramsey", "hyperfine", "dolinar"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Ramsey {
        /// Dephasing time; `null` for none.
        #[serde(default)]
        t2: Option<f64>,
        #[serde(default)]
        overhead: f64,
        #[serde(default = "default_tau")]
        tau: Interval,
        #[serde(default = "default_omega")]
        omega: Interval,
    },
    Hyperfine {
        #[serde(default = "default_omega0")]
        omega0: f64,
        #[serde(default = "default_t2")]
        t2: Option<f64>,
        #[serde(default)]
        overhead: f64,
        #[serde(default = "default_tau")]
        tau: Interval,
        #[serde(default = "default_coupling")]
        coupling: Interval,
    },
    Dolinar {
        #[serde(default = "default_mean_photons")]
        mean_photons: f64,
        #[serde(default = "default_segments")]
        segments: usize,
        #[serde(default = "default_beta")]
        beta: Interval,
    },
}

fn default_tau() -> Interval {
    Interval::new(0.1, 100.0)
}
fn default_omega() -> Interval {
    Interval::new(0.0, 1.0)
}
fn default_omega0() -> f64 {
    0.5
}
fn default_t2() -> Option<f64> {
    Some(100.0)
}
fn default_coupling() -> Interval {
    Interval::new(0.0, 0.1)
}
fn default_mean_photons() -> f64 {
    0.2
}
fn default_segments() -> usize {
    8
}
fn default_beta() -> Interval {
    Interval::new(-2.0, 2.0)
}

impl ModelConfig {
    pub fn build(&self) -> Result<Box<dyn SensorModel>, ConfigError> {
        let built: Result<Box<dyn SensorModel>, _> = match self {
            ModelConfig::Ramsey { t2, overhead, tau, omega } => {
                Ramsey::new(*t2, *overhead, *tau, *omega).map(|m| Box::new(m) as Box<dyn SensorModel>)
            }
            ModelConfig::Hyperfine {
                omega0,
                t2,
                overhead,
                tau,
                coupling,
            } => Hyperfine::new(*omega0, *t2, *overhead, *tau, *coupling).map(|m| Box::new(m) as Box<dyn SensorModel>),
            ModelConfig::Dolinar {
                mean_photons,
                segments,
                beta,
            } => Dolinar::new(*mean_photons, *segments, *beta).map(|m| Box::new(m) as Box<dyn SensorModel>),
        };
        built.map_err(|e| field_error("model", e))
    }

    /// Control used by the `static` baseline when the config gives none:
    /// nulling the `+` hypothesis for the Dolinar receiver (the Kennedy
    /// receiver), the bound midpoints otherwise.
    fn default_fixed_control(&self, model: &dyn SensorModel) -> Vec<f64> {
        match self {
            ModelConfig::Dolinar {
                mean_photons, segments, ..
            } => vec![-(mean_photons / *segments as f64).sqrt()],
            _ => model.control_bounds().iter().map(Interval::midpoint).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Mlp,
    /// Trainable list of controls, one per step.
    Schedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub kind: AgentKind,
    /// MLP hidden widths.
    pub hidden: Vec<usize>,
    /// Control of the `static` baseline.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_control: Option<Vec<f64>>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            kind: AgentKind::Mlp,
            hidden: vec![32, 32],
            fixed_control: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub n_particles: usize,
    /// ESS fraction below which the ensemble is resampled; 0 disables.
    pub resample_threshold: f64,
    pub shrinkage: f64,
    pub covariance_floor: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        let lw = LiuWest::default();
        FilterConfig {
            n_particles: 480,
            resample_threshold: 0.5,
            shrinkage: lw.shrinkage,
            covariance_floor: lw.covariance_floor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub agent: AgentConfig,
    /// Evaluation grid, in the model's resource unit.
    pub budgets: Vec<f64>,
    /// Budget of training episodes; the largest grid point when absent.
    pub train_budget: Option<f64>,
    pub max_steps: usize,
    pub training: TrainingConfig,
    pub filter: FilterConfig,
    pub evaluation: EvaluationConfig,
    /// MSE for continuous priors and error probability for discrete ones
    /// when absent.
    pub loss: Option<Loss>,
    pub output_dir: PathBuf,
    pub seed: u64,
}

const FIELDS: [&str; 11] = [
    "model",
    "agent",
    "budgets",
    "train_budget",
    "max_steps",
    "training",
    "filter",
    "evaluation",
    "loss",
    "output_dir",
    "seed",
];

fn section<T: DeserializeOwned>(
    obj: &serde_json::Map<String, serde_json::Value>,
    key: &str,
) -> Result<Option<T>, ConfigError> {
    match obj.get(key) {
        None | Some(serde_json::Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v.clone())
            .map(Some)
            .map_err(|e| field_error(key, e)),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| ConfigError::Syntax("top level must be an object".into()))?;
        let kind = obj
            .get("model")
            .and_then(|m| m.get("kind"))
            .and_then(|k| k.as_str())
            .unwrap_or("");
        if !MODEL_KINDS.contains(&kind) {
            return Err(ConfigError::UnknownModel(kind.to_string()));
        }
        if let Some(k) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
            return Err(ConfigError::UnknownField(k.clone()));
        }
        let config = ExperimentConfig {
            model: section(obj, "model")?.expect("checked above"),
            agent: section(obj, "agent")?.unwrap_or_default(),
            budgets: section(obj, "budgets")?.ok_or_else(|| field_error("budgets", "missing"))?,
            train_budget: section(obj, "train_budget")?,
            max_steps: section(obj, "max_steps")?.unwrap_or(256),
            training: section(obj, "training")?.unwrap_or_default(),
            filter: section(obj, "filter")?.unwrap_or_default(),
            evaluation: section(obj, "evaluation")?.unwrap_or_default(),
            loss: section(obj, "loss")?,
            output_dir: section(obj, "output_dir")?.unwrap_or_else(|| PathBuf::from("out")),
            seed: section(obj, "seed")?.unwrap_or(0),
        };
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        ExperimentConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// A validated config with its model built.
#[derive(Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: Box<dyn SensorModel>,
    pub loss: Loss,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self, ConfigError> {
        let model = config.model.build()?;
        let c = &config;
        if c.budgets.is_empty() || c.budgets.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(field_error("budgets", "need at least one finite positive budget"));
        }
        if c.train_budget.is_some_and(|b| !(b.is_finite() && b > 0.0)) {
            return Err(field_error("train_budget", "must be finite and positive"));
        }
        if c.max_steps == 0 {
            return Err(field_error("max_steps", "must be at least 1"));
        }
        let f = &c.filter;
        if f.n_particles < 2 {
            return Err(field_error("filter.n_particles", "must be at least 2"));
        }
        if !(0.0..=1.0).contains(&f.resample_threshold) {
            return Err(field_error("filter.resample_threshold", "must lie in [0, 1]"));
        }
        if !(f.shrinkage > 0.0 && f.shrinkage <= 1.0) {
            return Err(field_error("filter.shrinkage", "must lie in (0, 1]"));
        }
        if !(f.covariance_floor >= 0.0 && f.covariance_floor.is_finite()) {
            return Err(field_error("filter.covariance_floor", "must be finite and nonnegative"));
        }
        let e = &c.evaluation;
        if e.n_episodes < 100 {
            return Err(field_error("evaluation.n_episodes", "must be at least 100"));
        }
        if e.bootstrap_resamples == 0 {
            return Err(field_error("evaluation.bootstrap_resamples", "must be positive"));
        }
        if !(e.confidence > 0.0 && e.confidence < 1.0) {
            return Err(field_error("evaluation.confidence", "must lie in (0, 1)"));
        }
        c.training.validate().map_err(|e| match e {
            TrainError::Config { field, reason } => field_error(field, reason),
            other => field_error("training", other),
        })?;
        if c.agent.hidden.is_empty() || c.agent.hidden.contains(&0) {
            return Err(field_error("agent.hidden", "need at least one layer, all widths positive"));
        }
        if let Some(fc) = &c.agent.fixed_control {
            if fc.len() != model.d_controls() || fc.iter().any(|x| !x.is_finite()) {
                return Err(field_error("agent.fixed_control", "one finite value per control"));
            }
        }
        let loss = c.loss.clone().unwrap_or(if model.prior().is_discrete() {
            Loss::ErrorProbability
        } else {
            Loss::default()
        });
        loss.validate(model.as_ref()).map_err(|e| field_error("loss", e))?;
        Ok(Experiment { config, model, loss })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Experiment::new(ExperimentConfig::load(path)?)
    }

    pub fn episode_config(&self, budget: f64) -> EpisodeConfig {
        let f = &self.config.filter;
        EpisodeConfig {
            budget,
            max_steps: self.config.max_steps,
            n_particles: f.n_particles,
            resample_threshold: f.resample_threshold,
            liu_west: LiuWest {
                shrinkage: f.shrinkage,
                covariance_floor: f.covariance_floor,
            },
        }
    }

    pub fn train_budget(&self) -> f64 {
        self.config
            .train_budget
            .unwrap_or_else(|| self.config.budgets.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn expected_architecture(&self) -> Architecture {
        match self.config.agent.kind {
            AgentKind::Mlp => Architecture::Mlp {
                inputs: feature_len(self.model.d_params()),
                hidden: self.config.agent.hidden.clone(),
                outputs: self.model.d_controls(),
                activation: crate::agents::Activation::Tanh,
            },
            AgentKind::Schedule => Architecture::Static {
                max_steps: self.config.max_steps,
                controls: self.model.d_controls(),
            },
        }
    }

    /// Untrained agent of the configured kind.
    pub fn initial_agent(&self) -> TrainableAgent {
        let d_c = self.model.d_controls();
        match self.config.agent.kind {
            AgentKind::Mlp => TrainableAgent::mlp(
                feature_len(self.model.d_params()),
                &self.config.agent.hidden,
                d_c,
                self.config.seed,
            ),
            AgentKind::Schedule => TrainableAgent::static_schedule(self.config.max_steps, d_c),
        }
    }

    pub fn load_checkpoint(&self, path: &Path) -> Result<TrainableAgent, CheckpointError> {
        let unreadable = |reason: String| CheckpointError::Unreadable {
            path: path.to_path_buf(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| unreadable(e.to_string()))?;
        let agent: TrainableAgent = serde_json::from_str(&text).map_err(|e| unreadable(e.to_string()))?;
        let expected = self.expected_architecture();
        if agent.architecture() != &expected {
            return Err(CheckpointError::Mismatch {
                expected: serde_json::to_string(&expected).expect("serializes"),
                found: serde_json::to_string(agent.architecture()).expect("serializes"),
            });
        }
        Ok(agent)
    }

    /// Heuristic policy by CLI name.
    pub fn baseline(&self, name: &str) -> Result<Policy, ConfigError> {
        Ok(match name {
            "pgh" => Policy::Pgh,
            "sigma" => Policy::Sigma,
            "random" => Policy::Random,
            "static" => Policy::Fixed(
                self.config
                    .agent
                    .fixed_control
                    .clone()
                    .unwrap_or_else(|| self.config.model.default_fixed_control(self.model.as_ref())),
            ),
            other => {
                return Err(field_error(
                    "baseline",
                    format!("unknown baseline {other:?}; expected pgh, sigma, static or random"),
                ))
            }
        })
    }

    pub fn train(&self, progress: impl FnMut(&HistoryRow)) -> Result<(TrainableAgent, Vec<HistoryRow>), TrainError> {
        let agent = self.initial_agent();
        let task = MeasurementTask {
            model: self.model.as_ref(),
            agent: agent.clone(),
            episode: self.episode_config(self.train_budget()),
            loss: self.loss.clone(),
            seed: self.config.seed,
        };
        let out = train(&task, agent.params(), &self.config.training, progress)?;
        let mut trained = agent;
        trained.set_params(&out.params)?;
        Ok((trained, out.history))
    }

    pub fn evaluate(&self, policy: &Policy) -> Result<Vec<ResultRow>, TrainError> {
        let curve = evaluate(
            self.model.as_ref(),
            policy,
            &self.episode_config(0.0),
            &self.config.budgets,
            &self.loss,
            &self.config.evaluation,
            self.config.seed,
        )?;
        Ok(curve
            .into_iter()
            .map(|p| ResultRow::from_point(&p, policy.name(), self.config.seed))
            .collect())
    }
}

/// One line of a results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub budget: f64,
    pub mean: f64,
    pub median: f64,
    /// Bootstrap interval of the median.
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_episodes: usize,
    pub agent: String,
    pub seed: u64,
}

pub const RESULTS_HEADER: &str = "budget,mean,median,ci_low,ci_high,n_episodes,agent,seed";
pub const HISTORY_HEADER: &str = "iteration,loss_mean,grad_norm,learning_rate,failed";

impl ResultRow {
    pub fn from_point(p: &CurvePoint, agent: &str, seed: u64) -> Self {
        ResultRow {
            budget: p.budget,
            mean: p.mean,
            median: p.median,
            ci_low: p.median_ci.0,
            ci_high: p.median_ci.1,
            n_episodes: p.n_episodes,
            agent: agent.to_string(),
            seed,
        }
    }
}

#[derive(Serialize)]
struct HistoryCsvRow {
    iteration: usize,
    loss_mean: f64,
    grad_norm: f64,
    learning_rate: f64,
    failed: usize,
}

/// Writes into a temporary file next to `path`, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn to_csv<T: Serialize>(rows: &[T], header: &str) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("rows serialize");
    }
    let body = w.into_inner().expect("in-memory writer");
    let mut out = format!("{header}\n").into_bytes();
    out.extend(body);
    out
}

pub fn results_csv(rows: &[ResultRow]) -> Vec<u8> {
    to_csv(rows, RESULTS_HEADER)
}

pub fn history_csv(rows: &[HistoryRow]) -> Vec<u8> {
    let rows: Vec<HistoryCsvRow> = rows
        .iter()
        .map(|r| HistoryCsvRow {
            iteration: r.iteration,
            loss_mean: r.loss_mean,
            grad_norm: r.grad_norm,
            learning_rate: r.learning_rate,
            failed: r.failed,
        })
        .collect();
    to_csv(&rows, HISTORY_HEADER)
}

pub fn checkpoint_json(agent: &TrainableAgent) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(agent).expect("agent serializes");
    s.push('\n');
    s.into_bytes()
}

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("cannot read {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("{path} does not start with the header {RESULTS_HEADER:?}")]
    BadHeader { path: String },
    #[error("need at least two result files, got {0}")]
    TooFewFiles(usize),
    #[error("budget grid of {path} differs from {reference}")]
    GridMismatch { path: String, reference: String },
}

pub fn read_results(path: &str) -> Result<Vec<ResultRow>, CompareError> {
    let unreadable = |reason: String| CompareError::Unreadable {
        path: path.to_string(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| unreadable(e.to_string()))?;
    if text.lines().next() != Some(RESULTS_HEADER) {
        return Err(CompareError::BadHeader { path: path.to_string() });
    }
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<Vec<ResultRow>, _>>()
        .map_err(|e| unreadable(e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Lower loss than the reference with disjoint intervals.
    Win,
    Loss,
    /// Intervals overlap.
    Tie,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparedPoint {
    pub budget: f64,
    /// Median of this file over the reference median.
    pub median_ratio: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparedFile {
    pub path: String,
    pub agent: String,
    pub points: Vec<ComparedPoint>,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub reference: String,
    pub reference_agent: String,
    pub budgets: Vec<f64>,
    pub files: Vec<ComparedFile>,
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else {
        a / b
    }
}

/// Compares every file against the first one, budget by budget.
pub fn compare(files: &[(String, Vec<ResultRow>)]) -> Result<Comparison, CompareError> {
    if files.len() < 2 {
        return Err(CompareError::TooFewFiles(files.len()));
    }
    let (ref_path, reference) = &files[0];
    let grid: Vec<f64> = reference.iter().map(|r| r.budget).collect();
    let mut compared = Vec::new();
    for (path, rows) in files {
        let own: Vec<f64> = rows.iter().map(|r| r.budget).collect();
        if own != grid || grid.is_empty() {
            return Err(CompareError::GridMismatch {
                path: path.clone(),
                reference: ref_path.clone(),
            });
        }
    }
    for (path, rows) in &files[1..] {
        let points: Vec<ComparedPoint> = rows
            .iter()
            .zip(reference)
            .map(|(r, base)| {
                let overlap = r.ci_low <= base.ci_high && base.ci_low <= r.ci_high;
                let verdict = if overlap {
                    Verdict::Tie
                } else if r.median < base.median {
                    Verdict::Win
                } else {
                    Verdict::Loss
                };
                ComparedPoint {
                    budget: r.budget,
                    median_ratio: ratio(r.median, base.median),
                    verdict,
                }
            })
            .collect();
        let count = |v: Verdict| points.iter().filter(|p| p.verdict == v).count();
        compared.push(ComparedFile {
            path: path.clone(),
            agent: rows.first().map(|r| r.agent.clone()).unwrap_or_default(),
            wins: count(Verdict::Win),
            losses: count(Verdict::Loss),
            ties: count(Verdict::Tie),
            points,
        });
    }
    Ok(Comparison {
        reference: ref_path.clone(),
        reference_agent: reference.first().map(|r| r.agent.clone()).unwrap_or_default(),
        budgets: grid,
        files: compared,
    })
}

impl Comparison {
    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut out = format!("reference: {} ({})\n", self.reference, self.reference_agent);
        for f in &self.files {
            out.push_str(&format!("\n{} ({})\n{:>12}  {:>12}  verdict\n", f.path, f.agent, "budget", "median ratio"));
            for p in &f.points {
                let v = match p.verdict {
                    Verdict::Win => "win",
                    Verdict::Loss => "loss",
                    Verdict::Tie => "tie",
                };
                out.push_str(&format!("{:>12}  {:>12.4}  {v}\n", p.budget, p.median_ratio));
            }
            out.push_str(&format!("wins {}  losses {}  ties {}\n", f.wins, f.losses, f.ties));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"model": {"kind": "ramsey"}, "budgets": [10, 20]}"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.max_steps, 256);
        assert_eq!(c.filter.n_particles, 480);
        assert_eq!(c.training.batch_size, 64);
        assert_eq!(c.agent.hidden, vec![32, 32]);
        let e = Experiment::new(c).unwrap();
        assert_eq!(e.loss, Loss::default());
        assert_eq!(e.train_budget(), 20.0);
    }

    #[test]
    fn config_round_trip() {
        let text = r#"{
            "model": {"kind": "hyperfine", "t2": null, "coupling": [0.0, 0.2]},
            "agent": {"kind": "schedule", "fixed_control": [3.5]},
            "budgets": [100, 200.5],
            "train_budget": 150,
            "training": {"batch_size": 8, "learning_rate": 0.01, "estimator": "pathwise_only"},
            "filter": {"n_particles": 100, "resample_threshold": 0.0},
            "loss": {"kind": "mse", "weights": [2.0]},
            "output_dir": "runs/x",
            "seed": 77
        }"#;
        let a = ExperimentConfig::from_json(text).unwrap();
        let b = ExperimentConfig::from_json(&a.to_json()).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.model,
            ModelConfig::Hyperfine {
                omega0: 0.5,
                t2: None,
                overhead: 0.0,
                tau: default_tau(),
                coupling: Interval::new(0.0, 0.2)
            }
        );
    }

    #[test]
    fn config_errors_name_the_field() {
        let missing = ExperimentConfig::from_json(r#"{"budgets": [1]}"#).unwrap_err();
        assert!(missing.to_string().contains("unknown model"));
        let unknown = ExperimentConfig::from_json(r#"{"model": {"kind": "nv"}, "budgets": [1]}"#).unwrap_err();
        assert!(unknown.to_string().contains("unknown model"));
        let typo = ExperimentConfig::from_json(r#"{"model": {"kind": "ramsey"}, "budget": [1]}"#).unwrap_err();
        assert!(typo.to_string().contains("budget"));
        let nested = ExperimentConfig::from_json(r#"{"model": {"kind": "ramsey"}, "budgets": [1], "training": {"lr": 1}}"#)
            .unwrap_err();
        assert!(nested.to_string().contains("training") && nested.to_string().contains("lr"));
        let bad = ExperimentConfig::from_json(r#"{"model": {"kind": "ramsey", "t2": -1}, "budgets": [1]}"#).unwrap();
        assert!(Experiment::new(bad).unwrap_err().to_string().contains("model"));
        let bad = ExperimentConfig::from_json(r#"{"model": {"kind": "ramsey"}, "budgets": [-1]}"#).unwrap();
        assert!(Experiment::new(bad).unwrap_err().to_string().contains("budgets"));
        let bad = ExperimentConfig::from_json(r#"{"model": {"kind": "ramsey"}, "budgets": [1], "loss": {"kind": "error_probability"}}"#)
            .unwrap();
        assert!(Experiment::new(bad).unwrap_err().to_string().contains("loss"));
    }

    #[test]
    fn dolinar_defaults() {
        let c = ExperimentConfig::from_json(r#"{"model": {"kind": "dolinar"}, "budgets": [8]}"#).unwrap();
        let e = Experiment::new(c).unwrap();
        assert_eq!(e.loss, Loss::ErrorProbability);
        let Policy::Fixed(c) = e.baseline("static").unwrap() else {
            panic!("static baseline is a fixed control")
        };
        assert!((c[0] + (0.2f64 / 8.0).sqrt()).abs() < 1e-15);
        assert!(e.baseline("nope").is_err());
    }

    fn row(budget: f64, median: f64, lo: f64, hi: f64) -> ResultRow {
        ResultRow {
            budget,
            mean: median,
            median,
            ci_low: lo,
            ci_high: hi,
            n_episodes: 100,
            agent: "x".into(),
            seed: 1,
        }
    }

    #[test]
    fn results_csv_round_trip() {
        let rows = vec![row(10.0, 0.25, 0.2, 0.3), row(1e3, 1.5e-7, 1e-7, 2.0000000000000004e-7)];
        let bytes = results_csv(&rows);
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("budget,mean,median,ci_low,ci_high,n_episodes,agent,seed\n"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_atomic(&path, &bytes).unwrap();
        assert_eq!(read_results(path.to_str().unwrap()).unwrap(), rows);
    }

    #[test]
    fn comparison_verdicts() {
        let a = vec![row(1.0, 1.0, 0.9, 1.1), row(2.0, 0.5, 0.4, 0.6)];
        let b = vec![row(1.0, 0.5, 0.45, 0.55), row(2.0, 0.55, 0.5, 0.6)];
        let self_cmp = compare(&[("a".into(), a.clone()), ("a".into(), a.clone())]).unwrap();
        assert!(self_cmp.files[0].points.iter().all(|p| p.median_ratio == 1.0 && p.verdict == Verdict::Tie));
        let c = compare(&[("a".into(), a.clone()), ("b".into(), b)]).unwrap();
        assert_eq!(c.files[0].points[0].verdict, Verdict::Win);
        assert_eq!(c.files[0].points[1].verdict, Verdict::Tie);
        assert!((c.files[0].points[1].median_ratio - 1.1).abs() < 1e-12);
        let shifted = vec![row(1.5, 1.0, 0.9, 1.1), row(2.0, 0.5, 0.4, 0.6)];
        assert!(matches!(
            compare(&[("a".into(), a.clone()), ("s".into(), shifted)]),
            Err(CompareError::GridMismatch { .. })
        ));
        assert!(matches!(compare(&[("a".into(), a)]), Err(CompareError::TooFewFiles(1))));
    }
}
