//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use dpm_covlab_core::elbo::Mode;
use dpm_covlab_core::net::{NetConfig, TrainConfig};
use dpm_covlab_core::sampler::ClipConfig;
use dpm_covlab_core::{GmmSpec, ProcessKind, Schedule};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub spec: GmmSpec,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub process: ProcessConfig,
    #[serde(default)]
    pub net: NetSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub trajectory: TrajectorySection,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Where checkpoints are written and read; defaults to `output`.
    #[serde(default)]
    pub checkpoints: Option<PathBuf>,
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScheduleConfig {
    Linear { steps: usize },
    Explicit { beta: Vec<f64> },
}

impl ScheduleConfig {
    pub fn build(&self) -> dpm_covlab_core::Result<Schedule> {
        match self {
            ScheduleConfig::Linear { steps } => Schedule::linear(*steps),
            ScheduleConfig::Explicit { beta } => Schedule::from_betas(beta.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessConfig {
    #[default]
    Ddpm,
    Ddim,
    Custom(Vec<f64>),
}

impl ProcessConfig {
    pub fn build(&self, schedule: &Schedule) -> dpm_covlab_core::Result<ProcessKind> {
        match self {
            ProcessConfig::Ddpm => Ok(ProcessKind::Ddpm),
            ProcessConfig::Ddim => Ok(ProcessKind::Ddim),
            ProcessConfig::Custom(l) => ProcessKind::custom(schedule, l.clone()),
        }
    }
}

/// Network shape; the data dimension comes from the mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub embed_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub head_hidden: usize,
    pub head_skip: bool,
    pub cross: bool,
}

impl Default for NetSection {
    fn default() -> Self {
        let c = NetConfig::new(1);
        Self { embed_dim: c.embed_dim, hidden: c.hidden, depth: c.depth, head_hidden: c.head_hidden, head_skip: c.head_skip, cross: c.cross }
    }
}

impl NetSection {
    pub fn build(&self, dim: usize) -> NetConfig {
        NetConfig {
            dim,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            depth: self.depth,
            head_hidden: self.head_hidden,
            head_skip: self.head_skip,
            cross: self.cross,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Sn,
    Npr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Noise-prediction stage. Its `seed` is replaced by the experiment seed.
    pub stage1: TrainConfig,
    /// Auxiliary-head stage, same convention.
    pub stage2: TrainConfig,
    pub heads: Vec<Head>,
    /// Skip stage one and start from this noise-prediction checkpoint.
    pub resume: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let mut stage = TrainConfig::new(20_000, 0);
        stage.cosine_decay = true;
        Self { stage1: stage, stage2: stage, heads: vec![Head::Sn, Head::Npr], resume: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryChoice {
    Even,
    Optimal,
    Both,
}

impl TrajectoryChoice {
    pub fn kinds(&self) -> &'static [&'static str] {
        match self {
            TrajectoryChoice::Even => &["ET"],
            TrajectoryChoice::Optimal => &["OT"],
            TrajectoryChoice::Both => &["ET", "OT"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// `source:rule`, e.g. `oracle:npr` or `net:sn`.
    pub models: Vec<String>,
    /// Jump counts; 0 stands for the full schedule.
    pub k: Vec<usize>,
    pub trajectory: TrajectoryChoice,
    pub mode: Mode,
    /// Forward chains (direct) or states per jump (reduced).
    pub mc: usize,
    /// States per cost-matrix column when optimal trajectories are needed.
    pub cost_mc: usize,
    /// States per level for the isotropic variance table.
    pub analytic_mc: usize,
    /// Offset added to the oracle noise mean for `biased:*` models.
    pub oracle_bias: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            models: vec!["oracle:analytic".into(), "oracle:sn".into(), "oracle:npr".into()],
            k: vec![2, 5, 10],
            trajectory: TrajectoryChoice::Both,
            mode: Mode::Direct,
            mc: 2000,
            cost_mc: 500,
            analytic_mc: 2000,
            oracle_bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub model: String,
    /// Jump count; 0 stands for the full schedule.
    pub k: usize,
    pub trajectory: TrajectoryChoice,
    pub batch: usize,
    pub clip: Option<ClipConfig>,
    pub noiseless_final: bool,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            model: "oracle:npr".into(),
            k: 10,
            trajectory: TrajectoryChoice::Even,
            batch: 1000,
            clip: None,
            noiseless_final: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySection {
    pub model: String,
    pub k: Vec<usize>,
    pub mc: usize,
}

impl Default for TrajectorySection {
    fn default() -> Self {
        Self { model: "oracle:npr".into(), k: vec![5, 10], mc: 500 }
    }
}

/// Parses a configuration, reporting syntax and validation problems with
/// their line and column.
pub fn parse(text: &str) -> CliResult<ExperimentConfig> {
    let config: ExperimentConfig =
        serde_json::from_str(text).map_err(|e| CliError::config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
    validate(&config, text)?;
    Ok(config)
}

pub fn load(path: &Path) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    parse(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// 1-based line of the first occurrence of `"key"`, if any.
fn line_of(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

fn at(text: &str, key: &str, msg: String) -> CliError {
    match line_of(text, key) {
        Some(line) => CliError::config(format!("line {line}: {key}: {msg}")),
        None => CliError::config(format!("{key}: {msg}")),
    }
}

fn validate(config: &ExperimentConfig, text: &str) -> CliResult<()> {
    let schedule = config.schedule.build().map_err(|e| at(text, "schedule", e.to_string()))?;
    config.process.build(&schedule).map_err(|e| at(text, "process", e.to_string()))?;
    config.net.build(config.spec.dim()).validate().map_err(|e| at(text, "net", e.to_string()))?;
    for stage in [&config.train.stage1, &config.train.stage2] {
        stage.validate().map_err(|e| at(text, "train", e.to_string()))?;
    }
    if let Some(resume) = &config.train.resume {
        if !resume.exists() {
            return Err(at(text, "resume", format!("{} does not exist", resume.display())));
        }
    }
    for name in config.eval.models.iter().chain([&config.sample.model, &config.trajectory.model]) {
        crate::models::ModelName::parse(name).map_err(|e| at(text, "models", e))?;
    }
    let n = schedule.steps();
    for &k in config.eval.k.iter().chain(&config.trajectory.k).chain([&config.sample.k]) {
        if k > n {
            return Err(at(text, "k", format!("{k} jumps exceed the {n} schedule steps")));
        }
    }
    for (key, v) in [("mc", config.eval.mc), ("cost_mc", config.eval.cost_mc), ("analytic_mc", config.eval.analytic_mc), ("batch", config.sample.batch)] {
        if v == 0 {
            return Err(at(text, key, "must be positive".into()));
        }
    }
    if config.trajectory.mc == 0 {
        return Err(at(text, "mc", "must be positive".into()));
    }
    if !config.eval.oracle_bias.is_finite() {
        return Err(at(text, "oracle_bias", "must be finite".into()));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn checkpoint_dir(&self) -> &Path {
        self.checkpoints.as_deref().unwrap_or(&self.output)
    }

    /// Jump count with 0 meaning every step.
    pub fn resolve_k(&self, k: usize, steps: usize) -> usize {
        if k == 0 {
            steps
        } else {
            k
        }
    }
}
