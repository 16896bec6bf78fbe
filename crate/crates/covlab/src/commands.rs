//! Subcommand implementations.

use std::path::{Path, PathBuf};

use dpm_covlab_core::elbo::{self, ElboReport, Mode};
use dpm_covlab_core::net::{self, LossKind, PredictorBundle, TrainLog, TrainingDomain};
use dpm_covlab_core::sampler::{self, SampleConfig};
use dpm_covlab_core::trajectory::{self, CostMatrix, Trajectory};
use dpm_covlab_core::{Jump, ProcessKind, Schedule};
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint;
use crate::config::{self, ExperimentConfig, Head, TrajectoryChoice};
use crate::error::{CliError, CliResult};
use crate::models::{self, Context, Model};

/// Flags shared by the configuration-driven subcommands.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub config: PathBuf,
    pub seed: Option<u64>,
    /// 0 runs everything on the calling thread.
    pub threads: usize,
    pub out: Option<PathBuf>,
}

pub struct Setup {
    pub config: ExperimentConfig,
    pub schedule: Schedule,
    pub process: ProcessKind,
    pub threads: usize,
}

impl Setup {
    pub fn load(opts: &Options) -> CliResult<Self> {
        let mut config = config::load(&opts.config)?;
        if let Some(seed) = opts.seed {
            config.seed = seed;
        }
        if let Some(out) = &opts.out {
            config.output = out.clone();
        }
        Self::from_config(config, opts.threads)
    }

    pub fn from_config(config: ExperimentConfig, threads: usize) -> CliResult<Self> {
        let schedule = config.schedule.build().map_err(|e| CliError::config(e.to_string()))?;
        let process = config.process.build(&schedule).map_err(|e| CliError::config(e.to_string()))?;
        Ok(Self { config, schedule, process, threads })
    }

    fn out_dir(&self) -> CliResult<&Path> {
        std::fs::create_dir_all(&self.config.output)?;
        Ok(&self.config.output)
    }

    fn context(&self) -> Context<'_> {
        Context {
            spec: &self.config.spec,
            schedule: &self.schedule,
            checkpoints: self.config.checkpoint_dir(),
            oracle_bias: self.config.eval.oracle_bias,
            analytic_mc: self.config.eval.analytic_mc,
            seed: self.config.seed,
        }
    }

    /// Runs `f` on a pool of the configured size, or inline for 0 threads.
    fn parallel<T: Send>(&self, f: impl FnOnce() -> T + Send) -> CliResult<T> {
        if self.threads == 0 {
            return Ok(f());
        }
        let pool = rayon::ThreadPoolBuilder::new().num_threads(self.threads).build().map_err(anyhow::Error::from)?;
        Ok(pool.install(f))
    }

    fn reject_degenerate(&self) -> CliResult<()> {
        if self.process == ProcessKind::Ddim {
            return Err(CliError::config(
                "process ddim has zero forward variance on latent jumps, so the negative ELBO is infinite",
            ));
        }
        Ok(())
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

#[derive(Serialize)]
struct LossRow {
    iteration: usize,
    loss: f64,
}

fn write_losses(path: &Path, log: &TrainLog) -> CliResult<()> {
    let rows: Vec<LossRow> = log.losses.iter().enumerate().map(|(i, l)| LossRow { iteration: i + 1, loss: *l }).collect();
    write_csv(path, &rows)
}

/// Stage one (unless resuming), then each configured auxiliary head.
pub fn train(setup: &Setup) -> CliResult<Vec<PathBuf>> {
    let c = &setup.config;
    let dir = c.checkpoint_dir().to_path_buf();
    std::fs::create_dir_all(&dir)?;
    let out = setup.out_dir()?.to_path_buf();
    let domain = TrainingDomain::Discrete(&setup.schedule);
    let mut written = Vec::new();
    let stage1 = match &c.train.resume {
        Some(path) => {
            let b = checkpoint::load_for(path, c.spec.dim()).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
            if let Some(w) = checkpoint::schedule_warning(&b, &setup.schedule) {
                log::warn!("{}: {w}", path.display());
            }
            log::info!("resuming from {}", path.display());
            b
        }
        None => {
            let mut cfg = c.train.stage1;
            cfg.seed = c.seed;
            log::info!("stage 1: {} iterations", cfg.iterations);
            let (b, log) = net::train_eps(c.net.build(c.spec.dim()), &c.spec, &domain, &cfg)?;
            log::info!("stage 1 final loss {:.6}", log.final_loss());
            write_losses(&out.join("loss_stage1.csv"), &log)?;
            b
        }
    };
    let eps_path = dir.join("eps.json");
    checkpoint::save(&stage1, &eps_path)?;
    written.push(eps_path);
    for head in &c.train.heads {
        let mut cfg = c.train.stage2;
        cfg.seed = c.seed;
        let (bundle, log, name): (PredictorBundle, TrainLog, &str) = match head {
            Head::Sn => {
                let (b, l) = net::train_sn(&stage1, &c.spec, &domain, &cfg)?;
                (b, l, "sn")
            }
            Head::Npr => {
                let (b, l) = net::train_npr(&stage1, &c.spec, &domain, &cfg, None)?;
                (b, l, "npr")
            }
        };
        log::info!("stage 2 ({name}) final loss {:.6}", log.final_loss());
        write_losses(&out.join(format!("loss_{name}.csv")), &log)?;
        let path = dir.join(format!("{name}.json"));
        checkpoint::save(&bundle, &path)?;
        written.push(path);
    }
    Ok(written)
}

fn cost_matrix(setup: &Setup, model: &Model, mc: usize) -> CliResult<CostMatrix> {
    let n = setup.schedule.steps();
    let reverse = model.reverse();
    let seed = setup.config.seed;
    let column = |t: usize| trajectory::cost_column(&reverse, &setup.schedule, &setup.process, &setup.config.spec, t, mc, seed);
    let columns = if setup.threads == 0 {
        (1..=n).map(column).collect::<dpm_covlab_core::Result<Vec<_>>>()
    } else {
        setup.parallel(|| (1..=n).into_par_iter().map(column).collect::<dpm_covlab_core::Result<Vec<_>>>())?
    }?;
    Ok(CostMatrix::from_columns(columns)?)
}

fn trajectory_for(setup: &Setup, kind: &str, k: usize, cost: Option<&CostMatrix>) -> CliResult<Trajectory> {
    let n = setup.schedule.steps();
    Ok(match kind {
        "OT" => trajectory::optimal_trajectory_dp(cost.expect("cost matrix for optimal trajectories"), k)?.0,
        _ => trajectory::even_trajectory(n, k)?,
    })
}

fn tau_string(t: &Trajectory) -> String {
    t.steps().iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct ElboRow {
    pub model: String,
    pub mode: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub trajectory: String,
    pub value: f64,
    pub stderr: f64,
    pub seed: u64,
    #[serde(rename = "M")]
    pub m: usize,
    pub tau: String,
}

fn evaluate(setup: &Setup, model: &Model, jumps: &[Jump]) -> CliResult<ElboReport> {
    let c = &setup.config;
    let kernel = |j: &Jump, x: &[f64]| model.kernel(j, x);
    Ok(match c.eval.mode {
        Mode::Direct => elbo::elbo_direct(jumps, &kernel, &c.spec, c.eval.mc, c.seed)?,
        Mode::Reduced => elbo::elbo_reduced_absolute(jumps, &kernel, &c.spec, c.eval.mc, c.seed)?,
    })
}

/// Negative ELBO per model, jump count and trajectory kind. Every model is
/// evaluated on the same seed, so rows are paired.
pub fn eval_elbo(setup: &Setup) -> CliResult<Vec<ElboRow>> {
    setup.reject_degenerate()?;
    let c = &setup.config;
    let n = setup.schedule.steps();
    let ctx = setup.context();
    let models = c.eval.models.iter().map(|m| models::build(m, &ctx)).collect::<CliResult<Vec<_>>>()?;
    let needs_cost = c.eval.trajectory != TrajectoryChoice::Even;
    let run_model = |model: &Model| -> CliResult<Vec<ElboRow>> {
        let cost = if needs_cost { Some(cost_matrix(setup, model, c.eval.cost_mc)?) } else { None };
        let mut rows = Vec::new();
        for &k in &c.eval.k {
            let k = c.resolve_k(k, n);
            for kind in c.eval.trajectory.kinds() {
                let traj = trajectory_for(setup, kind, k, cost.as_ref())?;
                let jumps = trajectory::restrict(&setup.schedule, &setup.process, &traj)?;
                let report = evaluate(setup, model, &jumps)?;
                log::info!("{} K={k} {kind}: {:.5} ± {:.5}", model.name, report.total, report.stderr);
                rows.push(ElboRow {
                    model: model.name.clone(),
                    mode: c.eval.mode.as_str().into(),
                    k,
                    trajectory: kind.to_string(),
                    value: report.total,
                    stderr: report.stderr,
                    seed: c.seed,
                    m: c.eval.mc,
                    tau: tau_string(&traj),
                });
            }
        }
        Ok(rows)
    };
    let per_model: Vec<CliResult<Vec<ElboRow>>> = if setup.threads == 0 {
        models.iter().map(run_model).collect()
    } else {
        setup.parallel(|| models.par_iter().map(run_model).collect())?
    };
    let mut rows = Vec::new();
    for r in per_model {
        rows.extend(r?);
    }
    write_csv(&setup.out_dir()?.join("elbo.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Serialize)]
pub struct SampleReport {
    pub model: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub trajectory: String,
    pub tau: Vec<usize>,
    pub seed: u64,
    pub batch: usize,
    pub noiseless_final: bool,
    pub clip: Option<sampler::ClipConfig>,
    pub metrics: sampler::SampleMetrics,
}

pub fn sample(setup: &Setup) -> CliResult<SampleReport> {
    let c = &setup.config;
    let s = &c.sample;
    let n = setup.schedule.steps();
    let k = c.resolve_k(s.k, n);
    let model = models::build(&s.model, &setup.context())?;
    let kind = match s.trajectory {
        TrajectoryChoice::Optimal => "OT",
        _ => "ET",
    };
    let cost = if kind == "OT" {
        setup.reject_degenerate()?;
        Some(cost_matrix(setup, &model, c.eval.cost_mc)?)
    } else {
        None
    };
    let traj = trajectory_for(setup, kind, k, cost.as_ref())?;
    let jumps = trajectory::restrict(&setup.schedule, &setup.process, &traj)?;
    let cfg = SampleConfig { batch: s.batch, clip: s.clip, noiseless_final: s.noiseless_final, record: false };
    let kernel = |j: &Jump, x: &[f64]| model.kernel(j, x);
    let run = sampler::ancestral_sample(&kernel, &jumps, c.spec.dim(), &cfg, c.seed, &model.name)?;
    let metrics = sampler::sample_metrics(&run.samples, &c.spec)?;
    let out = setup.out_dir()?;
    let mut w = csv::Writer::from_path(out.join("samples.csv"))?;
    w.write_record((0..c.spec.dim()).map(|i| format!("x{i}")))?;
    for x in &run.samples {
        w.write_record(x.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    let report = SampleReport {
        model: model.name.clone(),
        k,
        trajectory: kind.into(),
        tau: traj.steps().to_vec(),
        seed: c.seed,
        batch: s.batch,
        noiseless_final: s.noiseless_final,
        clip: s.clip,
        metrics,
    };
    write_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct TrajectoryEntry {
    #[serde(rename = "K")]
    pub k: usize,
    pub optimal: Vec<usize>,
    pub optimal_cost: f64,
    pub even: Vec<usize>,
    pub even_cost: f64,
}

#[derive(Debug, Serialize)]
pub struct TrajectoryReport {
    pub model: String,
    pub seed: u64,
    #[serde(rename = "M")]
    pub m: usize,
    pub prior: f64,
    pub trajectories: Vec<TrajectoryEntry>,
}

#[derive(Serialize)]
struct CostRow {
    s: usize,
    t: usize,
    value: f64,
    stderr: f64,
}

pub fn trajectory(setup: &Setup) -> CliResult<TrajectoryReport> {
    setup.reject_degenerate()?;
    let c = &setup.config;
    let n = setup.schedule.steps();
    let model = models::build(&c.trajectory.model, &setup.context())?;
    let cost = cost_matrix(setup, &model, c.trajectory.mc)?;
    let mut entries = Vec::new();
    for &k in &c.trajectory.k {
        let k = c.resolve_k(k, n);
        let (opt, opt_cost) = trajectory::optimal_trajectory_dp(&cost, k)?;
        let even = trajectory::even_trajectory(n, k)?;
        entries.push(TrajectoryEntry {
            k,
            optimal: opt.steps().to_vec(),
            optimal_cost: opt_cost,
            even_cost: trajectory::trajectory_cost(&cost, &even),
            even: even.steps().to_vec(),
        });
    }
    let out = setup.out_dir()?;
    let rows: Vec<CostRow> = (1..=n)
        .flat_map(|t| (0..t).map(move |s| (s, t)))
        .map(|(s, t)| CostRow { s, t, value: cost.get(s, t), stderr: cost.stderr(s, t) })
        .collect();
    write_csv(&out.join("cost.csv"), &rows)?;
    let report = TrajectoryReport {
        model: model.name.clone(),
        seed: c.seed,
        m: c.trajectory.mc,
        prior: trajectory::prior_term(&setup.schedule, &c.spec),
        trajectories: entries,
    };
    write_json(&out.join("trajectory.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PlotRow {
    pub series: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub value: f64,
    pub stderr: f64,
}

/// Long-format union of every CSV in `dir` that has `K`, `value` and
/// `stderr` columns. The series name joins the `series`/`model`, `mode` and
/// `trajectory` columns that are present. Files are read in name order and a
/// repeated `(series, K)` keeps the last row read.
pub fn plot_data(dir: &Path, out: &Path) -> CliResult<Vec<PlotRow>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::config(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv") && p != out)
        .collect();
    files.sort();
    let mut rows: Vec<PlotRow> = Vec::new();
    let mut used = 0;
    for file in &files {
        let mut r = csv::Reader::from_path(file)?;
        let headers = r.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (Some(ki), Some(vi), Some(si)) = (col("K"), col("value"), col("stderr")) else {
            log::debug!("skipping {}: no K/value/stderr columns", file.display());
            continue;
        };
        used += 1;
        let name_cols: Vec<usize> =
            ["series", "model", "mode", "trajectory"].iter().filter_map(|n| col(n)).collect();
        let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for record in r.records() {
            let record = record?;
            let parse = |i: usize| -> CliResult<f64> {
                record[i].parse::<f64>().map_err(|e| CliError::Runtime(anyhow::anyhow!("{}: {e}", file.display())))
            };
            let series = if name_cols.is_empty() {
                stem.clone()
            } else {
                name_cols.iter().map(|&i| &record[i]).collect::<Vec<_>>().join("/")
            };
            let k = record[ki].parse::<usize>().map_err(|e| CliError::Runtime(anyhow::anyhow!("{}: {e}", file.display())))?;
            let row = PlotRow { series, k, value: parse(vi)?, stderr: parse(si)? };
            if let Some(existing) = rows.iter_mut().find(|x| x.series == row.series && x.k == row.k) {
                log::warn!("duplicate series {} at K = {}; keeping the value from {}", row.series, row.k, file.display());
                *existing = row;
            } else {
                rows.push(row);
            }
        }
    }
    if used == 0 {
        return Err(CliError::config(format!("{} contains no result tables", dir.display())));
    }
    rows.sort_by(|a, b| a.series.cmp(&b.series).then(a.k.cmp(&b.k)));
    write_csv(out, &rows)?;
    Ok(rows)
}

/// Loss kinds in the order they are reported by `verify`.
pub const LOSS_KINDS: [LossKind; 3] = [LossKind::Eps, LossKind::Sn, LossKind::Npr];
