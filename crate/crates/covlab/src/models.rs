//! Reverse models named `source:rule`.
//!
//! Sources: `oracle` (exact mixture moments), `biased` (oracle with the
//! configured mean offset) and `net` (trained checkpoints). Rules:
//! `analytic`, `sn`, `npr`, `full` and `forward`.

use std::path::Path;

use dpm_covlab_core::estimator::{AnalyticTable, CovarianceRule, MomentProvider, Oracle, ReverseKernel, ReverseModel};
use dpm_covlab_core::{GmmSpec, Jump, Schedule};

use crate::checkpoint;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Oracle,
    Biased,
    Net,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    Analytic,
    Sn,
    Npr,
    Full,
    Forward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelName {
    pub source: Source,
    pub rule: Rule,
}

impl ModelName {
    pub fn parse(name: &str) -> Result<Self, String> {
        let (source, rule) = name.split_once(':').ok_or_else(|| format!("model {name:?} is not of the form source:rule"))?;
        let source = match source {
            "oracle" => Source::Oracle,
            "biased" => Source::Biased,
            "net" => Source::Net,
            other => return Err(format!("unknown model source {other:?} (oracle, biased, net)")),
        };
        let rule = match rule {
            "analytic" => Rule::Analytic,
            "sn" => Rule::Sn,
            "npr" => Rule::Npr,
            "full" => Rule::Full,
            "forward" => Rule::Forward,
            other => return Err(format!("unknown covariance rule {other:?} (analytic, sn, npr, full, forward)")),
        };
        Ok(Self { source, rule })
    }
}

/// Everything needed to instantiate models.
pub struct Context<'a> {
    pub spec: &'a GmmSpec,
    pub schedule: &'a Schedule,
    pub checkpoints: &'a Path,
    pub oracle_bias: f64,
    pub analytic_mc: usize,
    pub seed: u64,
}

pub struct Model {
    pub name: String,
    provider: Box<dyn MomentProvider>,
    rule: CovarianceRule,
}

impl Model {
    pub fn reverse(&self) -> ReverseModel<'_> {
        ReverseModel::new(self.provider.as_ref(), self.rule.clone())
    }

    pub fn kernel(&self, jump: &Jump, x: &[f64]) -> dpm_covlab_core::Result<ReverseKernel> {
        self.reverse().kernel(jump, x)
    }

    pub fn provider(&self) -> &dyn MomentProvider {
        self.provider.as_ref()
    }
}

fn load_net(ctx: &Context<'_>, file: &str) -> CliResult<Box<dyn MomentProvider>> {
    let path = ctx.checkpoints.join(file);
    if !path.exists() {
        return Err(CliError::Runtime(anyhow::anyhow!("missing checkpoint {}", path.display())));
    }
    let bundle = checkpoint::load_for(&path, ctx.spec.dim()).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    if let Some(w) = checkpoint::schedule_warning(&bundle, ctx.schedule) {
        log::warn!("{}: {w}", path.display());
    }
    Ok(Box::new(bundle))
}

pub fn build(name: &str, ctx: &Context<'_>) -> CliResult<Model> {
    let parsed = ModelName::parse(name).map_err(CliError::Config)?;
    let provider: Box<dyn MomentProvider> = match parsed.source {
        Source::Oracle => Box::new(Oracle::exact(ctx.spec.clone())),
        Source::Biased => Box::new(Oracle::biased(ctx.spec.clone(), ctx.oracle_bias)),
        Source::Net => match parsed.rule {
            Rule::Sn => load_net(ctx, "sn.json")?,
            Rule::Npr => load_net(ctx, "npr.json")?,
            _ => load_net(ctx, "eps.json")?,
        },
    };
    let rule = match parsed.rule {
        Rule::Analytic => {
            let levels: Vec<_> = (1..=ctx.schedule.steps()).map(|n| ctx.schedule.timepoint(n)).collect();
            CovarianceRule::AnalyticIsotropic(AnalyticTable::build(
                provider.as_ref(),
                ctx.spec,
                levels.iter(),
                ctx.analytic_mc,
                ctx.seed,
            )?)
        }
        Rule::Sn => CovarianceRule::Sn,
        Rule::Npr => CovarianceRule::Npr,
        Rule::Full => CovarianceRule::FullOracle(ctx.spec.clone()),
        Rule::Forward => CovarianceRule::ForwardPosterior,
    };
    Ok(Model { name: name.to_string(), provider, rule })
}
