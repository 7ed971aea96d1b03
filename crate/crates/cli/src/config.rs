//! Command-line and JSON-file configuration.
//!
//! Every subcommand accepts `--config file.json` holding the same keys as its
//! flags (snake_case); explicit flags override file values, and unknown keys
//! in the file are rejected. The fully resolved configuration is written into
//! the run manifest, from which the run can be reproduced exactly.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sfd_core::error::{Error, Result};
use sfd_core::solver::SolverKind;

#[derive(Debug, Parser)]
#[command(
    name = "sfd",
    about = "Few-step distillation of diffusion samplers on toy distributions",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a noise-prediction network on a mixture dataset.
    Pretrain(PretrainArgs),
    /// Distill a pretrained teacher into a few-step student.
    Distill(DistillArgs),
    /// Generate samples from a checkpoint.
    Sample(SampleArgs),
    /// Measure distribution metrics (and optionally project trajectories).
    Eval(EvalArgs),
    /// Re-run one of the built-in experiments.
    Reproduce(ReproduceArgs),
}

fn load_file_config<T: for<'de> Deserialize<'de> + Default>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::schema(format!("config {path:?}: {e}")))
}

macro_rules! merge_field {
    ($cli:ident, $file:ident, $($name:ident),+ $(,)?) => {
        $( if $cli.$name.is_none() { $cli.$name = $file.$name; } )+
    };
}

fn parse_usize_list(text: &str, what: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("{what}: bad entry `{s}`")))
        })
        .collect()
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainArgs {
    /// JSON config file providing defaults for the flags below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Mixture JSON (plain or class-conditional).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub tmin: Option<f64>,
    #[arg(long)]
    pub tmax: Option<f64>,
    /// Hidden layer widths, e.g. "128,128,128".
    #[arg(long)]
    pub hidden: Option<String>,
    /// Sinusoidal feature width.
    #[arg(long)]
    pub embed_features: Option<usize>,
    /// Embedding width.
    #[arg(long)]
    pub embed: Option<usize>,
    /// Checkpoint file name inside the output directory.
    #[arg(long)]
    pub checkpoint_out: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedPretrain {
    pub seed: u64,
    #[serde(skip_serializing)]
    pub out: PathBuf,
    #[serde(skip_serializing)]
    pub threads: usize,
    pub data: PathBuf,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub tmin: f64,
    pub tmax: f64,
    pub hidden: Vec<usize>,
    pub embed_features: usize,
    pub embed: usize,
    pub checkpoint_out: String,
}

impl PretrainArgs {
    pub fn resolve(mut self) -> Result<ResolvedPretrain> {
        if let Some(path) = self.config.take() {
            let file: PretrainArgs = load_file_config(&path)?;
            merge_field!(
                self, file, seed, out, threads, data, iterations, batch, lr, tmin, tmax, hidden,
                embed_features, embed, checkpoint_out
            );
        }
        let data = self
            .data
            .ok_or_else(|| Error::invalid("pretrain requires --data"))?;
        Ok(ResolvedPretrain {
            seed: self.seed.unwrap_or(0),
            out: self.out.unwrap_or_else(|| PathBuf::from(".")),
            threads: self.threads.unwrap_or(1),
            data,
            iterations: self.iterations.unwrap_or(4000),
            batch: self.batch.unwrap_or(128),
            lr: self.lr.unwrap_or(1e-3),
            tmin: self.tmin.unwrap_or(0.006),
            tmax: self.tmax.unwrap_or(80.0),
            hidden: match self.hidden {
                Some(h) => parse_usize_list(&h, "--hidden")?,
                None => vec![128, 128, 128],
            },
            embed_features: self.embed_features.unwrap_or(32),
            embed: self.embed.unwrap_or(64),
            checkpoint_out: self.checkpoint_out.unwrap_or_else(|| "teacher.json".into()),
        })
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// vanilla | sfd | sfd-v | second-stage
    #[arg(long)]
    pub mode: Option<String>,
    /// Teacher checkpoint (for second-stage: the first-stage student).
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Mixture JSON; required for vanilla (dataset draws), used for the class
    /// prior when distilling a conditional model, and enables the recorded
    /// post-training evaluation metric when present.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Student steps N.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Teacher sub-steps per segment.
    #[arg(long = "K")]
    pub k: Option<usize>,
    /// euler | heun | dpm_2s | dpm_pp_2m | dpm_pp_3m
    #[arg(long)]
    pub teacher_solver: Option<String>,
    /// Analytical first step on the student trajectory.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub afs: Option<bool>,
    /// l2sq | l1 | pseudo_huber
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Teacher-trajectory budget; iterations = budget / batch.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Step-count list for sfd-v, e.g. "2,3,4,5".
    #[arg(long)]
    pub step_list: Option<String>,
    #[arg(long)]
    pub tmin: Option<f64>,
    #[arg(long)]
    pub tmax: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub checkpoint_out: Option<String>,
    /// Chains used for the recorded post-training metric.
    #[arg(long)]
    pub eval_chains: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillMode {
    Vanilla,
    Sfd,
    SfdV,
    SecondStage,
}

impl DistillMode {
    fn parse(name: &str) -> Result<Self> {
        match name {
            "vanilla" => Ok(DistillMode::Vanilla),
            "sfd" => Ok(DistillMode::Sfd),
            "sfd-v" => Ok(DistillMode::SfdV),
            "second-stage" => Ok(DistillMode::SecondStage),
            other => Err(Error::invalid(format!("unknown distill mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedDistill {
    pub seed: u64,
    #[serde(skip_serializing)]
    pub out: PathBuf,
    #[serde(skip_serializing)]
    pub threads: usize,
    pub mode: DistillMode,
    pub teacher: PathBuf,
    pub data: Option<PathBuf>,
    pub steps: usize,
    pub k: usize,
    pub teacher_solver: SolverKind,
    pub afs: bool,
    /// Parsed into a metric once the model dimension is known.
    pub loss: String,
    pub lr: f64,
    pub budget: usize,
    pub batch: usize,
    pub step_list: Vec<usize>,
    pub tmin: f64,
    pub tmax: f64,
    pub rho: f64,
    pub checkpoint_out: String,
    pub eval_chains: usize,
}

impl DistillArgs {
    pub fn resolve(mut self) -> Result<ResolvedDistill> {
        if let Some(path) = self.config.take() {
            let file: DistillArgs = load_file_config(&path)?;
            merge_field!(
                self, file, seed, out, threads, mode, teacher, data, steps, k, teacher_solver,
                afs, loss, lr, budget, batch, step_list, tmin, tmax, rho, checkpoint_out,
                eval_chains
            );
        }
        let mode = DistillMode::parse(self.mode.as_deref().unwrap_or("sfd"))?;
        let teacher = self
            .teacher
            .ok_or_else(|| Error::invalid("distill requires --teacher"))?;
        if mode == DistillMode::Vanilla && self.data.is_none() {
            return Err(Error::invalid("vanilla distillation requires --data"));
        }
        let defaults = sfd_core::trainer::DistillConfig::default();
        Ok(ResolvedDistill {
            seed: self.seed.unwrap_or(0),
            out: self.out.unwrap_or_else(|| PathBuf::from(".")),
            threads: self.threads.unwrap_or(1),
            mode,
            teacher,
            data: self.data,
            steps: self.steps.unwrap_or(defaults.steps),
            k: self.k.unwrap_or(defaults.substeps),
            teacher_solver: match self.teacher_solver {
                Some(name) => SolverKind::parse(&name)?,
                None => defaults.teacher_kind,
            },
            afs: self.afs.unwrap_or(defaults.afs),
            loss: match self.loss {
                Some(name) => {
                    if !matches!(name.as_str(), "l2sq" | "l1" | "pseudo_huber") {
                        return Err(Error::invalid(format!("unknown loss metric `{name}`")));
                    }
                    name
                }
                None => defaults.loss.name().to_string(),
            },
            lr: self.lr.unwrap_or(defaults.lr),
            budget: self.budget.unwrap_or(defaults.budget),
            batch: self.batch.unwrap_or(defaults.batch),
            step_list: match self.step_list {
                Some(list) => parse_usize_list(&list, "--step-list")?,
                None => defaults.step_list.iter().map(|v| *v as usize).collect(),
            },
            tmin: self.tmin.unwrap_or(defaults.t_min),
            tmax: self.tmax.unwrap_or(defaults.t_max),
            rho: self.rho.unwrap_or(defaults.rho),
            checkpoint_out: self.checkpoint_out.unwrap_or_else(|| "student.json".into()),
            eval_chains: self.eval_chains.unwrap_or(4096),
        })
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// euler | heun | dpm_2s | dpm_pp_2m | dpm_pp_3m
    #[arg(long)]
    pub solver: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub afs: Option<bool>,
    #[arg(long)]
    pub chains: Option<usize>,
    /// Class index for conditional sampling (enables guidance).
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long)]
    pub guidance_scale: Option<f64>,
    #[arg(long)]
    pub tmin: Option<f64>,
    #[arg(long)]
    pub tmax: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedSample {
    pub seed: u64,
    #[serde(skip_serializing)]
    pub out: PathBuf,
    #[serde(skip_serializing)]
    pub threads: usize,
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub solver: SolverKind,
    pub afs: bool,
    pub chains: usize,
    pub class: Option<usize>,
    pub guidance_scale: f64,
    pub tmin: f64,
    pub tmax: f64,
    pub rho: f64,
}

impl SampleArgs {
    pub fn resolve(mut self) -> Result<ResolvedSample> {
        if let Some(path) = self.config.take() {
            let file: SampleArgs = load_file_config(&path)?;
            merge_field!(
                self, file, seed, out, threads, checkpoint, steps, solver, afs, chains, class,
                guidance_scale, tmin, tmax, rho
            );
        }
        let checkpoint = self
            .checkpoint
            .ok_or_else(|| Error::invalid("sample requires --checkpoint"))?;
        Ok(ResolvedSample {
            seed: self.seed.unwrap_or(0),
            out: self.out.unwrap_or_else(|| PathBuf::from(".")),
            threads: self.threads.unwrap_or(1),
            checkpoint,
            steps: self.steps.unwrap_or(3),
            solver: match self.solver {
                Some(name) => SolverKind::parse(&name)?,
                None => SolverKind::Euler,
            },
            afs: self.afs.unwrap_or(false),
            chains: self.chains.unwrap_or(4096),
            class: self.class,
            guidance_scale: self.guidance_scale.unwrap_or(1.0),
            tmin: self.tmin.unwrap_or(0.006),
            tmax: self.tmax.unwrap_or(80.0),
            rho: self.rho.unwrap_or(7.0),
        })
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Reference mixture JSON.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Step counts to evaluate, e.g. "2,3,4,5".
    #[arg(long)]
    pub steps: Option<String>,
    #[arg(long)]
    pub solver: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub afs: Option<bool>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub projections: Option<usize>,
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long)]
    pub guidance_scale: Option<f64>,
    /// Also write a PCA projection of the sampled trajectories.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub project: Option<bool>,
    #[arg(long)]
    pub tmin: Option<f64>,
    #[arg(long)]
    pub tmax: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedEval {
    pub seed: u64,
    #[serde(skip_serializing)]
    pub out: PathBuf,
    #[serde(skip_serializing)]
    pub threads: usize,
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub steps: Vec<usize>,
    pub solver: SolverKind,
    pub afs: bool,
    pub chains: usize,
    pub projections: usize,
    pub class: Option<usize>,
    pub guidance_scale: f64,
    pub project: bool,
    pub tmin: f64,
    pub tmax: f64,
    pub rho: f64,
}

impl EvalArgs {
    pub fn resolve(mut self) -> Result<ResolvedEval> {
        if let Some(path) = self.config.take() {
            let file: EvalArgs = load_file_config(&path)?;
            merge_field!(
                self, file, seed, out, threads, checkpoint, data, steps, solver, afs, chains,
                projections, class, guidance_scale, project, tmin, tmax, rho
            );
        }
        let checkpoint = self
            .checkpoint
            .ok_or_else(|| Error::invalid("eval requires --checkpoint"))?;
        let data = self
            .data
            .ok_or_else(|| Error::invalid("eval requires --data"))?;
        Ok(ResolvedEval {
            seed: self.seed.unwrap_or(0),
            out: self.out.unwrap_or_else(|| PathBuf::from(".")),
            threads: self.threads.unwrap_or(1),
            checkpoint,
            data,
            steps: match self.steps {
                Some(list) => parse_usize_list(&list, "--steps")?,
                None => vec![3],
            },
            solver: match self.solver {
                Some(name) => SolverKind::parse(&name)?,
                None => SolverKind::Euler,
            },
            afs: self.afs.unwrap_or(false),
            chains: self.chains.unwrap_or(4096),
            projections: self.projections.unwrap_or(128),
            class: self.class,
            guidance_scale: self.guidance_scale.unwrap_or(1.0),
            project: self.project.unwrap_or(false),
            tmin: self.tmin.unwrap_or(0.006),
            tmax: self.tmax.unwrap_or(80.0),
            rho: self.rho.unwrap_or(7.0),
        })
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReproduceArgs {
    /// fig2 | fig3 | fig4 | schedule-table
    #[serde(skip)]
    pub target: Option<String>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Distillation trajectory budget for fig3/fig4.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Chains per measurement.
    #[arg(long)]
    pub chains: Option<usize>,
    /// Pretraining iterations for the internally trained toy teacher.
    #[arg(long)]
    pub pretrain_iterations: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedReproduce {
    pub target: String,
    pub seed: u64,
    #[serde(skip_serializing)]
    pub out: PathBuf,
    #[serde(skip_serializing)]
    pub threads: usize,
    pub budget: usize,
    pub chains: usize,
    pub pretrain_iterations: usize,
}

impl ReproduceArgs {
    pub fn resolve(mut self) -> Result<ResolvedReproduce> {
        if let Some(path) = self.config.take() {
            let file: ReproduceArgs = load_file_config(&path)?;
            merge_field!(self, file, seed, out, threads, budget, chains, pretrain_iterations);
        }
        let target = self
            .target
            .ok_or_else(|| Error::invalid("reproduce requires a target"))?;
        match target.as_str() {
            "fig2" | "fig3" | "fig4" | "schedule-table" => {}
            other => {
                return Err(Error::invalid(format!(
                    "unknown reproduce target `{other}` (expected fig2|fig3|fig4|schedule-table)"
                )))
            }
        }
        Ok(ResolvedReproduce {
            target,
            seed: self.seed.unwrap_or(0),
            out: self.out.unwrap_or_else(|| PathBuf::from(".")),
            threads: self.threads.unwrap_or(1),
            budget: self.budget.unwrap_or(32_000),
            chains: self.chains.unwrap_or(4096),
            pretrain_iterations: self.pretrain_iterations.unwrap_or(3000),
        })
    }
}
