//! tide: synthetic perturbational world, frozen expression surrogate,
//! intervention-aware distillation, evaluation protocols, and a
//! brute-force verifier for the guided-learning bound.
//!
//! Every command resolves one RunConfig (defaults <- --config file <-
//! --set overrides <- typed flags), echoes it as run_config.json into its
//! output directory, and is deterministic given that config. Exit codes:
//! 0 success, 1 verification failure, 2 usage or data errors.

mod commands;
mod config;
mod plots;
mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tide_core::synthworld::Split;
use tide_core::{Result, TideError};

use commands::AblationVariant;
use config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "tide",
    version,
    about = "Intervention-aware distillation from a transcriptomics surrogate \
             into an image encoder, on a synthetic causal microscopy world"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// JSON run-config file; flags and --set override its fields.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override any config field by dotted path, e.g. --set train.alpha=0.5
    /// (values parse as JSON, bare words as strings; repeatable).
    #[arg(long = "set", value_name = "FIELD=VALUE")]
    set: Vec<String>,

    /// Master seed; propagates into the synth, surrogate, train, and eval seeds.
    #[arg(long)]
    seed: Option<u64>,

    /// Dataset directory.
    #[arg(long, value_name = "DIR")]
    dataset_dir: Option<PathBuf>,

    /// Frozen surrogate directory.
    #[arg(long, value_name = "DIR")]
    surrogate_dir: Option<PathBuf>,

    /// Checkpoint directory.
    #[arg(long, value_name = "DIR")]
    checkpoint_dir: Option<PathBuf>,

    /// Report output directory.
    #[arg(long, value_name = "DIR")]
    report_dir: Option<PathBuf>,

    /// Overwrite existing output directories.
    #[arg(long)]
    force: bool,
}

impl CommonArgs {
    /// Typed flags are appended after --set entries so they win.
    fn resolve(&self, extra: Vec<String>) -> Result<RunConfig> {
        let mut overrides = self.set.clone();
        overrides.extend(extra);
        let mut cfg = config::resolve(self.config.as_deref(), &overrides)?;
        if let Some(seed) = self.seed {
            cfg.seed = Some(seed);
            cfg.propagate_seed();
        }
        if let Some(d) = &self.dataset_dir {
            cfg.dataset_dir = d.clone();
        }
        if let Some(d) = &self.surrogate_dir {
            cfg.surrogate_dir = d.clone();
        }
        if let Some(d) = &self.checkpoint_dir {
            cfg.checkpoint_dir = d.clone();
        }
        if let Some(d) = &self.report_dir {
            cfg.report_dir = d.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SplitArg {
    #[value(name = "val")]
    Val,
    #[value(name = "test")]
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum BaselineArg {
    #[value(name = "tide")]
    Tide,
    #[value(name = "ssl_only")]
    SslOnly,
    #[value(name = "cl_drug")]
    ClDrug,
    #[value(name = "cl_rna")]
    ClRna,
}

impl BaselineArg {
    fn as_str(self) -> &'static str {
        match self {
            BaselineArg::Tide => "tide",
            BaselineArg::SslOnly => "ssl_only",
            BaselineArg::ClDrug => "cl_drug",
            BaselineArg::ClRna => "cl_rna",
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum CodebookArg {
    #[value(name = "learned")]
    Learned,
    #[value(name = "fixed")]
    Fixed,
    #[value(name = "none")]
    None,
}

impl CodebookArg {
    fn as_str(self) -> &'static str {
        match self {
            CodebookArg::Learned => "learned",
            CodebookArg::Fixed => "fixed",
            CodebookArg::None => "none",
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum AblateSwitch {
    #[value(name = "no_dose")]
    NoDose,
    #[value(name = "detach_teacher_encoder")]
    DetachTeacherEncoder,
}

impl AblateSwitch {
    fn override_str(self) -> &'static str {
        match self {
            AblateSwitch::NoDose => "train.no_dose=true",
            AblateSwitch::DetachTeacherEncoder => "train.detach_teacher_encoder=true",
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of drugs in the world.
    #[arg(long)]
    n_drugs: Option<usize>,
    /// Fraction of treated wells with a paired expression profile.
    #[arg(long)]
    pair_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainScfmArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Surrogate training epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Distillation training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Codebook mode for the mechanism head.
    #[arg(long, value_enum)]
    codebook: Option<CodebookArg>,
    /// Ablation switch (repeatable).
    #[arg(long = "ablate", value_enum)]
    ablate: Vec<AblateSwitch>,
    /// Resume from an existing checkpoint directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct TrainBaselineArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Baseline objective to train.
    #[arg(long, value_enum)]
    baseline: BaselineArg,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Resume from an existing checkpoint directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalOneshotArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// One-shot episodes to average.
    #[arg(long)]
    runs: Option<usize>,
    /// Score held-out queries instead of the support set.
    #[arg(long)]
    holdout_queries: bool,
    /// Drug split to evaluate.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args, Debug)]
struct EvalTargetArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Label permutations for the chance reference.
    #[arg(long)]
    target_seeds: Option<usize>,
}

#[derive(Args, Debug)]
struct VerifyBoundArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of random worlds to sweep.
    #[arg(long)]
    worlds: Option<usize>,
    /// Maximum world dimensions as R,X,Z,D (each axis sampled in 2..=max).
    #[arg(long, value_name = "R,X,Z,D")]
    max_dims: Option<String>,
    /// Slack tolerance for reporting a violation.
    #[arg(long)]
    tol: Option<f64>,
    /// Inject an unnormalized teacher table; the run must reject it (exit 1).
    #[arg(long)]
    inject_fault: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated subset of full,no_dose,codebook_fixed,codebook_none,ssl_only.
    #[arg(long, value_name = "LIST")]
    variants: Option<String>,
    /// Training epochs per variant.
    #[arg(long)]
    epochs: Option<usize>,
    /// Resume variants whose checkpoint directories already exist.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Run directories to merge.
    #[arg(value_name = "RUN_DIR", required = true, num_args = 1..)]
    run_dirs: Vec<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic perturbational dataset.
    Synth(SynthArgs),
    /// Train the expression surrogate and freeze it.
    TrainScfm(TrainScfmArgs),
    /// Train the distillation objective (teacher + SSL + alignment).
    Train(TrainArgs),
    /// Train a baseline objective with the same encoder and budget.
    TrainBaseline(TrainBaselineArgs),
    /// One-shot transfer on held-out drugs with the frozen encoder.
    EvalOneshot(EvalOneshotArgs),
    /// Dose-resolved drug-target discovery against gene references.
    EvalTarget(EvalTargetArgs),
    /// Brute-force the guided-learning bound on random discrete worlds.
    VerifyBound(VerifyBoundArgs),
    /// Train and evaluate the ablation grid.
    Ablate(AblateArgs),
    /// Merge run directories into summary.csv and comparison plots.
    Report(ReportArgs),
}

fn parse_max_dims(s: &str) -> Result<String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return Err(TideError::usage(format!(
            "--max-dims wants four comma-separated integers, got {s:?}"
        )));
    }
    let mut dims = [0usize; 4];
    for (i, p) in parts.iter().enumerate() {
        dims[i] = p.trim().parse().map_err(|_| {
            TideError::usage(format!("--max-dims component {p:?} is not an integer"))
        })?;
    }
    Ok(format!(
        "sweep.max_dims=[{},{},{},{}]",
        dims[0], dims[1], dims[2], dims[3]
    ))
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth(a) => {
            let mut extra = Vec::new();
            if let Some(n) = a.n_drugs {
                extra.push(format!("synth.n_drugs={n}"));
            }
            if let Some(p) = a.pair_fraction {
                extra.push(format!("synth.pair_fraction={p}"));
            }
            let cfg = a.common.resolve(extra)?;
            commands::cmd_synth(&cfg, a.common.force)?;
            Ok(0)
        }
        Command::TrainScfm(a) => {
            let mut extra = Vec::new();
            if let Some(e) = a.epochs {
                extra.push(format!("surrogate.epochs={e}"));
            }
            let cfg = a.common.resolve(extra)?;
            commands::cmd_train_scfm(&cfg, a.common.force)?;
            Ok(0)
        }
        Command::Train(a) => {
            let mut extra = Vec::new();
            if let Some(e) = a.epochs {
                extra.push(format!("train.epochs={e}"));
            }
            if let Some(c) = a.codebook {
                extra.push(format!("train.codebook_mode={}", c.as_str()));
            }
            for s in &a.ablate {
                extra.push(s.override_str().to_string());
            }
            let cfg = a.common.resolve(extra)?;
            commands::cmd_train(&cfg, "train", a.resume, a.common.force)?;
            Ok(0)
        }
        Command::TrainBaseline(a) => {
            let mut extra = vec![format!("train.baseline={}", a.baseline.as_str())];
            if let Some(e) = a.epochs {
                extra.push(format!("train.epochs={e}"));
            }
            let cfg = a.common.resolve(extra)?;
            commands::cmd_train(&cfg, "train-baseline", a.resume, a.common.force)?;
            Ok(0)
        }
        Command::EvalOneshot(a) => {
            let mut extra = Vec::new();
            if let Some(r) = a.runs {
                extra.push(format!("oneshot.n_runs={r}"));
            }
            if a.holdout_queries {
                extra.push("oneshot.holdout_queries=true".to_string());
            }
            let cfg = a.common.resolve(extra)?;
            commands::cmd_eval_oneshot(&cfg, a.split.into())?;
            Ok(0)
        }
        Command::EvalTarget(a) => {
            let mut extra = Vec::new();
            if let Some(n) = a.target_seeds {
                extra.push(format!("target_seeds={n}"));
            }
            let cfg = a.common.resolve(extra)?;
            commands::cmd_eval_target(&cfg)?;
            Ok(0)
        }
        Command::VerifyBound(a) => {
            let mut extra = Vec::new();
            if let Some(w) = a.worlds {
                extra.push(format!("sweep.n_worlds={w}"));
            }
            if let Some(s) = &a.max_dims {
                extra.push(parse_max_dims(s)?);
            }
            if let Some(t) = a.tol {
                extra.push(format!("sweep.tolerance={t}"));
            }
            let cfg = a.common.resolve(extra)?;
            commands::cmd_verify_bound(&cfg, a.inject_fault)
        }
        Command::Ablate(a) => {
            let variants = match &a.variants {
                Some(list) => AblationVariant::parse_list(list)?,
                None => AblationVariant::ALL.to_vec(),
            };
            let mut extra = Vec::new();
            if let Some(e) = a.epochs {
                extra.push(format!("train.epochs={e}"));
            }
            let cfg = a.common.resolve(extra)?;
            commands::cmd_ablate(&cfg, &variants, a.resume, a.common.force)?;
            Ok(0)
        }
        Command::Report(a) => {
            let cfg = a.common.resolve(Vec::new())?;
            report::cmd_report(&cfg, &a.run_dirs)?;
            Ok(0)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
