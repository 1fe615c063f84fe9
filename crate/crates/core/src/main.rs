use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use voxsynth::experiment::{self, ExperimentConfig, Modality};
use voxsynth::phantom::Profile;
use voxsynth::{Error, Result};

#[derive(Parser)]
#[command(name = "voxsynth", version, about = "T1w to FA/MD synthesis and slice-vote diagnosis")]
struct Cli {
    /// Experiment configuration (TOML); defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true, env = "VOXSYNTH_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom cohort.
    PhantomGen {
        /// Cohort description: a TOML file with the `[data]` keys at top level.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = ["A", "B"])]
        profile: Option<String>,
        #[arg(long)]
        n_per_class: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Train a synthesis network.
    SynthTrain {
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a synthesis checkpoint on the test split.
    SynthEval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Evaluate one checkpoint in distribution and on a second cohort.
    SynthTransfer {
        #[arg(long)]
        ckpt: PathBuf,
        /// In-distribution cohort; defaults to `[data]`.
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long = "cohort-b", visible_alias = "cohort-B")]
        cohort_b: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate every cell of an ablation grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Train a slice classifier.
    ClfTrain {
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = ["single", "multi"], default_value = "single")]
        modality: String,
        #[arg(long, value_parser = clap::value_parser!(u8).range(2..=3), default_value_t = 2)]
        classes: u8,
        #[arg(long)]
        synth_ckpt: Option<PathBuf>,
    },
    /// Subject-level evaluation of a classifier checkpoint on the test split.
    ClfEval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_parser = ["single", "multi"], default_value = "single")]
        modality: String,
        #[arg(long)]
        synth_ckpt: Option<PathBuf>,
    },
    /// Loss curves and a comparison table across runs.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_command(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let line = std::env::args().collect::<Vec<_>>().join(" ");
    let path = dir.join("command.txt");
    std::fs::write(&path, line + "\n").map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let explicit = cli.config.is_some();
    let mut cfg = base.with_seed(cli.seed);
    match cli.command {
        Command::PhantomGen { spec, out, profile, n_per_class, force } => {
            if let Some(p) = spec {
                let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                cfg.data = toml::from_str(&text).map_err(|e| Error::Parse { offset: e.span().map_or(0, |s| s.start), message: e.message().to_string() })?;
            }
            if let Some(p) = profile {
                cfg.data.profile = if p == "A" { Profile::A } else { Profile::B };
            }
            cfg.data.n_per_class = n_per_class.unwrap_or(cfg.data.n_per_class);
            let entries = experiment::phantom_gen(&cfg, &out, force)?;
            write_command(&out)?;
            log::info!("wrote {} subjects to {}", entries.len(), out.display());
        }
        Command::SynthTrain { cohort, out } => {
            let subjects = experiment::resolve_cohort(&cfg, cohort.as_deref())?;
            write_command(&out)?;
            let (_, log) = experiment::synth_train(&cfg, &subjects, &out)?;
            log::info!("best epoch {} of {}", log.best_epoch, log.stopped_epoch);
        }
        Command::SynthEval { ckpt, cohort, report } => {
            let subjects = experiment::resolve_cohort(&cfg, Some(&cohort))?;
            let expected = explicit.then_some(&cfg);
            experiment::synth_eval(&ckpt, &subjects, &report, expected)?;
            log::info!("wrote {}", report.display());
        }
        Command::SynthTransfer { ckpt, cohort, cohort_b, report } => {
            let a = experiment::resolve_cohort(&cfg, cohort.as_deref())?;
            let b = experiment::resolve_cohort(&cfg, Some(&cohort_b))?;
            experiment::synth_transfer(&ckpt, &a, &b, &report, explicit.then_some(&cfg))?;
            log::info!("wrote {}", report.display());
        }
        Command::Ablate { grid, out, cohort, jobs } => {
            let mut cfg = ExperimentConfig::load(&grid)?.with_seed(cli.seed.or(explicit.then_some(cfg.seed)));
            cfg.ablate.jobs = jobs.unwrap_or(cfg.ablate.jobs);
            let subjects = experiment::resolve_cohort(&cfg, cohort.as_deref())?;
            write_command(&out)?;
            let rows = experiment::ablate(&cfg, &subjects, &out)?;
            log::info!("{} ablation rows", rows.len());
        }
        Command::ClfTrain { cohort, out, modality, classes, synth_ckpt } => {
            let modality: Modality = modality.parse()?;
            let subjects = experiment::resolve_cohort(&cfg, cohort.as_deref())?;
            write_command(&out)?;
            let (_, log) = experiment::clf_train(&cfg, &subjects, &out, modality, classes as usize, synth_ckpt.as_deref())?;
            log::info!("best epoch {} of {}", log.best_epoch, log.stopped_epoch);
        }
        Command::ClfEval { ckpt, cohort, report, modality, synth_ckpt } => {
            let modality: Modality = modality.parse()?;
            let subjects = experiment::resolve_cohort(&cfg, Some(&cohort))?;
            let (m, _) = experiment::clf_eval(&ckpt, &subjects, &report, modality, synth_ckpt.as_deref(), &cfg)?;
            log::info!("accuracy {:.4}", m.accuracy);
        }
        Command::Report { runs, out } => {
            experiment::report(&runs, &out, &cfg)?;
            write_command(&out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
