//! `attnscope` command-line entry point.

mod commands;
mod config;
mod error;
mod fsio;
mod report;
mod svg;
mod train;

use clap::{Parser, Subcommand, ValueEnum};
use error::{CliError, Kind, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "attnscope",
    version,
    about = "Attention analytics for slide-reading telemetry"
)]
struct Cli {
    /// JSON config for the subcommand (cohort config for `simulate`, experiment config for `train`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (an output file for `heatmap`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a directory of session logs and summarize the cohort.
    Ingest {
        #[arg(long)]
        sessions: PathBuf,
        /// Feature tensors to check for readability.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Accumulate one session into an attention heatmap.
    Heatmap {
        #[arg(long)]
        session: PathBuf,
        #[arg(long, default_value = "50x50")]
        grid: String,
        /// Keep the first fraction of the session, in (0, 1].
        #[arg(long)]
        time_fraction: Option<f64>,
        /// Magnification bin `lo,hi` (keeps lo < mag <= hi).
        #[arg(long)]
        mag: Option<String>,
        /// Gaussian blur sigma in cells.
        #[arg(long)]
        blur: Option<f64>,
        #[arg(long, value_enum, default_value_t = NormArg::Raw)]
        norm: NormArg,
        /// Also render the map as SVG next to the output file.
        #[arg(long)]
        svg: bool,
    },
    /// Compare a predicted map with a reference map.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// `row,col` fixation cells for NSS; defaults to reference cells above 0.5.
        #[arg(long)]
        fixations: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = KldArg::GtToPred)]
        kld_direction: KldArg,
    },
    /// Attention agreement versus grade concordance per expertise group.
    Agree {
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long, default_value = "50x50")]
        grid: String,
        /// Allowed grades, comma separated.
        #[arg(long, default_value = "3,4,5")]
        grades: String,
    },
    /// Cross-validated training driven by an experiment config.
    Train,
    /// Run a checkpoint over feature tensors and score the predictions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Session logs for reader-derived targets (attention) or labels (expertise).
        #[arg(long)]
        sessions: Option<PathBuf>,
        /// ROI masks named `<wsi>.atnt`.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FilterArg::All)]
        filter: FilterArg,
    },
    /// Generate a synthetic cohort: sessions, features and masks.
    Simulate,
    /// Render figures and a summary from the outputs of other subcommands.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NormArg {
    Raw,
    UnitSum,
    MinMax,
    ZScore,
}

impl From<NormArg> for attnscope::Norm {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::Raw => attnscope::Norm::Raw,
            NormArg::UnitSum => attnscope::Norm::UnitSum,
            NormArg::MinMax => attnscope::Norm::MinMax,
            NormArg::ZScore => attnscope::Norm::ZScore,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KldArg {
    GtToPred,
    PredToGt,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FilterArg {
    All,
    Specialist,
    NonSpecialist,
    Resident,
    General,
}

impl From<FilterArg> for attnscope::CohortFilter {
    fn from(f: FilterArg) -> Self {
        use attnscope::CohortFilter as F;
        match f {
            FilterArg::All => F::All,
            FilterArg::Specialist => F::Specialist,
            FilterArg::NonSpecialist => F::NonSpecialist,
            FilterArg::Resident => F::Resident,
            FilterArg::General => F::General,
        }
    }
}

/// Options shared by every subcommand.
pub struct Ctx {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub quiet: bool,
}

impl Ctx {
    pub fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn out_dir(&self) -> Result<&PathBuf> {
        self.out.as_ref().ok_or_else(|| CliError::usage("--out is required"))
    }
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Ingest { sessions, features } => commands::ingest(&ctx, &sessions, features.as_deref()),
        Command::Heatmap {
            session,
            grid,
            time_fraction,
            mag,
            blur,
            norm,
            svg,
        } => {
            let opts = commands::HeatmapOpts {
                grid,
                time_fraction,
                mag,
                blur,
                norm: norm.into(),
                svg,
            };
            commands::heatmap(&ctx, &session, &opts)
        }
        Command::Metrics {
            pred,
            gt,
            fixations,
            kld_direction,
        } => {
            let dir = match kld_direction {
                KldArg::GtToPred => attnscope::metrics::KldDirection::GtToPred,
                KldArg::PredToGt => attnscope::metrics::KldDirection::PredToGt,
            };
            commands::metrics(&ctx, &pred, &gt, fixations.as_deref(), dir)
        }
        Command::Agree { sessions, grid, grades } => commands::agree(&ctx, &sessions, &grid, &grades),
        Command::Train => train::train(&ctx),
        Command::Eval {
            checkpoint,
            features,
            sessions,
            masks,
            filter,
        } => train::eval(
            &ctx,
            &checkpoint,
            &features,
            sessions.as_deref(),
            masks.as_deref(),
            filter.into(),
        ),
        Command::Simulate => commands::simulate(&ctx),
        Command::Report { run } => report::report(&ctx, &run),
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("ATTNSCOPE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("ATTNSCOPE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::data(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{}", e.render());
            let err = CliError::new(Kind::Usage, e.kind().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(Kind::Usage.exit_code());
        }
    };
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.kind.exit_code())
        }
    }
}
