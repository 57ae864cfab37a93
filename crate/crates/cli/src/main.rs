mod commands;
mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use failforge_core::eval::{Averaging, Strategy};
use failforge_core::gateway::ImageMode;
use failforge_core::AnswerMode;

use commands::{Report, Status};
use config::PipelineConfig;

const EXIT_PARTIAL: u8 = 1;
const EXIT_FATAL: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(
    name = "failforge",
    version,
    about = "Robot failure dataset synthesis, evaluation and verification"
)]
struct Cli {
    /// TOML pipeline configuration.
    #[arg(long, global = true, env = "FAILFORGE_CONFIG")]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Corpus directory (repeatable); replaces the configured list.
    #[arg(long, global = true)]
    corpus: Vec<PathBuf>,
    /// Root for generated artifacts.
    #[arg(long, global = true)]
    output_root: Option<PathBuf>,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Worker thread cap.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Log filter for stderr, e.g. `info` or `failforge_core=debug`.
    #[arg(long, global = true, env = "FAILFORGE_LOG", default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Vanilla,
    Thinking,
    Dropout,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AveragingArg {
    Macro,
    Micro,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AnswerArg {
    Direct,
    Thinking,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ImageArg {
    Separated,
    Grid,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check episode manifests and their frames.
    Validate,
    /// Generate a balanced planning shard.
    GenPlan {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a balanced execution shard.
    GenExec {
        #[arg(long)]
        count: Option<usize>,
        /// Ingested sim rollout samples (repeatable).
        #[arg(long)]
        rollouts: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write perturbation directives for the simulator.
    EmitDirectives {
        #[arg(long)]
        per_episode: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn simulator rollout manifests into execution failure samples.
    IngestRollouts {
        #[arg(long)]
        directives: Option<PathBuf>,
        /// Directory of `{directive_id}.json` rollout manifests.
        #[arg(long)]
        rollouts: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attach reasoning traces to a shard.
    GenCot {
        /// Shard file or split directory.
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample counts per split and kind.
    Stats {
        /// Split or dataset directory.
        path: PathBuf,
    },
    /// Score a detector on a shard or split.
    Eval {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        split_name: Option<String>,
        #[arg(long, value_enum)]
        answer_mode: Option<AnswerArg>,
        #[arg(long, value_enum)]
        image_mode: Option<ImageArg>,
        #[arg(long)]
        view_limit: Option<usize>,
        #[arg(long, value_enum)]
        averaging: Option<AveragingArg>,
    },
    /// Write training records for fine-tuning.
    ExportTrain {
        input: PathBuf,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long)]
        dropout_ratio: Option<f64>,
        /// one, four or random.
        #[arg(long)]
        views: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tile start/end views into one image.
    ComposeGrid {
        #[arg(long, required = true, num_args = 1..)]
        start: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        end: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the verification HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
    /// Recompute rule-generated samples and compare byte for byte.
    VerifyProvenance { input: PathBuf },
}

fn apply_flags(cli: &Cli, cfg: &mut PipelineConfig) -> anyhow::Result<()> {
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if !cli.corpus.is_empty() {
        cfg.corpus = cli.corpus.clone();
    }
    if let Some(root) = &cli.output_root {
        cfg.output_root = root.clone();
    }
    match &cli.command {
        Command::GenPlan { count: Some(n), .. } => cfg.planning.target_count = *n,
        Command::GenExec { count: Some(n), .. } => cfg.execution.target_count = *n,
        Command::EmitDirectives {
            per_episode: Some(n), ..
        } => cfg.directives.per_episode = *n,
        Command::Eval {
            answer_mode,
            image_mode,
            view_limit,
            averaging,
            ..
        } => {
            if let Some(a) = answer_mode {
                cfg.detector.answer_mode = match a {
                    AnswerArg::Direct => AnswerMode::Direct,
                    AnswerArg::Thinking => AnswerMode::Thinking,
                };
            }
            if let Some(m) = image_mode {
                cfg.detector.image_mode = match m {
                    ImageArg::Separated => ImageMode::Separated,
                    ImageArg::Grid => ImageMode::Grid,
                };
            }
            if let Some(v) = view_limit {
                cfg.detector.view_limit = *v;
            }
            if let Some(a) = averaging {
                cfg.detector.averaging = match a {
                    AveragingArg::Macro => Averaging::Macro,
                    AveragingArg::Micro => Averaging::Micro,
                };
            }
        }
        Command::ExportTrain {
            strategy,
            dropout_ratio,
            views,
            ..
        } => {
            if let Some(s) = strategy {
                cfg.export.strategy = match s {
                    StrategyArg::Vanilla => Strategy::Vanilla,
                    StrategyArg::Thinking => Strategy::Thinking,
                    StrategyArg::Dropout => Strategy::Dropout,
                };
            }
            if let Some(r) = dropout_ratio {
                cfg.export.dropout_ratio = *r;
            }
            if let Some(v) = views {
                cfg.export.view_policy = commands::view_policy(v)?;
            }
        }
        Command::Serve { bind: Some(b) } => cfg.service.bind = b.clone(),
        _ => {}
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<Report> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref(), |k| std::env::var(k).ok())?;
    apply_flags(cli, &mut cfg)?;
    let out = |o: &Option<PathBuf>| o.as_deref().map(Path::to_path_buf);
    match &cli.command {
        Command::Validate => commands::validate(&cfg),
        Command::GenPlan { out: o, .. } => commands::gen_plan(&cfg, out(o).as_deref()),
        Command::GenExec { rollouts, out: o, .. } => commands::gen_exec(&cfg, rollouts, out(o).as_deref()),
        Command::EmitDirectives { out: o, .. } => commands::emit_directives(&cfg, out(o).as_deref()),
        Command::IngestRollouts {
            directives,
            rollouts,
            out: o,
        } => commands::ingest_rollouts(&cfg, directives.as_deref(), rollouts, out(o).as_deref()),
        Command::GenCot { input, out: o } => commands::gen_cot(&cfg, input, out(o).as_deref()),
        Command::Stats { path } => commands::stats(path),
        Command::Eval {
            input,
            out: o,
            split_name,
            ..
        } => commands::eval(
            &cfg,
            input,
            &commands::EvalArgs {
                out: out(o),
                split_name: split_name.clone(),
            },
        ),
        Command::ExportTrain { input, out: o, .. } => commands::export_train(&cfg, input, out(o).as_deref()),
        Command::ComposeGrid { start, end, out: o } => commands::compose_grid_cmd(&cfg, start, end, o),
        Command::Serve { .. } => commands::serve_cmd(&cfg),
        Command::VerifyProvenance { input } => commands::verify_provenance(&cfg, input),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let filter = tracing_subscriber::EnvFilter::try_new(&cli.log).unwrap_or_else(|_| "warn".into());
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_FATAL);
        }
    }
    match run(&cli) {
        Ok(report) => {
            let mut stdout = std::io::stdout().lock();
            let _ = if cli.json {
                writeln!(
                    stdout,
                    "{}",
                    serde_json::to_string_pretty(&report.json).expect("json value")
                )
            } else {
                write!(stdout, "{}", report.text)
            };
            match report.status {
                Status::Ok => ExitCode::SUCCESS,
                Status::Partial => ExitCode::from(EXIT_PARTIAL),
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}
