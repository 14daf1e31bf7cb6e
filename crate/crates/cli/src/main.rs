use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use scorealign::{FeatureKind, ModelKind, Result};
use scorealign_cli::commands::{self, ExperimentKind};
use scorealign_cli::config::RunConfig;
use scorealign_cli::exit_code;

#[derive(Parser)]
#[command(name = "scorealign", version, about = "Align scores to recordings, label notes, train and evaluate note predictors")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set train.epochs=20`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,

    /// Worker threads. Defaults to the config value, then SCOREALIGN_THREADS, then one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Linear,
    Mlp,
    Conv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Alignment,
    Learning,
}

#[derive(Subcommand)]
enum Command {
    /// Render a MIDI score to a WAV file.
    Synth { score: PathBuf, out: PathBuf },
    /// Align a score to a recording and write the aligned labels as CSV.
    Align {
        performance: PathBuf,
        score: PathBuf,
        out: PathBuf,
        /// Also write the warping path and summary.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Mix a short sine at every label into the recording for listening checks.
    Validate { performance: PathBuf, labels: PathBuf, out: PathBuf },
    /// Compute frame features of a recording.
    Featurize {
        audio: PathBuf,
        out: PathBuf,
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Cut labeled segments from a recording and list them as CSV.
    Segments { audio: PathBuf, labels: PathBuf, out: PathBuf },
    /// Train a note predictor on the segments of a labeled recording.
    Train {
        audio: PathBuf,
        labels: PathBuf,
        out: PathBuf,
        #[arg(long, value_enum)]
        kind: Option<Kind>,
        /// Per-epoch loss file; defaults to `<out>.loss.csv`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate a trained model on a labeled recording.
    Eval {
        model: PathBuf,
        audio: PathBuf,
        labels: PathBuf,
        out: PathBuf,
        /// Restrict to points with exactly this many true notes.
        #[arg(long)]
        poly: Option<usize>,
        /// Decision threshold; defaults to the one stored with the model.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Write a score's notes as label CSV in score time.
    Export { score: PathBuf, out: PathBuf },
    /// Run a synthetic experiment under a directory keyed by the config hash.
    Experiment {
        #[arg(value_enum)]
        kind: Experiment,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
    },
}

fn flag_overrides(cli: &Cli) -> Vec<String> {
    let mut o = cli.overrides.clone();
    if let Some(t) = cli.threads {
        o.push(format!("threads={t}"));
    }
    if let Command::Train { kind: Some(k), .. } = &cli.command {
        let name = match k {
            Kind::Linear => ModelKind::Linear,
            Kind::Mlp => ModelKind::Mlp,
            Kind::Conv => ModelKind::Conv,
        };
        o.push(format!("model.kind={:?}", format!("{name:?}").to_lowercase()));
    }
    o
}

fn thread_count(cfg: &RunConfig) -> usize {
    if cfg.threads > 0 {
        return cfg.threads;
    }
    std::env::var("SCOREALIGN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &flag_overrides(cli))?;
    let threads = thread_count(&cfg);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        log::warn!("thread pool already initialized: {e}");
    }
    info!("resolved configuration (threads = {threads}):\n{}", cfg.to_toml());

    match &cli.command {
        Command::Synth { score, out } => commands::cmd_synth(score, out, &cfg),
        Command::Align { performance, score, out, report } => {
            commands::cmd_align(performance, score, out, report.as_deref(), &cfg)
        }
        Command::Validate { performance, labels, out } => commands::cmd_validate(performance, labels, out, &cfg),
        Command::Featurize { audio, out, kind, window, stride } => {
            let kind = kind.as_deref().map(str::parse::<FeatureKind>).transpose()?;
            commands::cmd_featurize(audio, out, kind, *window, *stride, &cfg)
        }
        Command::Segments { audio, labels, out } => commands::cmd_segments(audio, labels, out, &cfg),
        Command::Train { audio, labels, out, trace, .. } => {
            commands::cmd_train(audio, labels, out, trace.as_deref(), &cfg)
        }
        Command::Eval { model, audio, labels, out, poly, threshold } => {
            commands::cmd_eval(model, audio, labels, out, *poly, *threshold, &cfg)
        }
        Command::Export { score, out } => commands::cmd_export(score, out),
        Command::Experiment { kind, out_dir } => {
            let kind = match kind {
                Experiment::Alignment => ExperimentKind::Alignment,
                Experiment::Learning => ExperimentKind::Learning,
            };
            commands::cmd_experiment(kind, out_dir, &cfg).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
