use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use srcloc_core::data::SpeechSource;
use srcloc_core::experiment::{
    cmd_attribute, cmd_dataset, cmd_manipulate, cmd_stft_export, cmd_tdoa, cmd_train, Arch,
    ErrorClass, ExperimentError, RunConfig, Scale,
};

#[derive(Parser)]
#[command(
    name = "srcloc",
    version,
    about = "Sound source localization and relevance analysis experiments"
)]
struct Cli {
    /// TOML run configuration, layered over the preset of its scale.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the configuration).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Preset used when the configuration does not name one.
    #[arg(long, global = true, value_parser = ["desk", "full"])]
    scale: Option<String>,
    /// Output directory (overrides the configuration).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory of speech WAV files to use instead of surrogate speech.
    #[arg(long, global = true, conflicts_with = "surrogate")]
    corpus_dir: Option<PathBuf>,
    /// Force surrogate speech with the preset's generator settings.
    #[arg(long, global = true)]
    surrogate: bool,
    /// Train one model across all conditions.
    #[arg(long, global = true)]
    pooled: bool,
    /// Restrict to these models (comma separated: loccnn, samplecnn).
    #[arg(long, global = true, value_delimiter = ',')]
    models: Vec<String>,
    /// Output neuron(s) relevance starts from: sum, x, y or z.
    #[arg(long, global = true)]
    target: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate rooms and write the windowed example store.
    Dataset,
    /// Train one model per condition (or pooled) and evaluate on the test split.
    Train,
    /// Compute relevance for every test window and audit conservation.
    Attribute,
    /// Zero input samples by random, amplitude or relevance ranking.
    Manipulate,
    /// Anomalous TDoA estimates from microphone and relevance signals.
    Tdoa,
    /// STFT and GCC-PHAT exports for one test source.
    StftExport,
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let scale: Scale = match &cli.scale {
        Some(s) => s.parse().map_err(|e: String| ExperimentError::Config(e))?,
        None => Scale::Desk,
    };
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path, scale)?,
        None => RunConfig::preset(scale),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(dir) = &cli.corpus_dir {
        cfg.dataset.speech = SpeechSource::Corpus { dir: dir.clone() };
    }
    if cli.surrogate {
        cfg.dataset.speech = RunConfig::preset(cfg.scale).dataset.speech;
    }
    if cli.pooled {
        cfg.pooled = true;
    }
    if !cli.models.is_empty() {
        cfg.models = cli
            .models
            .iter()
            .map(|m| match m.as_str() {
                "loccnn" => Ok(Arch::LocCnn),
                "samplecnn" => Ok(Arch::SampleCnn),
                other => Err(ExperimentError::Config(format!("unknown model `{other}`"))),
            })
            .collect::<Result<_, _>>()?;
    }
    if let Some(t) = &cli.target {
        cfg.lrp.selector = t.parse().map_err(ExperimentError::Config)?;
    }
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve(cli)?;
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    match cli.command {
        Command::Dataset => {
            let m = cmd_dataset(&cfg)?;
            println!("{} examples, store sha256 {}", m.n_examples, m.store_sha256);
        }
        Command::Train => {
            for o in cmd_train(&cfg)? {
                println!(
                    "{} {}: test MAE {:.3} m (mean-prediction baseline {:.3} m), best epoch {:?} of {}",
                    o.model, o.group, o.test_mae, o.baseline_mae, o.best_epoch, o.epochs
                );
            }
        }
        Command::Attribute => {
            for a in cmd_attribute(&cfg)? {
                println!(
                    "{}: {} windows, max conservation deficit {:.2e}",
                    a.store, a.windows, a.max_relative_deficit
                );
            }
        }
        Command::Manipulate => {
            for r in cmd_manipulate(&cfg)? {
                for c in &r.curves {
                    let mae: Vec<String> = c.mae.iter().map(|v| format!("{v:.3}")).collect();
                    println!("{} {}: {}", r.model, c.strategy.name(), mae.join(" "));
                }
            }
        }
        Command::Tdoa => {
            cmd_tdoa(&cfg)?;
            println!(
                "wrote {}",
                cfg.out_dir.join("tdoa").join("table.csv").display()
            );
        }
        Command::StftExport => {
            for p in cmd_stft_export(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err
        .downcast_ref::<ExperimentError>()
        .map(ExperimentError::class)
    {
        Some(ErrorClass::Config) => 2,
        Some(ErrorClass::Data) => 3,
        Some(ErrorClass::Numeric) => 4,
        Some(ErrorClass::Io) => 5,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
