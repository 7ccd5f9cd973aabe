use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fitact::activations::GbMode;
use fitact::faultsim::{read_fault_log, run_trial, sample_faults, save_fault_log, FaultModel};
use fitact::harness::{
    export_image_dir, measure_overhead, neuron_max_histogram, prepare, protect_gbrelu, run_campaign, sweep_csv,
    sweep_global_bound, DatasetSource, PipelineConfig, Scheme,
};
use fitact::network;
use fitact::training::{
    evaluate_accuracy, modify_architecture, post_train_bounds, train_accuracy, EpochMetrics,
};
use fitact::{Error, Network};

/// Fault-injection experiments on networks with bounded activations.
#[derive(Parser)]
#[command(name = "fitact", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short = 'c', visible_alias = "spec")]
    config: PathBuf,
    /// Override a config entry, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct Output {
    /// Output directory.
    #[arg(long, short = 'o')]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CalibrateScheme {
    Fitact,
    GbreluSquash,
    GbreluClamp,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset as a PGM image directory with manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        output: Output,
    },
    /// Train a ReLU network for accuracy.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        output: Output,
    },
    /// Install bounded activations calibrated on the training split.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "fitact")]
        scheme: CalibrateScheme,
        #[command(flatten)]
        output: Output,
    },
    /// Tune FitReLU bounds with frozen weights.
    PostTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Monte-Carlo fault campaign over schemes and fault rates.
    Campaign {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        output: Output,
    },
    /// Resilience of a global GBReLU bound on one layer.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Histogram of per-neuron activation maxima.
    Histogram {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Runtime and model-size overhead of each scheme.
    Overhead {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        output: Output,
    },
    /// Sample one fault trial, evaluate it and save its fault log.
    Inject {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        output: Output,
    },
    /// Evaluate a model with the faults from a log applied.
    Replay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        faults: PathBuf,
    },
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match &error {
            Error::Config(_) | Error::InvalidNumeric(_) => 2,
            Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::TruncatedHeader(_)
            | Error::TruncatedBlock { .. }
            | Error::MalformedModel(_)
            | Error::Stage(_)
            | Error::InvalidLayer { .. }
            | Error::ShapeMismatch { .. }
            | Error::EventOutOfRange { .. } => 3,
            Error::EmptyDataset | Error::Data(_) | Error::FaultLog { .. } | Error::Io { .. } => 4,
            _ => 1,
        };
        Failure { code, error }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config(common: &Common) -> CliResult<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&common.config, &common.overrides).map_err(|e| match e {
        e @ Error::Io { .. } => Failure { code: 2, error: e },
        e => e.into(),
    })?;
    let base = common.config.parent().unwrap_or(Path::new(""));
    if let DatasetSource::ImageDir { path } = &mut cfg.data.source {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
    for path in cfg.campaign.models.values_mut() {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
    Ok(cfg)
}

fn load_model(path: &Path) -> CliResult<Network> {
    network::load(path).map_err(|e| match e {
        e @ Error::Io { .. } => Failure { code: 3, error: e },
        e => e.into(),
    })
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::from(Error::Io { path: dir.into(), source: e }))
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(&path, contents).map_err(|e| Error::Io { path, source: e }.into())
}

fn metrics_jsonl(history: &[EpochMetrics]) -> String {
    history.iter().map(|m| m.to_json_line() + "\n").collect()
}

/// Networks per scheme: from `campaign.models` when given, otherwise by
/// running the whole pipeline.
fn scheme_models(cfg: &PipelineConfig) -> CliResult<Vec<(Scheme, Network)>> {
    if cfg.campaign.models.is_empty() {
        return Ok(prepare(cfg, &cfg.campaign.schemes)?.models);
    }
    cfg.campaign
        .schemes
        .iter()
        .map(|s| {
            let path = cfg.campaign.models.get(s).ok_or_else(|| {
                Failure::from(Error::Config(format!("campaign.models has no entry for {s}")))
            })?;
            Ok((*s, load_model(path)?))
        })
        .collect()
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { common, output } => {
            let cfg = load_config(&common)?;
            let (train, test) = cfg.data.load_split()?;
            export_image_dir(&train, &output.out.join("train"))?;
            export_image_dir(&test, &output.out.join("test"))?;
            println!("wrote {} train and {} test images to {}", train.len(), test.len(), output.out.display());
        }
        Command::Train { common, output } => {
            let cfg = load_config(&common)?;
            let (train, test) = cfg.data.load_split()?;
            let outcome = train_accuracy(&cfg.build_network()?, &train, &cfg.train)?;
            create_dir(&output.out)?;
            network::save(&outcome.network, output.out.join("model.bin"))?;
            write(output.out.join("train_metrics.jsonl"), metrics_jsonl(&outcome.history))?;
            println!(
                "train accuracy {:.4}, test accuracy {:.4}",
                outcome.accuracy,
                evaluate_accuracy(&outcome.network, &test)?
            );
        }
        Command::Calibrate {
            common,
            model,
            scheme,
            output,
        } => {
            let cfg = load_config(&common)?;
            let net = load_model(&model)?;
            let (train, _) = cfg.data.load_split()?;
            let out = match scheme {
                CalibrateScheme::Fitact => {
                    modify_architecture(&net, &train, cfg.modify.slope, cfg.modify.granularity)?
                }
                CalibrateScheme::GbreluSquash => protect_gbrelu(&net, &train, GbMode::SquashToZero)?,
                CalibrateScheme::GbreluClamp => protect_gbrelu(&net, &train, GbMode::ClampToBound)?,
            };
            create_dir(&output.out)?;
            network::save(&out, output.out.join("model.bin"))?;
            println!("installed {} bounds", out.bound_count());
        }
        Command::PostTrain { common, model, output } => {
            let cfg = load_config(&common)?;
            let net = load_model(&model)?;
            let (train, _) = cfg.data.load_split()?;
            let outcome = post_train_bounds(&net, &train, &cfg.post_train)?;
            create_dir(&output.out)?;
            network::save(&outcome.network, output.out.join("model.bin"))?;
            write(output.out.join("post_train_metrics.jsonl"), metrics_jsonl(&outcome.history))?;
            println!(
                "baseline {:.4}, post-trained {:.4}, selected epoch {}",
                outcome.baseline_accuracy, outcome.accuracy, outcome.selected_epoch
            );
        }
        Command::Campaign { common, output } => {
            let cfg = load_config(&common)?;
            let models = scheme_models(&cfg)?;
            let (_, test) = cfg.data.load_split()?;
            let report = run_campaign(&cfg.campaign, &models, &test, cfg.settings())?;
            report.write(&output.out)?;
            for c in &report.cells {
                println!(
                    "{:<14} rate {:.3e} flips {:>7.2} mean {:.4} std {:.4}",
                    c.scheme.as_str(),
                    c.fault_rate,
                    c.expected_flips,
                    c.stats.mean,
                    c.stats.std
                );
            }
        }
        Command::Sweep { common, model, output } => {
            let cfg = load_config(&common)?;
            let sweep = cfg
                .sweep
                .clone()
                .ok_or_else(|| Failure::from(Error::Config("config has no [sweep] table".into())))?;
            let net = load_model(&model)?;
            let (_, test) = cfg.data.load_split()?;
            let rows = sweep_global_bound(&net, &sweep, &test)?;
            create_dir(&output.out)?;
            let csv = sweep_csv(&rows);
            write(output.out.join("sweep.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Histogram { common, model, output } => {
            let cfg = load_config(&common)?;
            let net = load_model(&model)?;
            let layer = match cfg.histogram.layer {
                Some(l) => l,
                None => {
                    let hidden = net.hidden_layers();
                    *hidden
                        .get(1)
                        .or(hidden.first())
                        .ok_or_else(|| Failure::from(Error::Stage("model has no hidden layer".into())))?
                }
            };
            let (train, _) = cfg.data.load_split()?;
            let h = neuron_max_histogram(&net, layer, &train, cfg.histogram.bins)?;
            create_dir(&output.out)?;
            write(output.out.join("histogram.csv"), h.to_csv())?;
            println!(
                "layer {} neurons {} max {:.4} mean {:.4} cv {:.4}",
                layer,
                h.maxima.len(),
                h.max(),
                h.mean(),
                h.coefficient_of_variation()
            );
        }
        Command::Overhead { common, output } => {
            let cfg = load_config(&common)?;
            let mut models = scheme_models(&cfg)?;
            // The plain ReLU network is the baseline when present.
            if let Some(i) = models.iter().position(|(s, _)| *s == Scheme::Unprotected) {
                models.swap(0, i);
            }
            let (_, test) = cfg.data.load_split()?;
            let report = measure_overhead(&models, test.inputs(), &cfg.overhead)?;
            create_dir(&output.out)?;
            write(
                output.out.join("overhead.json"),
                serde_json::to_string_pretty(&report).expect("report serializes"),
            )?;
            for r in &report.rows {
                println!(
                    "{:<14} runtime {:.6}s ({:+.1}%) bytes {} ({:+.2}%)",
                    r.scheme.as_str(),
                    r.runtime_seconds,
                    100.0 * r.runtime_overhead,
                    r.model_bytes,
                    100.0 * r.memory_overhead
                );
            }
        }
        Command::Inject {
            common,
            model,
            rate,
            seed,
            output,
        } => {
            let cfg = load_config(&common)?;
            let net = load_model(&model)?;
            let (_, test) = cfg.data.load_split()?;
            let fm = FaultModel::new(rate, seed).with_scope(cfg.campaign.scope.clone());
            let trial = sample_faults(&fm, &net.parameter_census())?;
            let acc = run_trial(&net, &trial, &test)?;
            create_dir(&output.out)?;
            save_fault_log(&output.out.join("faults.log"), &trial)?;
            println!("{} flips, accuracy {acc}", trial.len());
        }
        Command::Replay { common, model, faults } => {
            let cfg = load_config(&common)?;
            let net = load_model(&model)?;
            let trial = read_fault_log(&faults)?;
            let (_, test) = cfg.data.load_split()?;
            println!("{} flips, accuracy {}", trial.len(), run_trial(&net, &trial, &test)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
