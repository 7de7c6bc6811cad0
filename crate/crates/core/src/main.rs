use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use lstr_core::bench::{self, BenchTraining};
use lstr_core::config::{labels_path, RunConfig};
use lstr_core::gradsuite::{run_gradient_suite, SuiteSize};
use lstr_core::io::{self, PredictionDump, FEATURE_MAGIC};
use lstr_core::metrics::{mean_ap, mean_cap, mean_decile_cap, ClassMean};
use lstr_core::model::{count_macs, MacMode, ModelConfig, ModelParams, CHECKPOINT_MAGIC};
use lstr_core::numerics::{Matrix, OpKind};
use lstr_core::streaming::{stream_predictions, StreamMode};
use lstr_core::training::fit_from;

#[derive(Parser)]
#[command(name = "lstr", version, about = "Streaming per-frame action classifier")]
struct Cli {
    /// Overrides the seed of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Feature files added to the configured training set.
        datasets: Vec<PathBuf>,
        /// Checkpoint path; defaults to `[paths] checkpoint`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-epoch table path; defaults to `[paths] history`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Stream a feature file frame by frame and dump the predictions.
    Infer {
        checkpoint: PathBuf,
        features: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Cached)]
        mode: Mode,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, value_enum, default_value_t = Precision::F64)]
        precision: Precision,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare designs by parameter count, attention MACs and accuracy.
    Bench {
        /// A run config or a checkpoint.
        source: PathBuf,
        #[arg(long, default_value = "all")]
        designs: String,
        /// Train every design on the config's synthetic task first.
        #[arg(long)]
        train: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Writes the cached-streaming assembly sweep over long-memory sizes.
        #[arg(long)]
        sweep_out: Option<PathBuf>,
    },
    /// Score a prediction dump against a label sidecar.
    Eval {
        dump: PathBuf,
        labels: PathBuf,
        #[arg(long, value_enum, default_value_t = Metric::Map)]
        metric: Metric,
    },
    /// Finite-difference check of every op, layer and design loss.
    Gradcheck {
        #[arg(long, default_value = "mini")]
        size: String,
        /// Corrupts one backward rule to exercise the check itself.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write the config's synthetic sequences as feature and label files.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the held-out set instead of the training set.
        #[arg(long)]
        test: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Cached,
    Reference,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Map,
    Cap,
    Decile,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            datasets,
            out,
            history,
        } => train(&config, &datasets, out, history, cli.seed),
        Command::Infer {
            checkpoint,
            features,
            mode,
            stride,
            precision,
            out,
        } => infer(&checkpoint, &features, mode, stride, precision, &out),
        Command::Bench {
            source,
            designs,
            train,
            out,
            sweep_out,
        } => bench(&source, &designs, train, out, sweep_out, cli.seed),
        Command::Eval { dump, labels, metric } => eval(&dump, &labels, metric),
        Command::Gradcheck { size, inject_fault } => gradcheck(&size, inject_fault.as_deref()),
        Command::Synth { config, out, test } => synth(&config, &out, test, cli.seed),
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("invalid config {}", path.display()))
}

fn train(
    config_path: &Path,
    datasets: &[PathBuf],
    out: Option<PathBuf>,
    history: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<ExitCode> {
    let mut config = load_config(config_path)?;
    if let Some(seed) = seed {
        config.train.seed = seed;
    }
    let Some(checkpoint) = out.or(config.paths.checkpoint.clone()) else {
        bail!("no checkpoint path: pass --out or set [paths] checkpoint");
    };
    let data = config.dataset(datasets)?;
    let params = ModelParams::init(&config.model, config.train.seed)?;
    eprintln!(
        "training {} ({} parameters) on {} sequences",
        config.model.design,
        params.param_count(),
        data.len()
    );
    let (params, hist) = fit_from(params, &data, &config.train, |e| {
        eprintln!(
            "epoch {}: loss {:.6} accuracy {:.4}",
            e.epoch, e.mean_loss, e.accuracy
        );
    })?;
    params
        .save(&checkpoint)
        .with_context(|| format!("writing {}", checkpoint.display()))?;
    let table = hist.to_tsv();
    print!("{table}");
    if let Some(path) = history.or(config.paths.history) {
        fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn infer(
    checkpoint: &Path,
    features: &Path,
    mode: Mode,
    stride: usize,
    precision: Precision,
    out: &Path,
) -> Result<ExitCode> {
    let params =
        ModelParams::load(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let bytes = fs::read(features).with_context(|| format!("reading {}", features.display()))?;
    // A zero-byte file is an empty stream.
    let frames = if bytes.is_empty() {
        Matrix::zeros(0, params.config().feature_dim)
    } else {
        io::features_from_bytes(&bytes).with_context(|| format!("reading {}", features.display()))?
    };
    let mode = match mode {
        Mode::Cached => StreamMode::Cached,
        Mode::Reference => StreamMode::Reference,
    };
    let dump = match precision {
        Precision::F32 => stream_predictions::<f32>(&params, &frames, mode, stride),
        Precision::F64 => stream_predictions::<f64>(&params, &frames, mode, stride),
    }
    .with_context(|| format!("streaming {}", features.display()))?;
    dump.save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    eprintln!("{} steps, {} mode, stride {stride}", dump.len(), mode.name());
    Ok(ExitCode::SUCCESS)
}

fn bench(
    source: &Path,
    designs: &str,
    train: bool,
    out: Option<PathBuf>,
    sweep_out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<ExitCode> {
    let designs = bench::parse_designs(designs)?;
    let head = fs::read(source).with_context(|| format!("reading {}", source.display()))?;
    let (model, run) = if head.starts_with(CHECKPOINT_MAGIC) {
        (ModelParams::from_bytes(&head)?.config().clone(), None)
    } else if head.starts_with(FEATURE_MAGIC) {
        bail!(
            "{} is a feature file; bench takes a config or a checkpoint",
            source.display()
        );
    } else {
        let run = load_config(source)?;
        (run.model.clone(), Some(run))
    };
    let seed = seed.or(run.as_ref().map(|r| r.train.seed)).unwrap_or(0);
    let training = match (train, &run) {
        (false, _) => None,
        (true, None) => bail!("--train needs a config with a [synthetic] section, not a checkpoint"),
        (true, Some(run)) => {
            let Some(synthetic) = &run.synthetic else {
                bail!("--train needs a [synthetic] section in {}", source.display());
            };
            Some(BenchTraining {
                train: run.train.clone(),
                train_set: synthetic.train_set(&model)?,
                test_set: synthetic.test_set(&model)?,
            })
        }
    };
    let report = bench::run_bench(&model, &designs, training.as_ref(), seed)?;
    let table = report.to_tsv();
    match &out {
        Some(path) => fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{table}"),
    }
    closed_form_summary(&model);
    if let Some(path) = sweep_out {
        let rows = bench::assembly_sweep(&model, &bench::SWEEP_LONG_LENS, seed)?;
        fs::write(&path, bench::sweep_tsv(&rows)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn closed_form_summary(model: &ModelConfig) {
    let macs: Vec<String> = MacMode::ALL
        .iter()
        .map(|&m| format!("{m} {}", count_macs(model, m)))
        .collect();
    eprintln!("closed-form encoder score MACs: {}", macs.join(", "));
}

fn eval(dump: &Path, labels: &Path, metric: Metric) -> Result<ExitCode> {
    let dump = PredictionDump::load(dump).with_context(|| format!("reading {}", dump.display()))?;
    let labels = io::read_labels(labels).with_context(|| format!("reading {}", labels.display()))?;
    if dump.len() != labels.len() {
        bail!(
            "dump has {} steps but the labels have {}",
            dump.len(),
            labels.len()
        );
    }
    let s = &dump.scores;
    let scores = Matrix::from_fn(s.rows(), s.cols(), |r, c| s.get(r, c) as f64);
    match metric {
        Metric::Map => print_class_mean("map", &mean_ap(&scores, &labels)?),
        Metric::Cap => print_class_mean("cap", &mean_cap(&scores, &labels)?),
        Metric::Decile => {
            for (d, v) in mean_decile_cap(&scores, &labels)?.iter().enumerate() {
                match v {
                    Some(v) => println!("decile_{}\t{v:.4}", d + 1),
                    None => println!("decile_{}\t-", d + 1),
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn print_class_mean(name: &str, m: &ClassMean) {
    println!("{name}\t{:.4}", m.mean);
    for (k, v) in m.per_class.iter().enumerate() {
        match v {
            Some(v) => println!("class_{}\t{v:.4}", k + 1),
            None => println!("class_{}\t-", k + 1),
        }
    }
    if !m.uncalibrated.is_empty() {
        let list: Vec<String> = m.uncalibrated.iter().map(usize::to_string).collect();
        eprintln!(
            "classes without negatives, scored uncalibrated: {}",
            list.join(", ")
        );
    }
}

fn gradcheck(size: &str, fault: Option<&str>) -> Result<ExitCode> {
    let size: SuiteSize = size.parse()?;
    let fault = match fault {
        None => None,
        Some(name) => match OpKind::from_name(name) {
            Some(k) => Some(k),
            None => {
                let names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
                bail!("unknown op `{name}`; valid: {}", names.join(", "));
            }
        },
    };
    let report = run_gradient_suite(size, fault)?;
    print!("{}", report.render());
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn synth(config_path: &Path, out: &Path, test: bool, seed: Option<u64>) -> Result<ExitCode> {
    let config = load_config(config_path)?;
    let Some(mut synthetic) = config.synthetic.clone() else {
        bail!("{} has no [synthetic] section", config_path.display());
    };
    if let Some(seed) = seed {
        synthetic.seed = seed;
    }
    let data = if test {
        synthetic.test_set(&config.model)?
    } else {
        synthetic.train_set(&config.model)?
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (i, seq) in data.iter().enumerate() {
        let path = out.join(format!("seq_{i:04}.feat"));
        let f = &seq.features;
        io::write_features(
            &path,
            &Matrix::from_fn(f.rows(), f.cols(), |r, c| f.get(r, c) as f32),
        )?;
        io::write_labels(labels_path(&path), &seq.labels)?;
    }
    eprintln!("wrote {} sequences to {}", data.len(), out.display());
    Ok(ExitCode::SUCCESS)
}
