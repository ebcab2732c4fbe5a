//! Command line front end. Every subcommand is a thin wrapper over one
//! library operation; `run` drives the whole grid.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use synthmix::cgan::{train_cgan, TrainedGenerator};
use synthmix::classifier::{train_classifier, Architecture, TrainedClassifier};
use synthmix::corruption::{CorruptionKind, CorruptionSpec};
use synthmix::data::{
    load_idx, load_image_directory, write_idx, write_image_directory, LabeledImageSet, Provenance,
};
use synthmix::error::{Error, Result};
use synthmix::mixer::{audit, compose, MixtureSpec, Ratio};
use synthmix::runner::{
    emit_report, run_grid, ClassifierSection, ExperimentConfig, RESULTS_FILE,
};

#[derive(Parser)]
#[command(
    name = "synthmix",
    version,
    about = "Benchmark pipeline for mixing generated images into real training sets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a full experiment grid from a TOML config.
    Run(RunArgs),
    /// Render report.md, summary.csv and plots from a results CSV.
    Report(ReportArgs),
    /// Train a conditional generator and save its checkpoint.
    TrainGan(TrainGanArgs),
    /// Sample a saved generator into a class-directory PNG tree.
    Generate(GenerateArgs),
    /// Apply a corruption to an IDX image/label pair.
    Corrupt(CorruptArgs),
    /// Compose a real/synthetic mixture and write it as an IDX pair.
    Mix(MixArgs),
    /// Train a classifier on an IDX pair and save its checkpoint.
    TrainClassifier(TrainClassifierArgs),
    /// Report a saved classifier's accuracy on an IDX pair.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment TOML; relative paths inside resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replication seeds, comma separated; overrides the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Single worker and stable results-file ordering.
    #[arg(long)]
    deterministic: bool,
    /// Worker threads; defaults to the core count.
    #[arg(long)]
    workers: Option<usize>,
    /// Generator cache directory (also settable via SYNTHMIX_CACHE).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Results CSV produced by `run`.
    results: PathBuf,
    /// Output directory; defaults to the CSV's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainGanArgs {
    /// Experiment TOML providing the dataset and the [gan.train] section.
    #[arg(long)]
    config: PathBuf,
    /// Replication seed for this generator.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Checkpoint path; defaults to `<output_dir>/gan-<dataset>-seed<N>.ck`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Generator checkpoint from `train-gan` or the run cache.
    #[arg(long)]
    generator: PathBuf,
    /// Root of the PNG tree to write (one subdirectory per class).
    #[arg(long)]
    out_dir: PathBuf,
    /// Images per class.
    #[arg(long)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out_images: PathBuf,
    #[arg(long)]
    out_labels: PathBuf,
    /// Corruption family; `shot_noise` is the only one built in.
    #[arg(long, default_value = "shot_noise")]
    kind: String,
    /// Severity; for shot noise the photon budget lambda (lower = noisier).
    #[arg(long)]
    severity: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MixArgs {
    /// original:synthetic ratio, e.g. `5:1`.
    #[arg(long)]
    ratio: String,
    /// Output set size.
    #[arg(long)]
    total: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    original_images: PathBuf,
    #[arg(long)]
    original_labels: PathBuf,
    /// Synthetic source as an IDX pair...
    #[arg(long, requires = "synthetic_labels")]
    synthetic_images: Option<PathBuf>,
    #[arg(long, requires = "synthetic_images")]
    synthetic_labels: Option<PathBuf>,
    /// ...or as a class-directory PNG tree.
    #[arg(long, conflicts_with = "synthetic_images")]
    synthetic_dir: Option<PathBuf>,
    #[arg(long)]
    out_images: PathBuf,
    #[arg(long)]
    out_labels: PathBuf,
    /// Enforce the ratio globally instead of within every class.
    #[arg(long)]
    unbalanced: bool,
}

#[derive(Args)]
struct TrainClassifierArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// SIMPLE_CNN or DEEP_CNN.
    #[arg(long, default_value = "SIMPLE_CNN")]
    arch: Architecture,
    /// Defaults to the preset for the chosen architecture.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Classifier checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
        Command::TrainGan(a) => cmd_train_gan(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Corrupt(a) => cmd_corrupt(a),
        Command::Mix(a) => cmd_mix(a),
        Command::TrainClassifier(a) => cmd_train_classifier(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut config = ExperimentConfig::load(&a.config)?;
    if let Some(out) = a.out {
        config.output_dir = out;
    }
    if let Some(seeds) = a.seeds {
        config.seeds = seeds;
    }
    if a.deterministic {
        config.deterministic = true;
    }
    if let Some(w) = a.workers {
        config.workers = Some(w);
    }
    if let Some(c) = a.cache_dir {
        config.cache_dir = Some(c);
    }
    let results = run_grid(&config)?;
    println!(
        "{} cells done; results at {}",
        results.len(),
        config.output_dir.join(RESULTS_FILE).display()
    );
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let out = a.out.unwrap_or_else(|| {
        a.results
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf()
    });
    for file in emit_report(&a.results, &out)? {
        println!("wrote {}", file.display());
    }
    Ok(())
}

fn cmd_train_gan(a: TrainGanArgs) -> Result<()> {
    let config = ExperimentConfig::load(&a.config)?;
    let mut gan_cfg = config
        .gan
        .as_ref()
        .and_then(|g| g.train.clone())
        .ok_or_else(|| Error::Validation("config has no [gan.train] section".into()))?;
    gan_cfg.seed = a.seed;
    let train = load_idx(
        require(&config.data.train_images, "data.train_images")?,
        require(&config.data.train_labels, "data.train_labels")?,
    )?;
    let generator = train_cgan(&train, &gan_cfg)?;
    let path = a.out.unwrap_or_else(|| {
        config
            .output_dir
            .join(format!("gan-{}-seed{}.ck", config.dataset.tag(), a.seed))
    });
    generator.save(&path)?;
    let m = generator.manifest();
    println!(
        "saved generator to {} ({} epochs run, final d loss {:.4}, g loss {:.4})",
        path.display(),
        m.epochs_run,
        m.final_d_loss,
        m.final_g_loss
    );
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let generator = TrainedGenerator::load(&a.generator)?;
    let per_class = vec![a.per_class; generator.num_classes()];
    let set = generator.generate_synthetic_dataset(&per_class, a.seed)?;
    write_image_directory(&set, &a.out_dir)?;
    println!("wrote {} images under {}", set.len(), a.out_dir.display());
    Ok(())
}

fn cmd_corrupt(a: CorruptArgs) -> Result<()> {
    let kind = match a.kind.as_str() {
        "shot_noise" => CorruptionKind::ShotNoise,
        other => {
            return Err(Error::Validation(format!(
                "unknown corruption kind {other:?}; expected shot_noise"
            )))
        }
    };
    let set = load_idx(&a.images, &a.labels)?;
    let spec = CorruptionSpec {
        kind,
        severity: a.severity,
        seed: a.seed,
    };
    let out = spec.apply(&set)?;
    write_idx(&out, &a.out_images, &a.out_labels)?;
    println!(
        "corrupted {} images -> {}",
        out.len(),
        a.out_images.display()
    );
    Ok(())
}

fn cmd_mix(a: MixArgs) -> Result<()> {
    let original = load_idx(&a.original_images, &a.original_labels)?;
    let synthetic = match (&a.synthetic_dir, &a.synthetic_images, &a.synthetic_labels) {
        (Some(dir), None, None) => load_image_directory(dir, original.num_classes())?,
        (None, Some(img), Some(lab)) => {
            // IDX carries no provenance, so restamp what we load.
            let set = load_idx(img, lab)?;
            LabeledImageSet::with_uniform_provenance(
                set.name().to_string(),
                set.images().clone(),
                set.labels().to_vec(),
                set.num_classes(),
                Provenance::Synthetic,
            )?
        }
        _ => {
            return Err(Error::Validation(
                "provide either --synthetic-dir or --synthetic-images/--synthetic-labels".into(),
            ))
        }
    };
    let ratio: Ratio = a.ratio.parse()?;
    let spec = MixtureSpec {
        ratio,
        total: a.total,
        seed: a.seed,
        class_balanced: !a.unbalanced,
    };
    let mixed = compose(&original, &synthetic, &spec)?;
    write_idx(&mixed, &a.out_images, &a.out_labels)?;
    let mix_audit = audit(&mixed);
    println!(
        "{}",
        serde_json::to_string_pretty(&mix_audit)
            .map_err(|e| Error::Format(format!("serialize audit: {e}")))?
    );
    Ok(())
}

fn cmd_train_classifier(a: TrainClassifierArgs) -> Result<()> {
    let train = load_idx(&a.images, &a.labels)?;
    let cfg = ClassifierSection {
        arch: a.arch,
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
    }
    .to_config(a.seed);
    let model = train_classifier(&train, &cfg)?;
    model.save(&a.out)?;
    println!(
        "saved {} classifier to {} ({} epochs on {} images)",
        cfg.arch,
        a.out.display(),
        cfg.epochs,
        train.len()
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let model = TrainedClassifier::load(&a.model)?;
    let set = load_idx(&a.images, &a.labels)?;
    let report = model.evaluate(&set)?;
    println!("accuracy {:.4} on {} images", report.accuracy, report.n);
    for (k, acc) in report.per_class.iter().enumerate() {
        if !acc.is_nan() {
            println!("class {k}: {acc:.4}");
        }
    }
    Ok(())
}

fn require<'a>(field: &'a Option<PathBuf>, name: &str) -> Result<&'a PathBuf> {
    field
        .as_ref()
        .ok_or_else(|| Error::Validation(format!("{name} is required")))
}
