//! Experiment orchestration: declarative TOML grids, cached generators,
//! resumable append-only results, manifest and report emission.
//!
//! A run walks `grid x seeds`. Every cell composes a training set, trains
//! a fresh classifier, and evaluates it against one test set. Cells are
//! independent, so they execute on a bounded worker pool; the only shared
//! state is the append-only results sink, which serializes writes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cgan::{train_cgan, GanTrainConfig, TrainedGenerator, DISC_LEAKY_SLOPE, GEN_BATCH, LABEL_EMBED_DIM};
use crate::classifier::{train_classifier, Architecture, ClassifierConfig, EVAL_BATCH};
use crate::corruption::{ingest_corrupted_set, CorruptionKind, CorruptionSpec};
use crate::data::{
    load_cifar10, load_idx, load_image_directory, select_ranks, LabeledImageSet, Provenance,
};
use crate::error::{Error, Result};
use crate::fid::COV_SHRINKAGE;
use crate::mixer::{audit, compose, Composition, MixAudit, MixtureSpec};
use crate::nn::{ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::plot::{LinePlot, Series, PALETTE};
use crate::rng::derive_seed;

pub const RESULTS_FILE: &str = "results.csv";
pub const CELLS_FILE: &str = "cells.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.md";
pub const SUMMARY_FILE: &str = "summary.csv";
/// Environment variable naming the generator cache directory.
pub const CACHE_ENV: &str = "SYNTHMIX_CACHE";
pub const CSV_HEADER: &str =
    "dataset,train_composition,test_set,seed,accuracy,n_original,n_synthetic,wall_time_s";

/// Benchmark dataset family. Only loading and geometry differ; every
/// stage downstream is shape-agnostic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dataset {
    #[serde(rename = "MNIST")]
    Mnist,
    #[serde(rename = "FASHION_MNIST")]
    FashionMnist,
    #[serde(rename = "CIFAR10")]
    Cifar10,
}

impl Dataset {
    pub fn tag(&self) -> &'static str {
        match self {
            Dataset::Mnist => "mnist",
            Dataset::FashionMnist => "fashion_mnist",
            Dataset::Cifar10 => "cifar10",
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Where the real data lives: IDX pairs for the MNIST family, a binary
/// batch directory for CIFAR-10.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Directory holding the CIFAR-10 binary batches.
    pub dir: Option<PathBuf>,
}

/// Synthetic image source: a generator trained in-run, or a directory of
/// externally produced images (class subdirectories of PNGs).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanSection {
    pub external_synthetic: Option<PathBuf>,
    pub train: Option<GanTrainConfig>,
}

/// Classifier settings. Omitted fields fall back to the preset for
/// `arch`; the seed is always derived per cell from the replication seed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSection {
    pub arch: Architecture,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            arch: Architecture::SimpleCnn,
            epochs: None,
            batch_size: None,
            learning_rate: None,
        }
    }
}

impl ClassifierSection {
    pub fn to_config(&self, seed: u64) -> ClassifierConfig {
        let mut cfg = match self.arch {
            Architecture::SimpleCnn => ClassifierConfig::simple_cnn(seed),
            Architecture::DeepCnn => ClassifierConfig::deep_cnn(seed),
        };
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        cfg
    }
}

/// Corrupted test set: generated from the clean test set, or ingested
/// from a published `.npy` pair (`dir` and `kind` are mutually exclusive).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptedTestConfig {
    pub dir: Option<PathBuf>,
    pub kind: Option<CorruptionKind>,
    pub severity: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl CorruptedTestConfig {
    fn validate(&self) -> Result<()> {
        match (&self.dir, &self.kind) {
            (Some(_), Some(_)) => Err(Error::Validation(
                "corrupted_test: dir and kind are mutually exclusive".into(),
            )),
            (None, None) => Err(Error::Validation(
                "corrupted_test: set either dir or kind".into(),
            )),
            (Some(_), None) if self.severity.is_some() => Err(Error::Validation(
                "corrupted_test: severity has no effect when ingesting from dir".into(),
            )),
            (None, Some(_)) => match self.severity {
                None => Err(Error::Validation(
                    "corrupted_test: kind requires severity".into(),
                )),
                Some(s) if !(s.is_finite() && s > 0.0) => Err(Error::Validation(format!(
                    "corrupted_test: severity must be positive and finite, got {s}"
                ))),
                Some(_) => Ok(()),
            },
            _ => Ok(()),
        }
    }

    fn spec(&self) -> Option<CorruptionSpec> {
        self.kind.map(|kind| CorruptionSpec {
            kind,
            severity: self.severity.unwrap_or(f64::NAN),
            seed: self.seed,
        })
    }
}

/// Which fixed test set a cell evaluates against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestTarget {
    Original,
    Synthetic,
    Corrupted,
}

impl TestTarget {
    pub fn tag(&self) -> &'static str {
        match self {
            TestTarget::Original => "original",
            TestTarget::Synthetic => "synthetic",
            TestTarget::Corrupted => "corrupted",
        }
    }
}

impl fmt::Display for TestTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// One grid row: what to train on and what to test against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub train: Composition,
    pub test: TestTarget,
    /// Overrides the mixer's per-class balancing for this cell. Unbalanced
    /// cells enforce the ratio per provenance only, which is the only way
    /// to reach high ratios on sources with uneven class counts.
    pub class_balanced: Option<bool>,
}

impl GridCell {
    /// Whether this cell draws on synthetic images at all. A `1:0` mixture
    /// does not; it is a seeded subsample of the original set.
    fn needs_synthetic(&self) -> bool {
        self.train.as_ratio().synthetic > 0 || self.test == TestTarget::Synthetic
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

/// A full experiment: dataset, synthetic source, grid, seeds, output.
///
/// Loaded from TOML. Every relative path is resolved against the config
/// file's directory; `seeds` defaults to `[1, 2, 3]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: Dataset,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub gan: Option<GanSection>,
    #[serde(default)]
    pub classifier: ClassifierSection,
    #[serde(default)]
    pub corrupted_test: Option<CorruptedTestConfig>,
    #[serde(default)]
    pub grid: Vec<GridCell>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Training-set size for every cell; defaults to the full train split.
    #[serde(default)]
    pub total: Option<usize>,
    #[serde(default)]
    pub workers: Option<usize>,
    /// Run cells on a single worker so the results file order is stable.
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parse a TOML config and resolve its relative paths against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        fn resolve(base: &Path, p: &mut PathBuf) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for p in [
            &mut self.data.train_images,
            &mut self.data.train_labels,
            &mut self.data.test_images,
            &mut self.data.test_labels,
            &mut self.data.dir,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
        if let Some(gan) = &mut self.gan {
            if let Some(p) = &mut gan.external_synthetic {
                resolve(base, p);
            }
        }
        if let Some(ct) = &mut self.corrupted_test {
            if let Some(p) = &mut ct.dir {
                resolve(base, p);
            }
        }
        if let Some(p) = &mut self.cache_dir {
            resolve(base, p);
        }
        resolve(base, &mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Validation("seeds must not be empty".into()));
        }
        let mut seen = HashSet::new();
        for &s in &self.seeds {
            if !seen.insert(s) {
                return Err(Error::Validation(format!("duplicate seed {s}")));
            }
        }
        match self.dataset {
            Dataset::Cifar10 => {
                if self.data.dir.is_none() {
                    return Err(Error::Validation("data.dir is required for CIFAR10".into()));
                }
                if let Some(gan) = &self.gan {
                    if gan.train.is_some() {
                        return Err(Error::Validation(
                            "CIFAR10 does not support in-run generator training; \
                             point gan.external_synthetic at a prepared image tree"
                                .into(),
                        ));
                    }
                }
            }
            _ => {
                if self.data.dir.is_some() {
                    return Err(Error::Validation(
                        "data.dir only applies to CIFAR10; use the idx path fields".into(),
                    ));
                }
                for (name, p) in [
                    ("data.train_images", &self.data.train_images),
                    ("data.train_labels", &self.data.train_labels),
                    ("data.test_images", &self.data.test_images),
                    ("data.test_labels", &self.data.test_labels),
                ] {
                    if p.is_none() {
                        return Err(Error::Validation(format!("{name} is required")));
                    }
                }
            }
        }
        if let Some(gan) = &self.gan {
            match (&gan.external_synthetic, &gan.train) {
                (Some(_), Some(_)) => {
                    return Err(Error::Validation(
                        "gan: external_synthetic and train are mutually exclusive".into(),
                    ))
                }
                (None, None) => {
                    return Err(Error::Validation(
                        "gan: set either external_synthetic or train".into(),
                    ))
                }
                _ => {}
            }
            if let Some(t) = &gan.train {
                t.validate()?;
            }
        }
        if self.grid.iter().any(GridCell::needs_synthetic) && self.gan.is_none() {
            return Err(Error::Validation(
                "grid uses synthetic images but there is no [gan] section".into(),
            ));
        }
        if self.grid.iter().any(|c| c.test == TestTarget::Corrupted)
            && self.corrupted_test.is_none()
        {
            return Err(Error::Validation(
                "grid tests against corrupted data but there is no [corrupted_test] section"
                    .into(),
            ));
        }
        if let Some(ct) = &self.corrupted_test {
            ct.validate()?;
        }
        if self.total == Some(0) {
            return Err(Error::Validation("total must be positive".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Validation("workers must be positive".into()));
        }
        Ok(())
    }

    /// Cache directory precedence: explicit `cache_dir` (config field or
    /// `--cache-dir` flag), then `SYNTHMIX_CACHE`, then `output_dir/cache`.
    pub fn effective_cache_dir(&self) -> PathBuf {
        if let Some(d) = &self.cache_dir {
            return d.clone();
        }
        if let Ok(d) = std::env::var(CACHE_ENV) {
            if !d.is_empty() {
                return PathBuf::from(d);
            }
        }
        self.output_dir.join("cache")
    }

    fn effective_workers(&self) -> usize {
        if self.deterministic {
            return 1;
        }
        self.workers.unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
    }
}

/// Outcome of one `(cell, seed)` evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    /// Content hash of the cell identity and seed; the resume key.
    pub cell_key: String,
    pub dataset: String,
    pub train_composition: String,
    pub test_set: String,
    pub seed: u64,
    pub accuracy: f64,
    /// Per class; `None` where the test set has no members of the class.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub audit: MixAudit,
    pub wall_time_s: f64,
    pub generator_sha256: Option<String>,
    pub classifier_sha256: String,
}

impl ExperimentResult {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3}\n",
            self.dataset,
            self.train_composition,
            self.test_set,
            self.seed,
            self.accuracy,
            self.audit.n_original,
            self.audit.n_synthetic,
            self.wall_time_s
        )
    }
}

/// One line of `cells.jsonl`: a completed result or a recorded failure.
/// Failed cells are retried on the next run; done cells are skipped.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum CellRecord {
    Done(ExperimentResult),
    Failed {
        cell_key: String,
        dataset: String,
        train_composition: String,
        test_set: String,
        seed: u64,
        message: String,
    },
}

/// Every numeric default baked into the pipeline that a config does not
/// surface, recorded in the manifest so a run is reconstructible from it.
pub fn pipeline_constants() -> serde_json::Value {
    serde_json::json!({
        "adam": {"beta1": ADAM_BETA1, "beta2": ADAM_BETA2, "epsilon": ADAM_EPS},
        "classifier_eval_batch": EVAL_BATCH,
        "generator": {
            "label_embed_dim": LABEL_EMBED_DIM,
            "sampling_batch": GEN_BATCH,
            "discriminator_leaky_slope": DISC_LEAKY_SLOPE,
        },
        "fid": {"covariance_shrinkage": COV_SHRINKAGE},
        "pixel_scale": 255.0,
    })
}

fn sha256_json(value: &serde_json::Value) -> [u8; 32] {
    let bytes = serde_json::to_vec(value).expect("json values serialize");
    Sha256::digest(bytes).into()
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Content hash of a set: geometry, class count, labels, pixels. Names
/// and provenance do not participate.
fn set_fingerprint(set: &LabeledImageSet) -> String {
    let mut h = Sha256::new();
    let (rows, cols, channels) = set.image_shape();
    for d in [set.len(), rows, cols, channels, set.num_classes()] {
        h.update((d as u64).to_le_bytes());
    }
    h.update(set.labels());
    let img = set.images().as_slice().expect("image sets are standard layout");
    let mut buf = [0u8; 4 * 4096];
    for chunk in img.chunks(4096) {
        for (i, &v) in chunk.iter().enumerate() {
            buf[i * 4..i * 4 + 4].copy_from_slice(&v.to_le_bytes());
        }
        h.update(&buf[..chunk.len() * 4]);
    }
    hex::encode(h.finalize())
}

/// Seed-independent identity of a grid cell under a config. Cells hash
/// the same regardless of their position in the grid, so editing the grid
/// never invalidates completed work.
fn cell_base_hash(config: &ExperimentConfig, cell: &GridCell, total: usize) -> [u8; 32] {
    let gan = config.gan.as_ref().map(|g| {
        if let Some(p) = &g.external_synthetic {
            serde_json::json!({"external": p.display().to_string()})
        } else {
            let mut t = g.train.clone().expect("validated gan section");
            t.seed = 0;
            serde_json::json!({"train": t})
        }
    });
    let corruption = if cell.test == TestTarget::Corrupted {
        config
            .corrupted_test
            .as_ref()
            .map(|ct| serde_json::to_value(ct).expect("config serializes"))
    } else {
        None
    };
    let value = serde_json::json!({
        "dataset": config.dataset.tag(),
        "train": cell.train.to_string(),
        "test": cell.test.tag(),
        "class_balanced": cell.class_balanced.unwrap_or(true),
        "total": total,
        "classifier": config.classifier.to_config(0),
        "gan": gan,
        "corruption": corruption,
    });
    sha256_json(&value)
}

fn cell_key(base: &[u8; 32], seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(base);
    h.update(seed.to_le_bytes());
    hex::encode(h.finalize())
}

fn key64(base: &[u8; 32]) -> u64 {
    u64::from_le_bytes(base[..8].try_into().unwrap())
}

fn load_dataset(config: &ExperimentConfig) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let tag = config.dataset.tag();
    match config.dataset {
        Dataset::Cifar10 => {
            let dir = config
                .data
                .dir
                .as_ref()
                .ok_or_else(|| Error::Validation("data.dir is required for CIFAR10".into()))?;
            let (train, test) = load_cifar10(dir)?;
            Ok((
                train.renamed(format!("{tag}_train")),
                test.renamed(format!("{tag}_test")),
            ))
        }
        _ => {
            let need = |p: &Option<PathBuf>, name: &str| {
                p.clone()
                    .ok_or_else(|| Error::Validation(format!("{name} is required")))
            };
            let train = load_idx(
                &need(&config.data.train_images, "data.train_images")?,
                &need(&config.data.train_labels, "data.train_labels")?,
            )?;
            let test = load_idx(
                &need(&config.data.test_images, "data.test_images")?,
                &need(&config.data.test_labels, "data.test_labels")?,
            )?;
            Ok((
                train.renamed(format!("{tag}_train")),
                test.renamed(format!("{tag}_test")),
            ))
        }
    }
}

/// Build the corrupted test set if any cell needs one, and insist its
/// labels match the clean test set exactly: Table-3-style comparisons are
/// meaningless if the corrupted split was reordered or relabeled.
fn prepare_corrupted(
    config: &ExperimentConfig,
    test: &LabeledImageSet,
) -> Result<Option<LabeledImageSet>> {
    if !config.grid.iter().any(|c| c.test == TestTarget::Corrupted) {
        return Ok(None);
    }
    let ct = config
        .corrupted_test
        .as_ref()
        .ok_or_else(|| Error::Validation("no [corrupted_test] section".into()))?;
    let set = if let Some(dir) = &ct.dir {
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corrupted".into());
        let set = ingest_corrupted_set(dir, &name, test.num_classes())?;
        if set.image_shape() != test.image_shape() {
            return Err(Error::Consistency(format!(
                "corrupted test geometry {:?} does not match the clean test set {:?}",
                set.image_shape(),
                test.image_shape()
            )));
        }
        if set.labels() != test.labels() {
            return Err(Error::Consistency(format!(
                "corrupted test labels at {} do not match the clean test set",
                dir.display()
            )));
        }
        set
    } else {
        let spec = ct
            .spec()
            .ok_or_else(|| Error::Validation("corrupted_test: set either dir or kind".into()))?;
        spec.apply(test)?
    };
    Ok(Some(set))
}

/// Per-seed synthetic material: a training pool sized for any cell, the
/// generated test set when a cell asks for one, and the generator's
/// checkpoint identity.
struct SeedSynthetics {
    pool: LabeledImageSet,
    test: Option<LabeledImageSet>,
    generator_path: Option<PathBuf>,
    generator_sha: Option<String>,
    generator_epochs_run: Option<usize>,
}

/// Load the cached generator for this exact (dataset, config, data)
/// triple, or train one and cache it.
fn obtain_generator(
    cache_dir: &Path,
    dataset: &str,
    cfg: &GanTrainConfig,
    train: &LabeledImageSet,
    train_fingerprint: &str,
) -> Result<(TrainedGenerator, PathBuf)> {
    let identity = serde_json::json!({
        "dataset": dataset,
        "config": cfg,
        "data": train_fingerprint,
    });
    let key = hex::encode(sha256_json(&identity));
    let path = cache_dir.join(format!("gan-{dataset}-seed{}-{}.ck", cfg.seed, &key[..16]));
    if path.exists() {
        match TrainedGenerator::load(&path) {
            Ok(g) => {
                log::info!("generator cache hit: {}", path.display());
                return Ok((g, path));
            }
            Err(e) => {
                log::warn!("generator cache at {} unreadable ({e}); retraining", path.display())
            }
        }
    }
    log::info!("training generator for {dataset}, seed {}", cfg.seed);
    let g = train_cgan(train, cfg)?;
    fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    g.save(&path)?;
    Ok((g, path))
}

/// Split an external synthetic set into a test set matching `hist` and a
/// training pool of everything else, disjoint by construction.
fn split_external(
    set: &LabeledImageSet,
    hist: &[usize],
    seed: u64,
) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let mut test_idx: Vec<usize> = Vec::new();
    for (k, &want) in hist.iter().enumerate() {
        let members = set.class_indices(k);
        if members.len() < want {
            return Err(Error::Capacity(format!(
                "external synthetic set: class {k} needs {want} test images, has {}",
                members.len()
            )));
        }
        test_idx.extend(select_ranks(members.len(), want, seed, k).map(|r| members[r]));
    }
    test_idx.sort_unstable();
    let test_set = set.select(&test_idx, "synthetic_test")?;
    let in_test: HashSet<usize> = test_idx.iter().copied().collect();
    let pool_idx: Vec<usize> = (0..set.len()).filter(|i| !in_test.contains(i)).collect();
    let pool = set.select(&pool_idx, "synthetic_pool")?;
    Ok((pool, test_set))
}

fn prepare_synthetics(
    config: &ExperimentConfig,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    external: Option<&LabeledImageSet>,
    seed: u64,
    wants_test: bool,
    cache_dir: &Path,
    train_fingerprint: &str,
    total: usize,
) -> Result<SeedSynthetics> {
    if let Some(ext) = external {
        let (pool, syn_test) = if wants_test {
            let (pool, t) = split_external(ext, &test.label_histogram(), derive_seed(seed, "syn-test", 0))?;
            (pool, Some(t))
        } else {
            (ext.clone(), None)
        };
        return Ok(SeedSynthetics {
            pool,
            test: syn_test,
            generator_path: None,
            generator_sha: None,
            generator_epochs_run: None,
        });
    }
    let mut gan_cfg = config
        .gan
        .as_ref()
        .and_then(|g| g.train.clone())
        .ok_or_else(|| Error::Validation("no [gan.train] section".into()))?;
    gan_cfg.seed = seed;
    let (generator, path) = obtain_generator(cache_dir, config.dataset.tag(), &gan_cfg, train, train_fingerprint)?;
    let sha = file_sha256(&path)?;
    let k = train.num_classes();
    // Uniform per class and large enough that any composition over
    // `total` images fits, balanced or not.
    let per_class = vec![total.div_ceil(k); k];
    let pool = generator
        .generate_synthetic_dataset(&per_class, derive_seed(seed, "syn-pool", 0))?
        .renamed("synthetic_pool");
    let syn_test = if wants_test {
        Some(
            generator
                .generate_synthetic_dataset(&test.label_histogram(), derive_seed(seed, "syn-test", 0))?
                .renamed("synthetic_test"),
        )
    } else {
        None
    };
    Ok(SeedSynthetics {
        pool,
        test: syn_test,
        generator_path: Some(path),
        generator_sha: Some(sha),
        generator_epochs_run: Some(generator.manifest().epochs_run),
    })
}

fn empty_synthetic_like(set: &LabeledImageSet) -> Result<LabeledImageSet> {
    let (h, w, c) = set.image_shape();
    LabeledImageSet::with_uniform_provenance(
        "empty_synthetic",
        Array4::zeros((0, h, w, c)),
        Vec::new(),
        set.num_classes(),
        Provenance::Synthetic,
    )
}

fn read_cell_records(path: &Path) -> Result<Vec<CellRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let complete = text.ends_with('\n');
    let count = text.lines().count();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CellRecord>(line) {
            Ok(r) => out.push(r),
            Err(e) => {
                // A torn final line from an interrupted run is recoverable;
                // anything else is corruption worth failing on.
                if i + 1 == count && !complete {
                    log::warn!("ignoring torn final record in {}", path.display());
                    break;
                }
                return Err(Error::Format(format!(
                    "{} line {}: {e}",
                    path.display(),
                    i + 1
                )));
            }
        }
    }
    Ok(out)
}

struct Sink {
    csv: fs::File,
    csv_path: PathBuf,
    cells: fs::File,
    cells_path: PathBuf,
    done: Vec<ExperimentResult>,
    failed: usize,
}

impl Sink {
    fn append(file: &mut fs::File, path: &Path, line: &str) -> Result<()> {
        file.write_all(line.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|e| Error::io(path, e))
    }

    fn record_done(&mut self, r: ExperimentResult) -> Result<()> {
        Sink::append(&mut self.csv, &self.csv_path, &r.csv_line())?;
        let line = serde_json::to_string(&CellRecord::Done(r.clone()))
            .map_err(|e| Error::Format(format!("serialize cell record: {e}")))?;
        Sink::append(&mut self.cells, &self.cells_path, &format!("{line}\n"))?;
        self.done.push(r);
        Ok(())
    }

    fn record_failed(&mut self, record: CellRecord) -> Result<()> {
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Format(format!("serialize cell record: {e}")))?;
        Sink::append(&mut self.cells, &self.cells_path, &format!("{line}\n"))?;
        self.failed += 1;
        Ok(())
    }
}

/// Open for append, creating the file (plus a repair newline if a crash
/// left a torn final line).
fn open_append(path: &Path, header: Option<&str>) -> Result<fs::File> {
    let existing = match fs::read(path) {
        Ok(b) => Some(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let body = existing.as_deref().unwrap_or(&[]);
    if body.is_empty() {
        if let Some(h) = header {
            file.write_all(format!("{h}\n").as_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
    } else if body.last() != Some(&b'\n') {
        file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(file)
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_json_atomic(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("serialize manifest: {e}")))?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct PendingCell {
    cell_index: usize,
    seed: u64,
    key: String,
    classifier_seed: u64,
    mix_seed: u64,
}

fn run_cell(
    config: &ExperimentConfig,
    cell: &GridCell,
    p: &PendingCell,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    corrupted: Option<&LabeledImageSet>,
    synth: Option<&SeedSynthetics>,
    empty_pool: &LabeledImageSet,
    total: usize,
) -> Result<ExperimentResult> {
    let t0 = Instant::now();
    let (train_used, mix_audit) = if cell.train == Composition::Original && total == train.len() {
        // The paper's baseline rows use the full original split verbatim;
        // subsampling it to its own size would only churn the order.
        (train.clone(), audit(train))
    } else {
        let spec = MixtureSpec {
            ratio: cell.train.as_ratio(),
            total,
            seed: p.mix_seed,
            class_balanced: cell.class_balanced.unwrap_or(true),
        };
        let pool = synth.map(|s| &s.pool).unwrap_or(empty_pool);
        let composed = compose(train, pool, &spec)?;
        let a = audit(&composed);
        (composed, a)
    };
    debug_assert_eq!(mix_audit.n_original + mix_audit.n_synthetic, total);

    let target = match cell.test {
        TestTarget::Original => test,
        TestTarget::Corrupted => corrupted
            .ok_or_else(|| Error::Validation("no corrupted test set prepared".into()))?,
        TestTarget::Synthetic => synth
            .and_then(|s| s.test.as_ref())
            .ok_or_else(|| Error::Validation("no synthetic test set prepared".into()))?,
    };

    let cfg = config.classifier.to_config(p.classifier_seed);
    let model = train_classifier(&train_used, &cfg)?;
    let report = model.evaluate(target)?;

    let model_path = config
        .output_dir
        .join("classifiers")
        .join(format!("{}.ck", &p.key[..32]));
    model.save(&model_path)?;
    let classifier_sha256 = file_sha256(&model_path)?;

    Ok(ExperimentResult {
        cell_key: p.key.clone(),
        dataset: config.dataset.tag().to_string(),
        train_composition: cell.train.to_string(),
        test_set: cell.test.tag().to_string(),
        seed: p.seed,
        accuracy: report.accuracy,
        per_class_accuracy: report
            .per_class
            .iter()
            .map(|&v| if v.is_nan() { None } else { Some(v) })
            .collect(),
        audit: mix_audit,
        wall_time_s: t0.elapsed().as_secs_f64(),
        generator_sha256: if cell.needs_synthetic() {
            synth.and_then(|s| s.generator_sha.clone())
        } else {
            None
        },
        classifier_sha256,
    })
}

/// Execute every `(cell, seed)` in the grid, skipping cells already
/// recorded as done in the output directory, and return one result per
/// pair in grid order. Failures are recorded and do not stop the run.
pub fn run_grid(config: &ExperimentConfig) -> Result<Vec<ExperimentResult>> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let (train, test) = load_dataset(config)?;
    let total = config.total.unwrap_or(train.len());
    let corrupted = prepare_corrupted(config, &test)?;
    let train_fingerprint = set_fingerprint(&train);
    let test_fingerprint = set_fingerprint(&test);

    let cells_path = out.join(CELLS_FILE);
    let mut completed: HashMap<String, ExperimentResult> = HashMap::new();
    if cells_path.exists() {
        for record in read_cell_records(&cells_path)? {
            if let CellRecord::Done(r) = record {
                completed.insert(r.cell_key.clone(), r);
            }
        }
    }

    let bases: Vec<[u8; 32]> = config
        .grid
        .iter()
        .map(|c| cell_base_hash(config, c, total))
        .collect();
    let mut pending: Vec<PendingCell> = Vec::new();
    let mut resumed = 0usize;
    for (ci, base) in bases.iter().enumerate() {
        let k64 = key64(base);
        for &seed in &config.seeds {
            let key = cell_key(base, seed);
            if completed.contains_key(&key) {
                resumed += 1;
                continue;
            }
            pending.push(PendingCell {
                cell_index: ci,
                seed,
                key,
                classifier_seed: derive_seed(seed, "classifier", k64),
                mix_seed: derive_seed(seed, "mix", k64),
            });
        }
    }
    if resumed > 0 {
        log::info!("resuming: {resumed} cells already done");
    }

    // Synthetic material, only for seeds that still have cells needing it.
    let cache_dir = config.effective_cache_dir();
    let needs_pool =
        |p: &PendingCell| config.grid[p.cell_index].needs_synthetic();
    let external = if pending.iter().any(needs_pool) {
        config
            .gan
            .as_ref()
            .and_then(|g| g.external_synthetic.as_ref())
            .map(|p| load_image_directory(p, train.num_classes()))
            .transpose()?
    } else {
        None
    };
    let mut synthetic: BTreeMap<u64, SeedSynthetics> = BTreeMap::new();
    for &seed in &config.seeds {
        if !pending.iter().any(|p| p.seed == seed && needs_pool(p)) {
            continue;
        }
        let wants_test = pending
            .iter()
            .any(|p| p.seed == seed && config.grid[p.cell_index].test == TestTarget::Synthetic);
        let s = prepare_synthetics(
            config,
            &train,
            &test,
            external.as_ref(),
            seed,
            wants_test,
            &cache_dir,
            &train_fingerprint,
            total,
        )?;
        synthetic.insert(seed, s);
    }
    let empty_pool = empty_synthetic_like(&train)?;

    let results_path = out.join(RESULTS_FILE);
    let sink = Mutex::new(Sink {
        csv: open_append(&results_path, Some(CSV_HEADER))?,
        csv_path: results_path.clone(),
        cells: open_append(&cells_path, None)?,
        cells_path: cells_path.clone(),
        done: Vec::new(),
        failed: 0,
    });

    let workers = config.effective_workers().max(1).min(pending.len().max(1));
    if !pending.is_empty() {
        log::info!("running {} cells on {workers} workers", pending.len());
    }
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let sink_error: Mutex<Option<Error>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= pending.len() {
                    break;
                }
                let p = &pending[i];
                let cell = &config.grid[p.cell_index];
                let outcome = run_cell(
                    config,
                    cell,
                    p,
                    &train,
                    &test,
                    corrupted.as_ref(),
                    synthetic.get(&p.seed),
                    &empty_pool,
                    total,
                );
                let mut sink = sink.lock().expect("sink lock");
                let io = match outcome {
                    Ok(r) => {
                        log::info!(
                            "cell {}/{} seed {}: accuracy {:.4}",
                            r.train_composition,
                            r.test_set,
                            r.seed,
                            r.accuracy
                        );
                        sink.record_done(r)
                    }
                    Err(e) => {
                        log::error!(
                            "cell {}/{} seed {} failed: {e}",
                            cell.train,
                            cell.test,
                            p.seed
                        );
                        sink.record_failed(CellRecord::Failed {
                            cell_key: p.key.clone(),
                            dataset: config.dataset.tag().to_string(),
                            train_composition: cell.train.to_string(),
                            test_set: cell.test.tag().to_string(),
                            seed: p.seed,
                            message: e.to_string(),
                        })
                    }
                };
                if let Err(e) = io {
                    *sink_error.lock().expect("error slot") = Some(e);
                    stop.store(true, Ordering::Relaxed);
                    break;
                }
            });
        }
    });

    if let Some(e) = sink_error.into_inner().expect("error slot") {
        return Err(e);
    }
    let sink = sink.into_inner().expect("sink lock");

    let generators: BTreeMap<String, serde_json::Value> = synthetic
        .iter()
        .map(|(seed, s)| {
            (
                seed.to_string(),
                serde_json::json!({
                    "path": s.generator_path.as_ref().map(|p| p.display().to_string()),
                    "sha256": s.generator_sha,
                    "epochs_run": s.generator_epochs_run,
                }),
            )
        })
        .collect();
    let done_total = completed.len() + sink.done.len();
    let manifest = serde_json::json!({
        "created_unix": unix_now(),
        "tool": {"name": "synthmix", "version": env!("CARGO_PKG_VERSION")},
        "config": config,
        "materialized": {
            "classifier": config.classifier.to_config(0),
            "classifier_seed": "derived per cell from the replication seed",
            "total": total,
            "workers": workers,
            "cache_dir": cache_dir.display().to_string(),
        },
        "constants": pipeline_constants(),
        "data": {
            "train_sha256": train_fingerprint,
            "test_sha256": test_fingerprint,
            "n_train": train.len(),
            "n_test": test.len(),
        },
        "generators": generators,
        "cells": {
            "total": config.grid.len() * config.seeds.len(),
            "done": done_total,
            "failed": sink.failed,
        },
        "files": {"results": RESULTS_FILE, "cells": CELLS_FILE},
    });
    write_json_atomic(&out.join(MANIFEST_FILE), &manifest)?;

    let mut by_key = completed;
    for r in sink.done {
        by_key.insert(r.cell_key.clone(), r);
    }
    let mut results = Vec::new();
    for base in &bases {
        for &seed in &config.seeds {
            if let Some(r) = by_key.remove(&cell_key(base, seed)) {
                results.push(r);
            }
        }
    }
    Ok(results)
}

/// Row schema of the results CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub train_composition: String,
    pub test_set: String,
    pub seed: u64,
    pub accuracy: f64,
    pub n_original: usize,
    pub n_synthetic: usize,
    pub wall_time_s: f64,
}

/// Strict parse of a results CSV: exact header, typed rows, accuracies
/// within `[0, 1]`.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let expected: Vec<&str> = CSV_HEADER.split(',').collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Format(format!(
            "{}: header {:?}, expected {CSV_HEADER:?}",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.deserialize::<ResultRow>().enumerate() {
        let row = record.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if !(0.0..=1.0).contains(&row.accuracy) {
            return Err(Error::Format(format!(
                "{} row {}: accuracy {} out of [0,1]",
                path.display(),
                i + 1,
                row.accuracy
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn mean_spread(values: &[f64]) -> (f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let max = values.iter().cloned().fold(f64::MIN, f64::max);
    let min = values.iter().cloned().fold(f64::MAX, f64::min);
    (mean, (max - min) / 2.0)
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            let c = c.to_ascii_lowercase();
            if c.is_ascii_alphanumeric() {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn first_appearance<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for item in items {
        if !out.iter().any(|o| o == item) {
            out.push(item.to_string());
        }
    }
    out
}

fn test_display_order(rows: &[&ResultRow]) -> Vec<String> {
    let mut out = Vec::new();
    for known in ["original", "synthetic", "corrupted"] {
        if rows.iter().any(|r| r.test_set == known) {
            out.push(known.to_string());
        }
    }
    for r in rows {
        if !out.contains(&r.test_set) {
            out.push(r.test_set.clone());
        }
    }
    out
}

/// Render `report.md`, `summary.csv`, and one accuracy-vs-composition PNG
/// per `(dataset, test set)` from a results CSV. Re-emitting from the same
/// file is byte-identical except for the timestamp line; returns the list
/// of files written.
pub fn emit_report(results_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_results(results_path)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let datasets = first_appearance(rows.iter().map(|r| r.dataset.as_str()));
    let mut written = Vec::new();
    let mut md = String::new();
    md.push_str("# Synthmix report\n\n");
    md.push_str(&format!("Generated: unix {}\n\n", unix_now()));
    md.push_str(&format!(
        "Source: {} ({} rows). Entries are mean accuracy over seeds; with more \
         than one seed the half-range is appended as `+/-`.\n",
        results_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| results_path.display().to_string()),
        rows.len()
    ));

    let mut summary = String::new();
    summary.push_str("dataset,train_composition,test_set,seeds,mean_accuracy,spread,n_original,n_synthetic\n");

    for ds in &datasets {
        let ds_rows: Vec<&ResultRow> = rows.iter().filter(|r| &r.dataset == ds).collect();
        let comps = first_appearance(ds_rows.iter().map(|r| r.train_composition.as_str()));
        let tests = test_display_order(&ds_rows);
        let group = |c: &str, t: &str| -> Vec<&&ResultRow> {
            ds_rows
                .iter()
                .filter(|r| r.train_composition == c && r.test_set == t)
                .collect()
        };

        md.push_str(&format!("\n## {ds}\n\n"));
        md.push_str("| train / test |");
        for t in &tests {
            md.push_str(&format!(" {t} |"));
        }
        md.push_str("\n|---|");
        md.push_str(&"---|".repeat(tests.len()));
        md.push('\n');
        for c in &comps {
            md.push_str(&format!("| {c} |"));
            for t in &tests {
                let g = group(c, t);
                if g.is_empty() {
                    md.push_str(" - |");
                    continue;
                }
                let accs: Vec<f64> = g.iter().map(|r| r.accuracy).collect();
                let (mean, spread) = mean_spread(&accs);
                if accs.len() > 1 {
                    md.push_str(&format!(" {mean:.4} +/- {spread:.4} |"));
                } else {
                    md.push_str(&format!(" {mean:.4} |"));
                }
            }
            md.push('\n');
        }

        md.push_str("\nComposition sizes:\n\n| train | n original | n synthetic | seeds |\n|---|---|---|---|\n");
        for c in &comps {
            let g: Vec<&&ResultRow> = ds_rows
                .iter()
                .filter(|r| &r.train_composition == c)
                .collect();
            let mut seeds: Vec<u64> = g.iter().map(|r| r.seed).collect();
            seeds.sort_unstable();
            seeds.dedup();
            let first = g.first().expect("composition came from these rows");
            md.push_str(&format!(
                "| {c} | {} | {} | {} |\n",
                first.n_original,
                first.n_synthetic,
                seeds.len()
            ));
        }

        for (ti, t) in tests.iter().enumerate() {
            let points: Vec<(f64, f64)> = comps
                .iter()
                .enumerate()
                .filter_map(|(i, c)| {
                    let g = group(c, t);
                    if g.is_empty() {
                        return None;
                    }
                    let accs: Vec<f64> = g.iter().map(|r| r.accuracy).collect();
                    Some((i as f64, mean_spread(&accs).0))
                })
                .collect();
            if points.is_empty() {
                continue;
            }
            let plot = LinePlot {
                title: format!("{ds}: accuracy by training mix (test: {t})"),
                x_label: "train composition".into(),
                y_label: "accuracy".into(),
                x_ticks: comps
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (i as f64, c.clone()))
                    .collect(),
                series: vec![Series {
                    label: format!("test {t}"),
                    points,
                    color: PALETTE[ti % PALETTE.len()],
                }],
                y_range: None,
            };
            let file = format!("accuracy_{}_{}.png", sanitize(ds), sanitize(t));
            let path = out_dir.join(&file);
            plot.save(&path, 900, 540)?;
            md.push_str(&format!("\n![{ds} accuracy, test {t}]({file})\n"));
            written.push(path);
        }

        for c in &comps {
            for t in &tests {
                let g = group(c, t);
                if g.is_empty() {
                    continue;
                }
                let accs: Vec<f64> = g.iter().map(|r| r.accuracy).collect();
                let (mean, spread) = mean_spread(&accs);
                let first = g.first().expect("nonempty group");
                summary.push_str(&format!(
                    "{ds},{c},{t},{},{mean:.6},{spread:.6},{},{}\n",
                    accs.len(),
                    first.n_original,
                    first.n_synthetic
                ));
            }
        }
    }

    let report_path = out_dir.join(REPORT_FILE);
    fs::write(&report_path, md).map_err(|e| Error::io(&report_path, e))?;
    written.push(report_path);
    let summary_path = out_dir.join(SUMMARY_FILE);
    fs::write(&summary_path, summary).map_err(|e| Error::io(&summary_path, e))?;
    written.push(summary_path);
    Ok(written)
}
