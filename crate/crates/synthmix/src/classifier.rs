//! CNN classifiers: two fixed architectures, plain Adam training, and the
//! evaluation / feature-extraction entry points the rest of the pipeline
//! builds on.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis, Ix2};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::nn::{
    softmax_cross_entropy, Adam, Conv2d, Dense, Flatten, Layer, MaxPool2, Net, Relu,
};
use crate::rng::stream_rng;

/// Evaluation batch size; training batch size lives in the config.
pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "SIMPLE_CNN")]
    SimpleCnn,
    #[serde(rename = "DEEP_CNN")]
    DeepCnn,
}

impl Architecture {
    pub fn tag(&self) -> &'static str {
        match self {
            Architecture::SimpleCnn => "SIMPLE_CNN",
            Architecture::DeepCnn => "DEEP_CNN",
        }
    }

    /// Two valid-padding conv+pool stages, then a 128-wide head.
    fn build_simple(
        c_in: usize,
        h: usize,
        w: usize,
        classes: usize,
        rng: &mut crate::rng::Rng,
    ) -> Result<Net<f32>> {
        let stage = |s: usize| (s.checked_sub(2).unwrap_or(0)) / 2; // conv k3 valid, pool 2
        let (h1, w1) = (stage(h), stage(w));
        let (h2, w2) = (stage(h1), stage(w1));
        if h2 == 0 || w2 == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} too small for SIMPLE_CNN (needs at least 10x10)"
            )));
        }
        let flat = 64 * h2 * w2;
        Ok(Net::new(vec![
            Box::new(Conv2d::<f32>::new(c_in, 32, 3, 1, 0, "conv1", rng)),
            Box::new(Relu::new()),
            Box::new(MaxPool2::new()),
            Box::new(Conv2d::<f32>::new(32, 64, 3, 1, 0, "conv2", rng)),
            Box::new(Relu::new()),
            Box::new(MaxPool2::new()),
            Box::new(Flatten::new()),
            Box::new(Dense::<f32>::new(flat, 128, "dense1", rng)),
            Box::new(Relu::new()),
            Box::new(Dense::<f32>::new(128, classes, "dense2", rng)),
        ]))
    }

    /// Three same-padding double-conv blocks (32, 64, 128 channels), each
    /// followed by 2x2 pooling, then the same 128-wide head.
    fn build_deep(
        c_in: usize,
        h: usize,
        w: usize,
        classes: usize,
        rng: &mut crate::rng::Rng,
    ) -> Result<Net<f32>> {
        let (h3, w3) = (h / 8, w / 8);
        if h3 == 0 || w3 == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} too small for DEEP_CNN (needs at least 8x8)"
            )));
        }
        let mut layers: Vec<Box<dyn Layer<f32>>> = Vec::new();
        let mut prev = c_in;
        for (bi, ch) in [32usize, 64, 128].into_iter().enumerate() {
            let b = bi + 1;
            layers.push(Box::new(Conv2d::<f32>::new(
                prev,
                ch,
                3,
                1,
                1,
                &format!("block{b}.conv1"),
                rng,
            )));
            layers.push(Box::new(Relu::new()));
            layers.push(Box::new(Conv2d::<f32>::new(
                ch,
                ch,
                3,
                1,
                1,
                &format!("block{b}.conv2"),
                rng,
            )));
            layers.push(Box::new(Relu::new()));
            layers.push(Box::new(MaxPool2::new()));
            prev = ch;
        }
        layers.push(Box::new(Flatten::new()));
        layers.push(Box::new(Dense::<f32>::new(128 * h3 * w3, 128, "dense1", rng)));
        layers.push(Box::new(Relu::new()));
        layers.push(Box::new(Dense::<f32>::new(128, classes, "dense2", rng)));
        Ok(Net::new(layers))
    }

    fn build(
        &self,
        shape: (usize, usize, usize),
        classes: usize,
        rng: &mut crate::rng::Rng,
    ) -> Result<Net<f32>> {
        let (h, w, c) = shape;
        match self {
            Architecture::SimpleCnn => Self::build_simple(c, h, w, classes, rng),
            Architecture::DeepCnn => Self::build_deep(c, h, w, classes, rng),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SIMPLE_CNN" => Ok(Architecture::SimpleCnn),
            "DEEP_CNN" => Ok(Architecture::DeepCnn),
            other => Err(Error::Validation(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Training hyperparameters. The two presets carry the defaults every
/// benchmark cell uses; override fields for experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub arch: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn simple_cnn(seed: u64) -> Self {
        ClassifierConfig {
            arch: Architecture::SimpleCnn,
            epochs: 10,
            batch_size: 128,
            learning_rate: 1e-4,
            seed,
        }
    }

    pub fn deep_cnn(seed: u64) -> Self {
        ClassifierConfig {
            arch: Architecture::DeepCnn,
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Validation(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// A trained network plus the input contract it was trained under.
pub struct TrainedClassifier {
    net: Net<f32>,
    arch: Architecture,
    input_shape: (usize, usize, usize),
    num_classes: usize,
}

/// Accuracy summary from a labeled evaluation set.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Per-class accuracy; `NaN` for classes absent from the set.
    pub per_class: Vec<f64>,
    /// Rows are true classes, columns predicted.
    pub confusion: Array2<usize>,
    pub n: usize,
}

/// Train a fresh network. Initialization, shuffling, and therefore the
/// final weights are fully determined by `config.seed`.
pub fn train_classifier(
    train: &LabeledImageSet,
    config: &ClassifierConfig,
) -> Result<TrainedClassifier> {
    config.validate()?;
    if train.len() == 0 {
        return Err(Error::Validation("training set is empty".into()));
    }
    let mut rng = stream_rng(config.seed, "classifier-init", 0);
    let mut net = config.arch.build(train.image_shape(), train.num_classes(), &mut rng)?;
    let mut opt = Adam::new(config.learning_rate);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        use rand::seq::SliceRandom as _;
        order.shuffle(&mut stream_rng(config.seed, "classifier-shuffle", epoch as u64));
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let (x, labels) = train.batch_nchw(batch);
            let logits = net
                .forward(x.into_dyn())
                .into_dimensionality::<Ix2>()
                .expect("head output is 2-d");
            let (loss, grad) = softmax_cross_entropy(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    msg: format!("training loss became {loss}"),
                });
            }
            net.backward(grad.into_dyn());
            opt.step(&mut net.params_mut());
            epoch_loss += f64::from(loss);
            batches += 1;
        }
        log::info!(
            "{} epoch {}/{}: mean loss {:.4}",
            config.arch,
            epoch + 1,
            config.epochs,
            epoch_loss / batches as f64
        );
    }

    Ok(TrainedClassifier {
        net,
        arch: config.arch,
        input_shape: train.image_shape(),
        num_classes: train.num_classes(),
    })
}

/// Index of the row maximum; ties resolve to the lowest index.
pub(crate) fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl TrainedClassifier {
    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn check_compatible(&self, set: &LabeledImageSet) -> Result<()> {
        if set.image_shape() != self.input_shape {
            return Err(Error::Consistency(format!(
                "set {:?} has shape {:?}, classifier expects {:?}",
                set.name(),
                set.image_shape(),
                self.input_shape
            )));
        }
        if set.num_classes() != self.num_classes {
            return Err(Error::Consistency(format!(
                "set {:?} has {} classes, classifier expects {}",
                set.name(),
                set.num_classes(),
                self.num_classes
            )));
        }
        Ok(())
    }

    fn batched_infer(
        &self,
        set: &LabeledImageSet,
        upto: usize,
        what: &str,
    ) -> Result<Array2<f32>> {
        let indices: Vec<usize> = (0..set.len()).collect();
        let mut out: Option<Array2<f32>> = None;
        for batch in indices.chunks(EVAL_BATCH) {
            let (x, _) = set.batch_nchw(batch);
            let y = self
                .net
                .infer_prefix(&x.into_dyn(), upto)
                .into_dimensionality::<Ix2>()
                .expect("prefix output is 2-d");
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite {what} while running {} on {:?}",
                    self.arch,
                    set.name()
                )));
            }
            let target = out.get_or_insert_with(|| Array2::zeros((set.len(), y.ncols())));
            let start = batch[0];
            target
                .slice_mut(ndarray::s![start..start + batch.len(), ..])
                .assign(&y);
        }
        out.ok_or_else(|| Error::Validation(format!("{what}: empty evaluation set")))
    }

    /// Class predictions, argmax over logits with ties to the lowest index.
    pub fn predict(&self, set: &LabeledImageSet) -> Result<Vec<u8>> {
        self.check_compatible(set)?;
        let logits = self.batched_infer(set, self.net.len(), "logits")?;
        Ok(logits
            .axis_iter(Axis(0))
            .map(|row| argmax_row(row.as_slice().expect("row-major")) as u8)
            .collect())
    }

    pub fn evaluate(&self, set: &LabeledImageSet) -> Result<EvalReport> {
        let predictions = self.predict(set)?;
        let c = self.num_classes;
        let mut confusion = Array2::<usize>::zeros((c, c));
        for (i, &pred) in predictions.iter().enumerate() {
            confusion[[set.label(i), pred as usize]] += 1;
        }
        let correct: usize = (0..c).map(|k| confusion[[k, k]]).sum();
        let per_class: Vec<f64> = (0..c)
            .map(|k| {
                let row: usize = confusion.row(k).sum();
                if row == 0 {
                    f64::NAN
                } else {
                    confusion[[k, k]] as f64 / row as f64
                }
            })
            .collect();
        Ok(EvalReport {
            accuracy: correct as f64 / set.len() as f64,
            per_class,
            confusion,
            n: set.len(),
        })
    }

    /// Penultimate activations (the 128-wide hidden layer after its ReLU),
    /// one row per image.
    pub fn extract_features(&self, set: &LabeledImageSet) -> Result<Array2<f32>> {
        self.check_compatible(set)?;
        self.batched_infer(set, self.net.len() - 1, "features")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(self.arch.tag());
        let (h, w, c) = self.input_shape;
        ck.meta.insert("height".into(), h as i64);
        ck.meta.insert("width".into(), w as i64);
        ck.meta.insert("channels".into(), c as i64);
        ck.meta.insert("num_classes".into(), self.num_classes as i64);
        for p in self.net.params() {
            ck.push(p.name.clone(), p.value.clone());
        }
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let arch: Architecture = ck.arch.parse()?;
        let shape = (
            ck.meta("height")? as usize,
            ck.meta("width")? as usize,
            ck.meta("channels")? as usize,
        );
        let classes = ck.meta("num_classes")? as usize;
        let mut rng = stream_rng(0, "classifier-load", 0);
        let mut net = arch.build(shape, classes, &mut rng)?;
        ck.apply(net.params_mut())?;
        Ok(TrainedClassifier {
            net,
            arch,
            input_shape: shape,
            num_classes: classes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;
    use ndarray::Array4;

    /// Classes are bright 3x3 blocks in class-specific corners; trivially
    /// separable, so a few epochs must overfit it.
    fn blob_set(n: usize, classes: usize, side: usize, seed: u64) -> LabeledImageSet {
        use rand::Rng as _;
        let mut rng = stream_rng(seed, "blob-set", 0);
        let mut images = Array4::<f32>::zeros((n, side, side, 1));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % classes;
            let (cy, cx) = match class % 4 {
                0 => (0, 0),
                1 => (0, side - 3),
                2 => (side - 3, 0),
                _ => (side - 3, side - 3),
            };
            for dy in 0..3 {
                for dx in 0..3 {
                    images[[i, cy + dy, cx + dx, 0]] = 1.0;
                }
            }
            for y in 0..side {
                for x in 0..side {
                    let v = images[[i, y, x, 0]] + rng.gen_range(0.0..0.05);
                    images[[i, y, x, 0]] = v.min(1.0);
                }
            }
            labels.push(class as u8);
        }
        LabeledImageSet::new("blobs", images, labels, classes, vec![Provenance::Real; n])
            .unwrap()
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        assert_eq!(argmax_row(&[0.1, 0.9, 0.9]), 1);
        assert_eq!(argmax_row(&[0.5, 0.5, 0.5]), 0);
        assert_eq!(argmax_row(&[-1.0, -2.0]), 0);
        assert_eq!(argmax_row(&[1.0]), 0);
    }

    #[test]
    fn simple_cnn_overfits_separable_blobs() {
        let set = blob_set(96, 4, 12, 1);
        let config = ClassifierConfig {
            arch: Architecture::SimpleCnn,
            epochs: 15,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 5,
        };
        let model = train_classifier(&set, &config).unwrap();
        let report = model.evaluate(&set).unwrap();
        assert!(
            report.accuracy >= 0.95,
            "train accuracy {}, confusion {:?}",
            report.accuracy,
            report.confusion
        );
        let diag: usize = (0..4).map(|k| report.confusion[[k, k]]).sum();
        assert_eq!(diag, (report.accuracy * 96.0).round() as usize);
    }

    #[test]
    fn untrained_model_sits_at_chance() {
        let set = blob_set(200, 4, 12, 2);
        let config = ClassifierConfig {
            epochs: 0,
            ..ClassifierConfig::simple_cnn(3)
        };
        let model = train_classifier(&set, &config).unwrap();
        let report = model.evaluate(&set).unwrap();
        assert!(
            (report.accuracy - 0.25).abs() < 0.2,
            "untrained accuracy {}",
            report.accuracy
        );
    }

    #[test]
    fn training_is_seed_deterministic() {
        let set = blob_set(64, 4, 12, 4);
        let config = ClassifierConfig {
            arch: Architecture::SimpleCnn,
            epochs: 2,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 9,
        };
        let a = train_classifier(&set, &config).unwrap();
        let b = train_classifier(&set, &config).unwrap();
        for (pa, pb) in a.net.params().iter().zip(b.net.params().iter()) {
            assert_eq!(pa.name, pb.name);
            for (x, y) in pa.value.iter().zip(pb.value.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{} diverged", pa.name);
            }
        }
        let c = train_classifier(&set, &ClassifierConfig { seed: 10, ..config }).unwrap();
        let same = a
            .net
            .params()
            .iter()
            .zip(c.net.params().iter())
            .all(|(pa, pc)| pa.value == pc.value);
        assert!(!same, "different seeds must land on different weights");
    }

    #[test]
    fn features_are_penultimate_width() {
        let set = blob_set(32, 4, 12, 6);
        let config = ClassifierConfig {
            epochs: 1,
            batch_size: 16,
            ..ClassifierConfig::simple_cnn(7)
        };
        let model = train_classifier(&set, &config).unwrap();
        let features = model.extract_features(&set).unwrap();
        assert_eq!(features.dim(), (32, 128));
        assert!(features.iter().all(|v| v.is_finite()));
        assert!(features.iter().all(|&v| v >= 0.0), "post-ReLU features");
    }

    #[test]
    fn save_load_round_trips_predictions() {
        let set = blob_set(48, 4, 12, 8);
        let config = ClassifierConfig {
            epochs: 2,
            batch_size: 16,
            ..ClassifierConfig::simple_cnn(11)
        };
        let model = train_classifier(&set, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.ck");
        model.save(&path).unwrap();
        let back = TrainedClassifier::load(&path).unwrap();
        assert_eq!(back.arch(), Architecture::SimpleCnn);
        assert_eq!(model.predict(&set).unwrap(), back.predict(&set).unwrap());
        let (fa, fb) = (
            model.extract_features(&set).unwrap(),
            back.extract_features(&set).unwrap(),
        );
        assert_eq!(fa, fb);
    }

    #[test]
    fn evaluate_rejects_shape_mismatch() {
        let set = blob_set(16, 4, 12, 12);
        let config = ClassifierConfig {
            epochs: 0,
            ..ClassifierConfig::simple_cnn(1)
        };
        let model = train_classifier(&set, &config).unwrap();
        let other = blob_set(8, 4, 16, 13);
        assert!(matches!(
            model.evaluate(&other),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let set = blob_set(8, 4, 12, 1);
        let bad_lr = ClassifierConfig {
            learning_rate: f64::NAN,
            ..ClassifierConfig::simple_cnn(1)
        };
        assert!(matches!(
            train_classifier(&set, &bad_lr),
            Err(Error::Validation(_))
        ));
        let bad_batch = ClassifierConfig {
            batch_size: 0,
            ..ClassifierConfig::simple_cnn(1)
        };
        assert!(matches!(
            train_classifier(&set, &bad_batch),
            Err(Error::Validation(_))
        ));
        let tiny = blob_set(8, 4, 6, 1);
        assert!(matches!(
            train_classifier(&tiny, &ClassifierConfig::simple_cnn(1)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn deep_cnn_builds_and_runs_one_batch() {
        let set = blob_set(16, 4, 16, 14);
        let config = ClassifierConfig {
            epochs: 1,
            batch_size: 8,
            ..ClassifierConfig::deep_cnn(2)
        };
        let model = train_classifier(&set, &config).unwrap();
        let report = model.evaluate(&set).unwrap();
        assert_eq!(report.n, 16);
        assert_eq!(report.confusion.sum(), 16);
    }
}
