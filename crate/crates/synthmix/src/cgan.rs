//! Class-conditional GAN for the 28x28 image families.
//!
//! Generator and discriminator follow the usual DCGAN shapes scaled down to
//! 28x28: the generator projects latent noise plus a label embedding to a
//! 7x7 map and upsamples twice with fractionally strided convolutions; the
//! discriminator consumes the image with its label embedded as an extra
//! input channel. Training alternates one discriminator step (combined
//! real and fake batch) with one generator step per batch.
//!
//! Generated pixels land in `[0,1]` because the output layer is a sigmoid;
//! nothing is ever clipped.

use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, Array4, ArrayD, ArrayView4, Axis, Ix2, Ix4};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::classifier::{train_classifier, ClassifierConfig, TrainedClassifier};
use crate::data::{subsample_per_class, LabeledImageSet, Provenance};
use crate::error::{Error, Result};
use crate::fid::{frechet_distance, FeatureStats};
use crate::nn::{
    bce_with_logits, Adam, Conv2d, Dense, Embedding, Flatten, Float, LeakyRelu, Net, Param, Relu,
    Reshape, Sigmoid, TConv2d,
};
use crate::rng::{derive_seed, stream_rng, Rng};

const GENERATOR_ARCH: &str = "CGAN_G";
/// Width of the generator's label embedding.
pub const LABEL_EMBED_DIM: usize = 50;
/// Inference batch size when sampling from a trained generator.
pub const GEN_BATCH: usize = 256;
/// Negative-side slope of the discriminator's activations.
pub const DISC_LEAKY_SLOPE: f64 = 0.2;

/// GAN training hyperparameters. [`GanTrainConfig::defaults`] carries the
/// published settings; the monitor fields control the Frechet-distance
/// probe that drives early stopping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanTrainConfig {
    pub latent_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub d_learning_rate: f64,
    pub g_learning_rate: f64,
    pub seed: u64,
    /// Probe the Frechet feature distance every this many epochs;
    /// 0 disables monitoring and with it the plateau stop.
    pub fid_probe_every: usize,
    /// Generated sample budget per probe, split evenly over classes.
    pub fid_probe_samples: usize,
    /// Stop when the best probe value has not improved by more than
    /// `plateau_min_rel` over this many consecutive probes.
    pub plateau_patience: usize,
    pub plateau_min_rel: f64,
    /// Training epochs for the internal feature classifier backing the
    /// probe. It only needs decent features, not benchmark accuracy.
    pub monitor_epochs: usize,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self::defaults(0)
    }
}

impl GanTrainConfig {
    pub fn defaults(seed: u64) -> Self {
        GanTrainConfig {
            latent_dim: 100,
            epochs: 50,
            batch_size: 100,
            d_learning_rate: 1e-4,
            g_learning_rate: 2e-5,
            seed,
            fid_probe_every: 1,
            fid_probe_samples: 1000,
            plateau_patience: 5,
            plateau_min_rel: 0.01,
            monitor_epochs: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Validation("latent_dim must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        for (name, lr) in [
            ("d_learning_rate", self.d_learning_rate),
            ("g_learning_rate", self.g_learning_rate),
        ] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::Validation(format!(
                    "{name} must be finite and non-negative, got {lr}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.plateau_min_rel) {
            return Err(Error::Validation(format!(
                "plateau_min_rel must be in [0,1), got {}",
                self.plateau_min_rel
            )));
        }
        if self.fid_probe_every > 0 && self.plateau_patience == 0 {
            return Err(Error::Validation(
                "plateau_patience must be positive when probing is enabled".into(),
            ));
        }
        Ok(())
    }
}

/// One Frechet-distance measurement from the training monitor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidProbe {
    pub epoch: usize,
    pub value: f64,
}

/// What a generator was trained on and how the run went. Stored verbatim
/// inside saved checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanManifest {
    pub dataset: String,
    pub config: GanTrainConfig,
    /// Epochs actually executed; less than `config.epochs` when the
    /// plateau stop fired.
    pub epochs_run: usize,
    /// `NaN` when no epoch ran; stored as JSON null.
    #[serde(with = "nan_as_null")]
    pub final_d_loss: f64,
    #[serde(with = "nan_as_null")]
    pub final_g_loss: f64,
    pub wall_time_s: f64,
    pub fid_trace: Vec<FidProbe>,
}

/// serde_json flattens non-finite floats to null on write but refuses
/// null on read; this makes `NaN` round-trip.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// A trained conditional generator plus the contract it samples under.
pub struct TrainedGenerator {
    embed: Embedding<f32>,
    net: Net<f32>,
    latent_dim: usize,
    num_classes: usize,
    image_shape: (usize, usize, usize),
    manifest: GanManifest,
}

struct Discriminator {
    embed: Embedding<f32>,
    net: Net<f32>,
    labels: Vec<u8>,
}

fn build_generator(
    latent_dim: usize,
    num_classes: usize,
    channels: usize,
    rng: &mut Rng,
) -> (Embedding<f32>, Net<f32>) {
    let embed = Embedding::new(num_classes, LABEL_EMBED_DIM, "g.embed", rng);
    let net = Net::new(vec![
        Box::new(Dense::<f32>::new(latent_dim + LABEL_EMBED_DIM, 64 * 7 * 7, "g.fc", rng)),
        Box::new(Relu::new()),
        Box::new(Reshape::new(&[64, 7, 7])),
        Box::new(TConv2d::<f32>::new(64, 32, 4, 2, 1, "g.up1", rng)),
        Box::new(Relu::new()),
        Box::new(TConv2d::<f32>::new(32, channels, 4, 2, 1, "g.up2", rng)),
        Box::new(Sigmoid::new()),
    ]);
    (embed, net)
}

fn build_discriminator(
    channels: usize,
    h: usize,
    w: usize,
    num_classes: usize,
    rng: &mut Rng,
) -> (Embedding<f32>, Net<f32>) {
    let embed = Embedding::new(num_classes, h * w, "d.embed", rng);
    let flat = 64 * (h / 4) * (w / 4);
    let net = Net::new(vec![
        Box::new(Conv2d::<f32>::new(channels + 1, 32, 4, 2, 1, "d.conv1", rng)),
        Box::new(LeakyRelu::new(DISC_LEAKY_SLOPE)),
        Box::new(Conv2d::<f32>::new(32, 64, 4, 2, 1, "d.conv2", rng)),
        Box::new(LeakyRelu::new(DISC_LEAKY_SLOPE)),
        Box::new(Flatten::new()),
        Box::new(Dense::<f32>::new(flat, 1, "d.out", rng)),
    ]);
    (embed, net)
}

/// Generator forward: latent noise concatenated with the label embedding,
/// through the net, out as `(N, C, H, W)`.
fn gen_forward<F: Float>(
    embed: &Embedding<F>,
    net: &mut Net<F>,
    z: &Array2<F>,
    labels: &[u8],
) -> Array4<F> {
    let e = embed.forward(labels);
    let input = ndarray::concatenate![Axis(1), z.view(), e.view()];
    net.forward(input.into_dyn())
        .into_dimensionality::<Ix4>()
        .expect("generator emits image batches")
}

/// Backward from an image-space gradient; splits the input gradient into
/// the (discarded) latent part and the embedding part.
fn gen_backward<F: Float>(
    embed: &mut Embedding<F>,
    net: &mut Net<F>,
    latent_dim: usize,
    labels: &[u8],
    grad: Array4<F>,
) {
    let gin = net
        .backward(grad.into_dyn())
        .into_dimensionality::<Ix2>()
        .expect("generator input is (N, latent + embed)");
    let ge = gin.slice(s![.., latent_dim..]).to_owned();
    embed.backward(labels, &ge);
}

/// Discriminator forward: the label embedding reshaped to an extra input
/// channel alongside the image.
fn disc_forward<F: Float>(
    embed: &Embedding<F>,
    net: &mut Net<F>,
    x: &ArrayView4<'_, F>,
    labels: &[u8],
) -> Array2<F> {
    let (n, _, h, w) = x.dim();
    let e = embed.forward(labels);
    debug_assert_eq!(e.ncols(), h * w, "label embedding must cover the image plane");
    let e4 = e.into_shape_with_order((n, 1, h, w)).expect("embedding is contiguous");
    let input = ndarray::concatenate![Axis(1), x.view(), e4.view()];
    net.forward(input.into_dyn())
        .into_dimensionality::<Ix2>()
        .expect("discriminator emits (N, 1) logits")
}

/// Backward through the discriminator; routes the label-channel gradient
/// into the embedding and returns the image-channel gradient.
fn disc_backward<F: Float>(
    embed: &mut Embedding<F>,
    net: &mut Net<F>,
    labels: &[u8],
    grad: Array2<F>,
) -> Array4<F> {
    let g = net
        .backward(grad.into_dyn())
        .into_dimensionality::<Ix4>()
        .expect("discriminator input is an image batch");
    let (n, c1, h, w) = g.dim();
    let gx = g.slice(s![.., ..c1 - 1, .., ..]).to_owned();
    let ge = g
        .index_axis(Axis(1), c1 - 1)
        .to_owned()
        .into_shape_with_order((n, h * w))
        .expect("sliced channel is contiguous");
    embed.backward(labels, &ge);
    gx
}

fn sample_noise(n: usize, dim: usize, rng: &mut Rng) -> Array2<f32> {
    Array2::from_shape_fn((n, dim), |_| rng.sample::<f32, _>(StandardNormal))
}

fn sample_labels(n: usize, num_classes: usize, rng: &mut Rng) -> Vec<u8> {
    (0..n).map(|_| rng.gen_range(0..num_classes as u8)).collect()
}

impl Discriminator {
    fn forward(&mut self, x: &ArrayView4<'_, f32>, labels: &[u8]) -> Array2<f32> {
        self.labels = labels.to_vec();
        disc_forward(&self.embed, &mut self.net, x, labels)
    }

    fn backward(&mut self, grad: Array2<f32>) -> Array4<f32> {
        let labels = std::mem::take(&mut self.labels);
        disc_backward(&mut self.embed, &mut self.net, &labels, grad)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        let mut v = vec![self.embed.param_mut()];
        v.extend(self.net.params_mut());
        v
    }
}

/// The Frechet-distance probe: a small classifier trained on the real data
/// supplies the feature space, and a fixed balanced real subset supplies
/// the reference statistics.
struct Monitor {
    model: TrainedClassifier,
    reference: FeatureStats,
    per_class: Vec<usize>,
}

impl Monitor {
    fn new(data: &LabeledImageSet, config: &GanTrainConfig) -> Result<Self> {
        let mut cc = ClassifierConfig::simple_cnn(derive_seed(config.seed, "gan-monitor", 0));
        cc.epochs = config.monitor_epochs;
        let model = train_classifier(data, &cc)?;

        let share = (config.fid_probe_samples / data.num_classes()).max(2);
        let per_class: Vec<usize> = data
            .label_histogram()
            .iter()
            .map(|&have| share.min(have))
            .collect();
        let reference_set =
            subsample_per_class(data, &per_class, derive_seed(config.seed, "gan-monitor-ref", 0))?;
        let feats = model.extract_features(&reference_set)?;
        let reference = FeatureStats::fit_f32(feats.view())?;
        Ok(Monitor { model, reference, per_class })
    }

    fn probe(&self, gen: &TrainedGenerator, epoch: usize) -> Result<f64> {
        let seed = derive_seed(gen.manifest.config.seed, "gan-probe", epoch as u64);
        let fake = gen.generate_synthetic_dataset(&self.per_class, seed)?;
        let feats = self.model.extract_features(&fake)?;
        frechet_distance(&FeatureStats::fit_f32(feats.view())?, &self.reference)
    }
}

/// Train a conditional generator on `data`. The run is a pure function of
/// `(data, config)`: initialization, shuffling, noise, and the monitor all
/// draw from streams derived from `config.seed`.
///
/// When probing is enabled, training stops early once the best probe value
/// has not improved by more than `plateau_min_rel` over `plateau_patience`
/// consecutive probes.
pub fn train_cgan(data: &LabeledImageSet, config: &GanTrainConfig) -> Result<TrainedGenerator> {
    config.validate()?;
    let (h, w, c) = data.image_shape();
    if (h, w) != (28, 28) {
        return Err(Error::Shape(format!(
            "conditional GAN expects 28x28 images, got {h}x{w}"
        )));
    }
    if data.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    if data.num_classes() < 2 {
        return Err(Error::Validation(
            "conditional GAN needs at least 2 classes".into(),
        ));
    }
    if data.num_classes() > 256 {
        return Err(Error::Validation(format!(
            "labels are u8, {} classes do not fit",
            data.num_classes()
        )));
    }
    if config.epochs > 0 && data.len() < config.batch_size {
        return Err(Error::Validation(format!(
            "batch_size {} exceeds dataset size {}",
            config.batch_size,
            data.len()
        )));
    }

    let mut init_rng = stream_rng(config.seed, "gan-init", 0);
    let (g_embed, g_net) = build_generator(config.latent_dim, data.num_classes(), c, &mut init_rng);
    let (d_embed, d_net) = build_discriminator(c, h, w, data.num_classes(), &mut init_rng);

    let mut gen = TrainedGenerator {
        embed: g_embed,
        net: g_net,
        latent_dim: config.latent_dim,
        num_classes: data.num_classes(),
        image_shape: (h, w, c),
        manifest: GanManifest {
            dataset: data.name().to_string(),
            config: config.clone(),
            epochs_run: 0,
            final_d_loss: f64::NAN,
            final_g_loss: f64::NAN,
            wall_time_s: 0.0,
            fid_trace: Vec::new(),
        },
    };
    let mut disc = Discriminator { embed: d_embed, net: d_net, labels: Vec::new() };
    let mut adam_g = Adam::new(config.g_learning_rate);
    let mut adam_d = Adam::new(config.d_learning_rate);

    let probing = config.fid_probe_every > 0 && config.fid_probe_every <= config.epochs;
    let monitor = if probing { Some(Monitor::new(data, config)?) } else { None };

    let start = Instant::now();
    // Running best after each probe; the plateau rule compares the current
    // best against the best from `plateau_patience` probes ago.
    let mut best_trace: Vec<f64> = Vec::new();

    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        use rand::seq::SliceRandom as _;
        order.shuffle(&mut stream_rng(config.seed, "gan-shuffle", epoch as u64));
        let mut noise = stream_rng(config.seed, "gan-noise", epoch as u64);

        let mut d_sum = 0.0f64;
        let mut g_sum = 0.0f64;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < config.batch_size {
                break; // keep the real and fake halves the same size
            }
            let b = chunk.len();

            // Discriminator step on a combined real + fake batch.
            let (x_real, y_real) = data.batch_nchw(chunk);
            let z = sample_noise(b, config.latent_dim, &mut noise);
            let y_fake = sample_labels(b, gen.num_classes, &mut noise);
            let x_fake = gen.infer_images(&z, &y_fake);
            let x = ndarray::concatenate![Axis(0), x_real.view(), x_fake.view()];
            let labels: Vec<u8> = y_real.iter().chain(y_fake.iter()).copied().collect();
            let logits = disc.forward(&x.view(), &labels);
            let mut targets = ArrayD::<f32>::zeros(vec![2 * b, 1]);
            targets.slice_mut(s![..b, ..]).fill(1.0);
            let (d_loss, grad) = bce_with_logits(&logits.into_dyn(), &targets);
            if !d_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    msg: format!("discriminator loss {d_loss}"),
                });
            }
            disc.backward(grad.into_dimensionality::<Ix2>().expect("loss grad is (N, 1)"));
            adam_d.step(&mut disc.params_mut());

            // Generator step with fresh noise against flipped targets.
            let z2 = sample_noise(b, config.latent_dim, &mut noise);
            let y2 = sample_labels(b, gen.num_classes, &mut noise);
            let imgs = gen.forward_images(&z2, &y2);
            let logits2 = disc.forward(&imgs.view(), &y2);
            let ones = ArrayD::<f32>::ones(vec![b, 1]);
            let (g_loss, grad2) = bce_with_logits(&logits2.into_dyn(), &ones);
            if !g_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    msg: format!("generator loss {g_loss}"),
                });
            }
            // The discriminator's parameter gradients from this pass are
            // overwritten by its next step; only the image gradient is used.
            let gx = disc.backward(grad2.into_dimensionality::<Ix2>().expect("loss grad is (N, 1)"));
            gen.backward_images(&y2, gx);
            adam_g.step(&mut gen.params_mut());

            d_sum += f64::from(d_loss);
            g_sum += f64::from(g_loss);
            batches += 1;
        }

        gen.manifest.epochs_run = epoch + 1;
        gen.manifest.final_d_loss = d_sum / batches as f64;
        gen.manifest.final_g_loss = g_sum / batches as f64;
        log::info!(
            "gan epoch {epoch}: d_loss {:.4} g_loss {:.4}",
            gen.manifest.final_d_loss,
            gen.manifest.final_g_loss
        );

        if let Some(monitor) = &monitor {
            if (epoch + 1) % config.fid_probe_every == 0 {
                let value = monitor.probe(&gen, epoch)?;
                gen.manifest.fid_trace.push(FidProbe { epoch, value });
                let best = best_trace.last().copied().unwrap_or(f64::INFINITY).min(value);
                best_trace.push(best);
                log::info!("gan epoch {epoch}: frechet {value:.3} (best {best:.3})");
                if best_trace.len() > config.plateau_patience {
                    let earlier = best_trace[best_trace.len() - 1 - config.plateau_patience];
                    if best > earlier * (1.0 - config.plateau_min_rel) {
                        log::info!(
                            "gan: plateau after epoch {epoch}, best {best:.3} vs {earlier:.3}"
                        );
                        break 'epochs;
                    }
                }
            }
        }
    }

    gen.manifest.wall_time_s = start.elapsed().as_secs_f64();
    Ok(gen)
}

impl TrainedGenerator {
    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `(height, width, channels)` of generated images.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape
    }

    pub fn manifest(&self) -> &GanManifest {
        &self.manifest
    }

    fn infer_images(&self, z: &Array2<f32>, labels: &[u8]) -> Array4<f32> {
        let e = self.embed.forward(labels);
        let input = ndarray::concatenate![Axis(1), z.view(), e.view()];
        self.net
            .infer(&input.into_dyn())
            .into_dimensionality::<Ix4>()
            .expect("generator emits image batches")
    }

    fn forward_images(&mut self, z: &Array2<f32>, labels: &[u8]) -> Array4<f32> {
        gen_forward(&self.embed, &mut self.net, z, labels)
    }

    fn backward_images(&mut self, labels: &[u8], grad: Array4<f32>) {
        gen_backward(&mut self.embed, &mut self.net, self.latent_dim, labels, grad);
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        let mut v = vec![self.embed.param_mut()];
        v.extend(self.net.params_mut());
        v
    }

    /// Generate `count` images of one class. Deterministic in
    /// `(generator, label, count, seed)`; the batch split used internally
    /// does not affect the pixels.
    pub fn sample(&self, label: usize, count: usize, seed: u64) -> Result<LabeledImageSet> {
        if label >= self.num_classes {
            return Err(Error::Range(format!(
                "label {label} out of range for {} classes",
                self.num_classes
            )));
        }
        if count == 0 {
            return Err(Error::Range("sample count must be at least 1".into()));
        }
        let (h, w, c) = self.image_shape;
        let labels = vec![label as u8; count];
        let mut images = Array4::<f32>::zeros((count, h, w, c));
        let mut rng = stream_rng(seed, "gan-sample", label as u64);
        let mut done = 0;
        while done < count {
            let b = GEN_BATCH.min(count - done);
            let z = sample_noise(b, self.latent_dim, &mut rng);
            let out = self.infer_images(&z, &labels[done..done + b]);
            for i in 0..b {
                images
                    .index_axis_mut(Axis(0), done + i)
                    .assign(&out.index_axis(Axis(0), i).permuted_axes([1, 2, 0]));
            }
            done += b;
        }
        LabeledImageSet::with_uniform_provenance(
            format!("synthetic_{label}"),
            images,
            labels,
            self.num_classes,
            Provenance::Synthetic,
        )
    }

    /// Generate a dataset with exactly `per_class[k]` images of class `k`,
    /// laid out class-major.
    pub fn generate_synthetic_dataset(
        &self,
        per_class: &[usize],
        seed: u64,
    ) -> Result<LabeledImageSet> {
        if per_class.len() != self.num_classes {
            return Err(Error::Consistency(format!(
                "per_class has {} entries for {} classes",
                per_class.len(),
                self.num_classes
            )));
        }
        let total: usize = per_class.iter().sum();
        let (h, w, c) = self.image_shape;
        let mut images = Array4::<f32>::zeros((total, h, w, c));
        let mut labels = Vec::with_capacity(total);
        let mut offset = 0;
        for (k, &n) in per_class.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let part = self.sample(k, n, derive_seed(seed, "gan-dataset", k as u64))?;
            images.slice_mut(s![offset..offset + n, .., .., ..]).assign(part.images());
            labels.extend(std::iter::repeat(k as u8).take(n));
            offset += n;
        }
        LabeledImageSet::with_uniform_provenance(
            "synthetic",
            images,
            labels,
            self.num_classes,
            Provenance::Synthetic,
        )
    }

    /// Write weights plus the training manifest. Atomic, bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(GENERATOR_ARCH);
        ck.note = serde_json::to_string(&self.manifest)
            .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
        let (h, w, c) = self.image_shape;
        ck.meta.insert("latent_dim".into(), self.latent_dim as i64);
        ck.meta.insert("num_classes".into(), self.num_classes as i64);
        ck.meta.insert("height".into(), h as i64);
        ck.meta.insert("width".into(), w as i64);
        ck.meta.insert("channels".into(), c as i64);
        ck.meta.insert("embed_dim".into(), self.embed.dim() as i64);
        ck.push(self.embed.param().name.clone(), self.embed.param().value.clone());
        for p in self.net.params() {
            ck.push(p.name.clone(), p.value.clone());
        }
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<TrainedGenerator> {
        let ck = Checkpoint::load(path)?;
        if ck.arch != GENERATOR_ARCH {
            return Err(Error::Format(format!(
                "{}: checkpoint holds a {:?}, not a {GENERATOR_ARCH}",
                path.display(),
                ck.arch
            )));
        }
        let dim = |key: &str| -> Result<usize> {
            let v = ck.meta(key)?;
            usize::try_from(v)
                .map_err(|_| Error::Format(format!("metadata {key} = {v} is not a valid size")))
        };
        let latent_dim = dim("latent_dim")?;
        let num_classes = dim("num_classes")?;
        let (h, w, c) = (dim("height")?, dim("width")?, dim("channels")?);
        let embed_dim = dim("embed_dim")?;
        if embed_dim != LABEL_EMBED_DIM {
            return Err(Error::Format(format!(
                "checkpoint embed_dim {embed_dim} does not match the architecture ({LABEL_EMBED_DIM})"
            )));
        }
        let manifest: GanManifest = serde_json::from_str(&ck.note)
            .map_err(|e| Error::Format(format!("{}: manifest: {e}", path.display())))?;

        let mut rng = stream_rng(0, "gan-load", 0);
        let (embed, net) = build_generator(latent_dim, num_classes, c, &mut rng);
        let mut gen = TrainedGenerator {
            embed,
            net,
            latent_dim,
            num_classes,
            image_shape: (h, w, c),
            manifest,
        };
        let targets = gen.params_mut();
        if targets.len() != ck.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, architecture has {}",
                ck.params.len(),
                targets.len()
            )));
        }
        ck.apply(targets)?;
        Ok(gen)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    /// Uniform-noise images with cycling labels; enough to drive the
    /// machinery, no structure to learn.
    fn noise_set(n: usize, classes: usize, seed: u64) -> LabeledImageSet {
        let mut rng = stream_rng(seed, "cgan-test-data", 0);
        let images = Array4::from_shape_fn((n, 28, 28, 1), |_| rng.gen_range(0.0..1.0f32));
        let labels: Vec<u8> = (0..n).map(|i| (i % classes) as u8).collect();
        LabeledImageSet::with_uniform_provenance("noise", images, labels, classes, Provenance::Real)
            .unwrap()
    }

    fn tiny_config(seed: u64, epochs: usize) -> GanTrainConfig {
        let mut c = GanTrainConfig::defaults(seed);
        c.epochs = epochs;
        c.batch_size = 10;
        c.fid_probe_every = 0;
        c
    }

    fn param_values(gen: &TrainedGenerator) -> Vec<ArrayD<f32>> {
        let mut v = vec![gen.embed.param().value.clone()];
        v.extend(gen.net.params().iter().map(|p| p.value.clone()));
        v
    }

    #[test]
    fn toy_pipeline_gradients_match_finite_differences() {
        // A scaled-down generator/discriminator pair, checked end to end
        // through both loss paths in f64. This covers the gradient routing
        // the layer tests cannot: the latent/embedding concat split and the
        // label-channel split.
        let mut rng = stream_rng(77, "cgan-gradcheck", 0);
        let classes = 2;
        let latent = 2;
        let g_embed_dim = 2;
        let mut g_embed = Embedding::<f64>::new(classes, g_embed_dim, "g.e", &mut rng);
        let mut g_net = Net::new(vec![
            Box::new(Dense::<f64>::new(latent + g_embed_dim, 8, "g.fc", &mut rng)) as Box<dyn crate::nn::Layer<f64>>,
            Box::new(Relu::new()),
            Box::new(Reshape::new(&[2, 2, 2])),
            Box::new(TConv2d::<f64>::new(2, 1, 2, 2, 1, "g.up", &mut rng)),
            Box::new(Sigmoid::new()),
        ]);
        let mut d_embed = Embedding::<f64>::new(classes, 4, "d.e", &mut rng);
        let mut d_net = Net::new(vec![
            Box::new(Conv2d::<f64>::new(2, 2, 2, 2, 0, "d.c", &mut rng)) as Box<dyn crate::nn::Layer<f64>>,
            Box::new(LeakyRelu::new(0.2)),
            Box::new(Flatten::new()),
            Box::new(Dense::<f64>::new(2, 1, "d.out", &mut rng)),
        ]);

        let n = 3;
        let z = Array2::from_shape_fn((n, latent), |_| rng.gen_range(-1.0..1.0f64));
        let labels = vec![0u8, 1, 0];
        let targets = ArrayD::from_shape_fn(vec![n, 1], |_| rng.gen_range(0.0..1.0f64));

        let loss = |g_embed: &mut Embedding<f64>,
                        g_net: &mut Net<f64>,
                        d_embed: &Embedding<f64>,
                        d_net: &mut Net<f64>| {
            let imgs = gen_forward(g_embed, g_net, &z, &labels);
            let logits = disc_forward(d_embed, d_net, &imgs.view(), &labels);
            bce_with_logits(&logits.into_dyn(), &targets)
        };

        // Analytic gradients for every parameter in both networks.
        let (_, grad) = loss(&mut g_embed, &mut g_net, &d_embed, &mut d_net);
        let gx = disc_backward(&mut d_embed, &mut d_net, &labels, grad.into_dimensionality().unwrap());
        gen_backward(&mut g_embed, &mut g_net, latent, &labels, gx);
        let analytic: Vec<ArrayD<f64>> = {
            let mut v = vec![g_embed.param().grad.clone()];
            v.extend(g_net.params().iter().map(|p| p.grad.clone()));
            v.push(d_embed.param().grad.clone());
            v.extend(d_net.params().iter().map(|p| p.grad.clone()));
            v
        };

        let h = 1e-5;
        let mut checked = 0usize;
        let total: usize = analytic.iter().map(|g| g.len()).sum();
        assert!(total <= 200, "toy pair grew past the budget: {total}");
        for (pi, want) in analytic.iter().enumerate() {
            for idx in 0..want.len() {
                let read = |g_embed: &mut Embedding<f64>,
                            g_net: &mut Net<f64>,
                            d_embed: &mut Embedding<f64>,
                            d_net: &mut Net<f64>,
                            delta: f64| {
                    {
                        let mut params = vec![g_embed.param_mut()];
                        params.extend(g_net.params_mut());
                        params.push(d_embed.param_mut());
                        params.extend(d_net.params_mut());
                        *params[pi].value.as_slice_memory_order_mut().unwrap().get_mut(idx).unwrap() += delta;
                    }
                    let (l, _) = loss(g_embed, g_net, d_embed, d_net);
                    l
                };
                let up = read(&mut g_embed, &mut g_net, &mut d_embed, &mut d_net, h);
                let down = read(&mut g_embed, &mut g_net, &mut d_embed, &mut d_net, -2.0 * h);
                read(&mut g_embed, &mut g_net, &mut d_embed, &mut d_net, h);
                let fd = (up - down) / (2.0 * h);
                let got = want.as_slice_memory_order().unwrap()[idx];
                let err = (got - fd).abs() / got.abs().max(fd.abs()).max(1e-8);
                assert!(
                    err < 1e-4,
                    "param {pi} element {idx}: analytic {got:.8e} vs fd {fd:.8e}"
                );
                checked += 1;
            }
        }
        assert_eq!(checked, total);
    }

    #[test]
    fn training_is_deterministic_and_updates_weights() {
        let data = noise_set(20, 4, 0);
        let a = train_cgan(&data, &tiny_config(9, 1)).unwrap();
        let b = train_cgan(&data, &tiny_config(9, 1)).unwrap();
        for (pa, pb) in param_values(&a).iter().zip(param_values(&b).iter()) {
            assert_eq!(pa, pb, "same seed must give identical weights");
        }
        let init = train_cgan(&data, &tiny_config(9, 0)).unwrap();
        let trained_differs = param_values(&a)
            .iter()
            .zip(param_values(&init).iter())
            .any(|(x, y)| x != y);
        assert!(trained_differs, "training must move the weights");
        let other = train_cgan(&data, &tiny_config(10, 1)).unwrap();
        let seed_differs = param_values(&a)
            .iter()
            .zip(param_values(&other).iter())
            .any(|(x, y)| x != y);
        assert!(seed_differs, "different seeds must give different weights");
        assert_eq!(a.manifest().epochs_run, 1);
        assert_eq!(a.manifest().dataset, "noise");
        assert!(a.manifest().final_d_loss.is_finite());
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let data = noise_set(20, 4, 0);
        let a = train_cgan(&data, &tiny_config(5, 0)).unwrap();
        let b = train_cgan(&data, &tiny_config(5, 0)).unwrap();
        for (pa, pb) in param_values(&a).iter().zip(param_values(&b).iter()) {
            assert_eq!(pa, pb);
        }
        assert_eq!(a.manifest().epochs_run, 0);
        assert!(a.manifest().fid_trace.is_empty());

        // No epoch means no losses; the NaN must survive a checkpoint
        // round trip (it crosses JSON, which has no NaN literal).
        assert!(a.manifest().final_d_loss.is_nan());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g0.ck");
        a.save(&path).unwrap();
        let back = TrainedGenerator::load(&path).unwrap();
        assert!(back.manifest().final_d_loss.is_nan());
        assert_eq!(back.manifest().epochs_run, 0);
    }

    #[test]
    fn sample_respects_label_count_range_and_determinism() {
        let data = noise_set(20, 4, 0);
        let gen = train_cgan(&data, &tiny_config(3, 0)).unwrap();

        let s = gen.sample(2, 300, 11).unwrap();
        assert_eq!(s.len(), 300);
        assert_eq!(s.image_shape(), (28, 28, 1));
        assert!(s.labels().iter().all(|&l| l == 2));
        assert!(s.provenance().iter().all(|&p| p == Provenance::Synthetic));
        assert_eq!(s.name(), "synthetic_2");
        // Pixels obey the range because of the sigmoid, not clipping.
        assert!(s.images().iter().all(|&p| (0.0..=1.0).contains(&p)));

        let again = gen.sample(2, 300, 11).unwrap();
        assert_eq!(s.images(), again.images());
        let other = gen.sample(2, 300, 12).unwrap();
        assert_ne!(s.images(), other.images());

        assert!(matches!(gen.sample(4, 1, 0), Err(Error::Range(_))));
        assert!(matches!(gen.sample(0, 0, 0), Err(Error::Range(_))));
    }

    #[test]
    fn synthetic_dataset_matches_the_requested_histogram() {
        let data = noise_set(20, 4, 0);
        let gen = train_cgan(&data, &tiny_config(3, 0)).unwrap();
        let set = gen.generate_synthetic_dataset(&[3, 0, 5, 2], 7).unwrap();
        assert_eq!(set.label_histogram(), vec![3, 0, 5, 2]);
        assert_eq!(set.len(), 10);
        assert_eq!(set.name(), "synthetic");
        // Class-major layout.
        assert_eq!(set.labels(), &[0, 0, 0, 2, 2, 2, 2, 2, 3, 3]);
        assert!(matches!(
            gen.generate_synthetic_dataset(&[1, 2], 7),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn save_load_round_trip_preserves_weights_and_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.ck");
        let data = noise_set(20, 4, 0);
        let gen = train_cgan(&data, &tiny_config(42, 1)).unwrap();
        gen.save(&path).unwrap();
        let back = TrainedGenerator::load(&path).unwrap();

        for (pa, pb) in param_values(&gen).iter().zip(param_values(&back).iter()) {
            assert_eq!(pa.shape(), pb.shape());
            for (x, y) in pa.iter().zip(pb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(gen.manifest(), back.manifest());
        let a = gen.sample(1, 50, 3).unwrap();
        let b = back.sample(1, 50, 3).unwrap();
        assert_eq!(a.images(), b.images());

        let foreign = dir.path().join("other.ck");
        Checkpoint::new("SOMETHING_ELSE").save(&foreign).unwrap();
        assert!(matches!(TrainedGenerator::load(&foreign), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_bad_geometry_class_count_and_batch_size() {
        let mut rng = stream_rng(1, "cgan-test-small", 0);
        let images = Array4::from_shape_fn((8, 12, 12, 1), |_| rng.gen_range(0.0..1.0f32));
        let labels: Vec<u8> = (0..8).map(|i| (i % 2) as u8).collect();
        let small =
            LabeledImageSet::with_uniform_provenance("small", images, labels, 2, Provenance::Real)
                .unwrap();
        assert!(matches!(
            train_cgan(&small, &tiny_config(0, 1)),
            Err(Error::Shape(_))
        ));

        let mono_images = Array4::from_elem((12, 28, 28, 1), 0.5f32);
        let mono = LabeledImageSet::with_uniform_provenance(
            "mono",
            mono_images,
            vec![0u8; 12],
            1,
            Provenance::Real,
        )
        .unwrap();
        assert!(matches!(
            train_cgan(&mono, &tiny_config(0, 1)),
            Err(Error::Validation(_))
        ));

        let data = noise_set(8, 2, 0);
        let mut config = tiny_config(0, 1);
        config.batch_size = 16;
        assert!(matches!(train_cgan(&data, &config), Err(Error::Validation(_))));
    }

    #[test]
    fn exploding_learning_rate_reports_divergence() {
        let data = noise_set(20, 4, 0);
        let mut config = tiny_config(5, 3);
        config.d_learning_rate = 1e12;
        match train_cgan(&data, &config) {
            Err(Error::Divergence { epoch, .. }) => assert_eq!(epoch, 0),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }
}
