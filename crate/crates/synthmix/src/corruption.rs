//! Test-time corruptions. The only generator is shot noise; corrupted sets
//! published as `.npy` pairs can be ingested instead of regenerated.

use std::io::Read;
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledImageSet, Provenance};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    ShotNoise,
}

/// What to corrupt with, how hard, and under which seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// Photon count scale `lambda`; lower is noisier.
    pub severity: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn shot_noise(severity: f64, seed: u64) -> Self {
        CorruptionSpec { kind: CorruptionKind::ShotNoise, severity, seed }
    }

    pub fn apply(&self, set: &LabeledImageSet) -> Result<LabeledImageSet> {
        match self.kind {
            CorruptionKind::ShotNoise => apply_shot_noise(set, self.severity, self.seed),
        }
    }
}

/// Shot noise: every pixel `x` becomes `clip(Poisson(x * lambda) / lambda, 0, 1)`.
///
/// Each image gets its own RNG stream derived from `(seed, position)`, so
/// the noise applied at position `i` depends only on the seed and that
/// image's pixels, never on traversal order or the rest of the set.
pub fn apply_shot_noise(set: &LabeledImageSet, lambda: f64, seed: u64) -> Result<LabeledImageSet> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Range(format!(
            "shot noise severity must be a positive finite count, got {lambda}"
        )));
    }
    let dims = set.images().raw_dim();
    let mut out = Array4::<f32>::zeros(dims);
    let per_image: usize = set.images().len() / set.len().max(1);
    let src = set.images().as_slice().expect("image sets are standard layout");
    let dst = out.as_slice_mut().unwrap();
    for i in 0..set.len() {
        let mut rng = stream_rng(seed, "shot-noise", i as u64);
        let base = i * per_image;
        for j in 0..per_image {
            let x = f64::from(src[base + j]);
            let noisy = poisson(&mut rng, x * lambda) as f64 / lambda;
            dst[base + j] = noisy.clamp(0.0, 1.0) as f32;
        }
    }
    LabeledImageSet::new(
        format!("{}_shot_noise", set.name()),
        out,
        set.labels().to_vec(),
        set.num_classes(),
        set.provenance().to_vec(),
    )
}

/// Poisson sampler: sequential-search inversion below mean 10, Hormann's
/// PTRS transformed rejection above it.
pub fn poisson(rng: &mut Rng, mean: f64) -> u64 {
    assert!(mean >= 0.0 && mean.is_finite(), "poisson mean must be >= 0");
    if mean == 0.0 {
        0
    } else if mean < 10.0 {
        poisson_inversion(rng, mean)
    } else {
        poisson_ptrs(rng, mean)
    }
}

fn poisson_inversion(rng: &mut Rng, mean: f64) -> u64 {
    use rand::Rng as _;
    let mut p = (-mean).exp();
    let mut cdf = p;
    let mut k = 0u64;
    let u: f64 = rng.gen();
    while u > cdf {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
        // Float underflow guard: for mean < 10 the loop terminates long
        // before this, but a pathological u == 1.0 draw must not hang.
        if k > 2000 {
            break;
        }
    }
    k
}

fn poisson_ptrs(rng: &mut Rng, mean: f64) -> u64 {
    use rand::Rng as _;
    let slam = mean.sqrt();
    let loglam = mean.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let invalpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u: f64 = rng.gen::<f64>() - 0.5;
        let v: f64 = rng.gen();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        if v.ln() + invalpha.ln() - (a / (us * us) + b).ln()
            <= k * loglam - mean - ln_factorial(k as u64)
        {
            return k as u64;
        }
    }
}

/// `ln(k!)`: exact table through 20, Stirling's series beyond.
pub fn ln_factorial(k: u64) -> f64 {
    const TABLE: [f64; 21] = [
        0.0,
        0.0,
        0.6931471805599453,
        1.791759469228055,
        3.1780538303479458,
        4.787491742782046,
        6.579251212010101,
        8.525161361065415,
        10.60460290274525,
        12.801827480081469,
        15.104412573075516,
        17.502307845873887,
        19.987214495661885,
        22.552163853123425,
        25.19122118273868,
        27.89927138384089,
        30.671860106080672,
        33.50507345013689,
        36.39544520803305,
        39.339884187199495,
        42.335616460753485,
    ];
    if k <= 20 {
        return TABLE[k as usize];
    }
    let x = (k + 1) as f64;
    let x2 = x * x;
    (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln() + 1.0 / (12.0 * x)
        - 1.0 / (360.0 * x * x2)
        + 1.0 / (1260.0 * x * x2 * x2)
}

/// Load a corrupted test set stored as `images.npy` (u8, `(N, H, W)` or
/// `(N, H, W, 1)`) plus `labels.npy` (u8, `(N,)`) in `dir`.
pub fn ingest_corrupted_set(
    dir: &Path,
    name: &str,
    num_classes: usize,
) -> Result<LabeledImageSet> {
    let images_path = dir.join("images.npy");
    let labels_path = dir.join("labels.npy");
    let (img_shape, img_data) = read_npy_u8(&images_path)?;
    let (lab_shape, lab_data) = read_npy_u8(&labels_path)?;
    let (n, h, w, c) = match img_shape.as_slice() {
        [n, h, w] => (*n, *h, *w, 1),
        [n, h, w, c] if *c <= 4 => (*n, *h, *w, *c),
        other => {
            return Err(Error::Format(format!(
                "{}: expected (N, H, W[, C]) image array, got {other:?}",
                images_path.display()
            )))
        }
    };
    if lab_shape.len() != 1 {
        return Err(Error::Format(format!(
            "{}: expected 1-d label array, got {lab_shape:?}",
            labels_path.display()
        )));
    }
    if lab_shape[0] != n {
        return Err(Error::Consistency(format!(
            "{n} images but {} labels",
            lab_shape[0]
        )));
    }
    let images = Array4::from_shape_vec((n, h, w, c), img_data)
        .expect("shape product checked by reader")
        .mapv(|v| f32::from(v) / 255.0);
    LabeledImageSet::new(
        name,
        images,
        lab_data,
        num_classes,
        vec![Provenance::Real; n],
    )
}

/// Minimal NumPy `.npy` reader for C-order u8 arrays (format versions 1-3).
fn read_npy_u8(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let fail = |msg: String| Error::Format(format!("{}: {msg}", path.display()));

    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(fail("not an npy file".into()));
    }
    let major = bytes[6];
    let (header_len, header_start) = match major {
        1 => {
            let len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
            (len, 10)
        }
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(fail("truncated header length".into()));
            }
            let len =
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
            (len, 12)
        }
        other => return Err(fail(format!("unsupported npy version {other}"))),
    };
    let end = header_start + header_len;
    if bytes.len() < end {
        return Err(fail("truncated header".into()));
    }
    let header = std::str::from_utf8(&bytes[header_start..end])
        .map_err(|e| fail(format!("non-UTF-8 header: {e}")))?;

    let descr = dict_value(header, "descr").ok_or_else(|| fail("missing descr".into()))?;
    if !matches!(descr.trim_matches(['\'', '"']), "|u1" | "u1" | "<u1" | ">u1") {
        return Err(fail(format!("expected u8 data, got descr {descr}")));
    }
    let fortran =
        dict_value(header, "fortran_order").ok_or_else(|| fail("missing fortran_order".into()))?;
    if fortran.trim() != "False" {
        return Err(fail("Fortran-order arrays are not supported".into()));
    }
    let shape_src =
        dict_value(header, "shape").ok_or_else(|| fail("missing shape".into()))?;
    let shape: Vec<usize> = shape_src
        .trim_matches(['(', ')'])
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|e| fail(format!("bad shape entry {s:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    let count: usize = shape.iter().product();
    let data = &bytes[end..];
    if data.len() != count {
        return Err(fail(format!(
            "payload is {} bytes but shape {shape:?} needs {count}",
            data.len()
        )));
    }
    Ok((shape, data.to_vec()))
}

/// Pull the value out of a Python-literal dict header, e.g.
/// `{'descr': '|u1', 'fortran_order': False, 'shape': (3, 28, 28), }`.
fn dict_value<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let quoted = format!("'{key}'");
    let at = header.find(&quoted)?;
    let rest = header[at + quoted.len()..].trim_start().strip_prefix(':')?;
    let rest = rest.trim_start();
    let stop = if rest.starts_with('(') {
        rest.find(')').map(|i| i + 1)?
    } else {
        rest.find(',')?
    };
    Some(rest[..stop].trim())
}
