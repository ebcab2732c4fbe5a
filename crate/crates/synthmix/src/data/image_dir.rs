//! Ingestion and export of class-directory trees of lossless images.
//!
//! The layout is one subdirectory per class index, each holding PNG files
//! of a single uniform size:
//!
//! ```text
//! root/0/000000.png  root/0/000001.png  ...  root/9/000123.png
//! ```
//!
//! This is how externally generated synthetic sets (for example CIFAR-10
//! samples from a pretrained generator) enter the pipeline.

use std::fs;
use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::Array4;

use crate::data::{LabeledImageSet, Provenance};
use crate::error::{Error, Result};

/// Load a class-directory tree; labels come from the directory names and
/// every sample is flagged `Synthetic`.
pub fn load_image_directory(root: &Path, num_classes: usize) -> Result<LabeledImageSet> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut class_dirs: Vec<(usize, std::path::PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let dir_name = entry.file_name().to_string_lossy().into_owned();
        let class: usize = dir_name.parse().map_err(|_| {
            Error::Format(format!(
                "subdirectory {dir_name:?} is not an integer class index"
            ))
        })?;
        if class >= num_classes {
            return Err(Error::Format(format!(
                "subdirectory {dir_name:?} out of range for {num_classes} classes"
            )));
        }
        class_dirs.push((class, path));
    }
    class_dirs.sort_by_key(|(c, _)| *c);

    let mut shape: Option<(usize, usize, usize)> = None;
    let mut pixels: Vec<f32> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    for (class, dir) in class_dirs {
        let mut files: Vec<std::path::PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file)
                .map_err(|e| Error::Format(format!("{}: {e}", file.display())))?;
            let (h, w, c, data) = decode(&img);
            match shape {
                None => shape = Some((h, w, c)),
                Some(s) if s != (h, w, c) => {
                    return Err(Error::Consistency(format!(
                        "{}: image is {h}x{w}x{c}, expected {}x{}x{}",
                        file.display(),
                        s.0,
                        s.1,
                        s.2
                    )))
                }
                _ => {}
            }
            pixels.extend(data.iter().map(|&b| b as f32 / 255.0));
            labels.push(class as u8);
        }
    }
    let (h, w, c) = shape.unwrap_or((0, 0, 1));
    let count = labels.len();
    let images = Array4::from_shape_vec((count, h.max(1), w.max(1), c), pixels)
        .map_err(|e| Error::Format(format!("image tree reshape: {e}")))?;
    let name = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image-dir".to_string());
    LabeledImageSet::with_uniform_provenance(name, images, labels, num_classes, Provenance::Synthetic)
}

fn decode(img: &DynamicImage) -> (usize, usize, usize, Vec<u8>) {
    match img {
        DynamicImage::ImageLuma8(g) => (
            g.height() as usize,
            g.width() as usize,
            1,
            g.as_raw().clone(),
        ),
        other => {
            let rgb = other.to_rgb8();
            (
                rgb.height() as usize,
                rgb.width() as usize,
                3,
                rgb.as_raw().clone(),
            )
        }
    }
}

/// Companion writer: export a set as a PNG class tree readable by
/// [`load_image_directory`]. Pixels are quantized with round-to-nearest.
pub fn write_image_directory(set: &LabeledImageSet, root: &Path) -> Result<()> {
    let (h, w, c) = set.image_shape();
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!(
            "image tree writer supports 1 or 3 channels, got {c}"
        )));
    }
    let mut per_class_counter = vec![0usize; set.num_classes()];
    for k in 0..set.num_classes() {
        fs::create_dir_all(root.join(k.to_string())).map_err(|e| Error::io(root, e))?;
    }
    for i in 0..set.len() {
        let class = set.label(i);
        let idx = per_class_counter[class];
        per_class_counter[class] += 1;
        let path = root.join(class.to_string()).join(format!("{idx:06}.png"));
        let bytes: Vec<u8> = set
            .image(i)
            .iter()
            .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let ok = if c == 1 {
            GrayImage::from_raw(w as u32, h as u32, bytes)
                .expect("buffer sized from shape")
                .save(&path)
        } else {
            RgbImage::from_raw(w as u32, h as u32, bytes)
                .expect("buffer sized from shape")
                .save(&path)
        };
        ok.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
