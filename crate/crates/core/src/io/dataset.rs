//! Dataset manifests, load-time normalization, deterministic splits, and
//! the synthetic classification tasks that stand in for image benchmarks.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::tensor_file::{read_tensor, write_tensor, DType};
use crate::linalg::mix_seed;
use crate::tensor::Tensor;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Declared per-channel normalization constants (the usual ImageNet ones
/// for the synthetic tasks).
pub const DEFAULT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const DEFAULT_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    /// File names relative to the manifest location.
    pub images_file: String,
    pub labels_file: String,
    pub num_classes: usize,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
    pub split_seed: u64,
}

/// Images normalized to model scale, one [C, H, W] tensor per sample.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split_seed: u64,
}

impl LoadedDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> LoadedDataset {
        LoadedDataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split_seed: self.split_seed,
        }
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("unsupported manifest schema {}", manifest.schema_version),
        });
    }
    Ok(manifest)
}

/// Loads and normalizes a dataset. u8 images map through x/255 then
/// (x - mean) / std per channel; float images are standardized directly.
pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let (images_raw, img_dtype) = read_tensor(&dir.join(&manifest.images_file))?;
    let (labels_raw, _) = read_tensor(&dir.join(&manifest.labels_file))?;

    let shape = images_raw.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Format {
            path: manifest.images_file.clone(),
            detail: format!("expected [N, C, H, W], got {shape:?}"),
        });
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if labels_raw.len() != n {
        return Err(Error::Format {
            path: manifest.labels_file.clone(),
            detail: format!("{} labels for {n} images", labels_raw.len()),
        });
    }
    if manifest.channel_mean.len() != c || manifest.channel_std.len() != c {
        return Err(Error::Format {
            path: manifest_path.display().to_string(),
            detail: "normalization constants do not match channel count".into(),
        });
    }

    let mut labels = Vec::with_capacity(n);
    for &v in labels_raw.data() {
        let label = v as usize;
        if v.fract() != 0.0 || label >= manifest.num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: manifest.num_classes,
            });
        }
        labels.push(label);
    }

    let per_image = c * h * w;
    let data = images_raw.data();
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let mut img = Tensor::zeros(&[c, h, w]);
        let src = &data[i * per_image..(i + 1) * per_image];
        let dst = img.data_mut();
        for ch in 0..c {
            let mean = manifest.channel_mean[ch];
            let std = manifest.channel_std[ch];
            for off in 0..h * w {
                let idx = ch * h * w + off;
                let raw = if img_dtype == DType::U8 {
                    src[idx] / 255.0
                } else {
                    src[idx]
                };
                dst[idx] = (raw - mean) / std;
            }
        }
        images.push(img);
    }
    Ok(LoadedDataset {
        images,
        labels,
        num_classes: manifest.num_classes,
        split_seed: manifest.split_seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyntheticTask {
    /// Class determined by the mean color of the designated patch.
    PatchColor,
    /// Same construction pushed through a fixed channel permutation and
    /// contrast change, so adaptation of the representation is required.
    ShiftedPatchColor,
}

impl SyntheticTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "patch_color" => Ok(SyntheticTask::PatchColor),
            "shifted_patch_color" => Ok(SyntheticTask::ShiftedPatchColor),
            other => Err(Error::invalid(
                "SyntheticTask",
                format!("unknown task '{other}' (expected patch_color | shifted_patch_color)"),
            )),
        }
    }
}

fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    let theta = 2.0 * std::f64::consts::PI * class as f64 / num_classes as f64;
    [
        127.5 + 110.0 * theta.sin(),
        127.5 + 110.0 * (theta + 2.0 * std::f64::consts::PI / 3.0).sin(),
        127.5 + 110.0 * (theta + 4.0 * std::f64::consts::PI / 3.0).sin(),
    ]
}

/// Generates a balanced synthetic dataset and writes images.vten (u8),
/// labels.vten (u8) and manifest.json into `out_dir`. Returns the manifest
/// path. Deterministic in the seed.
pub fn generate_synthetic(
    task: SyntheticTask,
    n_samples: usize,
    image_size: usize,
    num_classes: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<PathBuf> {
    if n_samples == 0 || image_size < 4 || !(2..=255).contains(&num_classes) {
        return Err(Error::invalid(
            "generate_synthetic",
            "need n_samples >= 1, image_size >= 4, 2 <= classes <= 255",
        ));
    }
    fs::create_dir_all(out_dir)?;
    let c = 3usize;
    let region = (image_size / 4).max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0xDA7A]));

    // Balanced labels, then a seeded shuffle of sample order.
    let mut labels: Vec<usize> = (0..n_samples).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);

    let mut images = Tensor::zeros(&[n_samples, c, image_size, image_size]);
    let per_image = c * image_size * image_size;
    for (i, &label) in labels.iter().enumerate() {
        let base = class_color(label, num_classes);
        let img = &mut images.data_mut()[i * per_image..(i + 1) * per_image];
        for ch in 0..c {
            for y in 0..image_size {
                for x in 0..image_size {
                    let idx = ch * image_size * image_size + y * image_size + x;
                    let v = if y < region && x < region {
                        base[ch] + rng.gen_range(-12.0..12.0)
                    } else {
                        rng.gen_range(0.0..255.0)
                    };
                    img[idx] = v.round().clamp(0.0, 255.0);
                }
            }
        }
        if task == SyntheticTask::ShiftedPatchColor {
            // Fixed channel permutation (R,G,B) <- (G,B,R) plus a contrast
            // compression toward a brighter operating point.
            let snapshot: Vec<f64> = img.to_vec();
            let hw = image_size * image_size;
            for ch in 0..c {
                let src = (ch + 1) % c;
                for off in 0..hw {
                    let v = snapshot[src * hw + off];
                    img[ch * hw + off] = (0.65 * v + 45.0).round().clamp(0.0, 255.0);
                }
            }
        }
    }

    let labels_tensor = Tensor::from_vec(
        &[n_samples],
        labels.iter().map(|&l| l as f64).collect(),
    )?;
    write_tensor(&out_dir.join("images.vten"), &images, DType::U8)?;
    write_tensor(&out_dir.join("labels.vten"), &labels_tensor, DType::U8)?;
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        images_file: "images.vten".into(),
        labels_file: "labels.vten".into(),
        num_classes,
        channel_mean: DEFAULT_MEAN.to_vec(),
        channel_std: DEFAULT_STD.to_vec(),
        split_seed: seed,
    };
    let manifest_path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    crate::io::tensor_file::atomic_write(&manifest_path, text.as_bytes())?;
    Ok(manifest_path)
}

/// Seeded permutation split into (kept, held_out) index lists; disjoint and
/// exhaustive. `fraction` is the held-out share.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::invalid("split_indices", format!("fraction {fraction} outside (0, 1)")));
    }
    if n < 2 {
        return Err(Error::DatasetTooSmall {
            detail: format!("cannot split {n} samples"),
        });
    }
    let held = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x5B117]));
    perm.shuffle(&mut rng);
    let held_out = perm[..held].to_vec();
    let kept = perm[held..].to_vec();
    Ok((kept, held_out))
}
