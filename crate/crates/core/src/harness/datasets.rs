//! Built-in synthetic datasets and an image-directory format.
//!
//! An image directory holds `manifest.csv` with columns `file,label` and one
//! grayscale PGM or PNG per row. All images must share one size; pixels are
//! scaled to `[0, 1]`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST: &str = "manifest.csv";

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Four 2-D Gaussian clusters.
    Blobs {
        samples_per_class: usize,
        #[serde(default = "default_blob_std")]
        std: f64,
        seed: u64,
    },
    /// 16x16 renderings of a 5x7 digit font with jitter and noise.
    Digits {
        samples: usize,
        #[serde(default = "default_digit_noise")]
        noise: f64,
        seed: u64,
    },
    ImageDir { path: PathBuf },
}

fn default_blob_std() -> f64 {
    1.0
}

fn default_digit_noise() -> f64 {
    0.15
}

/// A source plus the held-out test share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DatasetSource,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

impl DataConfig {
    pub fn load(&self) -> Result<Dataset> {
        match &self.source {
            DatasetSource::Blobs {
                samples_per_class,
                std,
                seed,
            } => gaussian_blobs(*samples_per_class, *std, *seed),
            DatasetSource::Digits { samples, noise, seed } => synthetic_digits(*samples, *noise, *seed),
            DatasetSource::ImageDir { path } => load_image_dir(path),
        }
    }

    /// `(train, test)`.
    pub fn load_split(&self) -> Result<(Dataset, Dataset)> {
        self.load()?.split(self.test_fraction, self.split_seed)
    }
}

pub const BLOB_CENTERS: [[f64; 2]; 4] = [[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]];

/// Four classes around [`BLOB_CENTERS`], interleaved by class.
pub fn gaussian_blobs(samples_per_class: usize, std: f64, seed: u64) -> Result<Dataset> {
    if samples_per_class == 0 {
        return Err(Error::EmptyDataset);
    }
    let noise = Normal::new(0.0, std).map_err(|e| Error::Config(format!("blob std: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = samples_per_class * BLOB_CENTERS.len();
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..samples_per_class {
        for (c, center) in BLOB_CENTERS.iter().enumerate() {
            data.push(center[0] + noise.sample(&mut rng));
            data.push(center[1] + noise.sample(&mut rng));
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, BLOB_CENTERS.len())
}

const FONT: [[&str; 7]; 10] = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
];

pub const DIGIT_SIDE: usize = 16;

/// Digits drawn at twice the font size (10x14) at a random offset, with
/// random stroke intensity, stroke dropout and additive Gaussian noise.
/// Labels cycle through 0..9.
pub fn synthetic_digits(samples: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if samples == 0 {
        return Err(Error::EmptyDataset);
    }
    let gauss = Normal::new(0.0, noise).map_err(|e| Error::Config(format!("digit noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = DIGIT_SIDE;
    let mut data = Vec::with_capacity(samples * side * side);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let digit = i % 10;
        let dx = rng.random_range(0..=side - 10);
        let dy = rng.random_range(0..=side - 14);
        let ink = rng.random_range(0.6..1.0);
        let mut img = vec![0.0; side * side];
        for (r, row) in FONT[digit].iter().enumerate() {
            for (c, bit) in row.bytes().enumerate() {
                if bit != b'1' {
                    continue;
                }
                for (yy, xx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    if rng.random_bool(0.1) {
                        continue;
                    }
                    img[(dy + 2 * r + yy) * side + dx + 2 * c + xx] = ink;
                }
            }
        }
        for p in &mut img {
            *p = (*p + gauss.sample(&mut rng)).clamp(0.0, 1.0);
        }
        data.extend_from_slice(&img);
        labels.push(digit);
    }
    Dataset::new(Tensor::new(vec![samples, 1, side, side], data)?, labels, 10)
}

#[derive(Debug, Deserialize, Serialize)]
struct ManifestRow {
    file: String,
    label: usize,
}

/// Loads an image directory. The class count is one more than the largest
/// label.
pub fn load_image_dir(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join(MANIFEST);
    let mut reader = csv::Reader::from_path(&manifest)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut dims = None;
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| Error::Data(format!("{} row {}: {e}", manifest.display(), i + 1)))?;
        let path = dir.join(&row.file);
        let img = image::open(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
            .into_luma8();
        let d = img.dimensions();
        if *dims.get_or_insert(d) != d {
            return Err(Error::Data(format!(
                "{} is {}x{}, expected {}x{}",
                path.display(),
                d.0,
                d.1,
                dims.unwrap().0,
                dims.unwrap().1
            )));
        }
        data.extend(img.as_raw().iter().map(|&p| p as f64 / 255.0));
        labels.push(row.label);
    }
    let Some((w, h)) = dims else {
        return Err(Error::EmptyDataset);
    };
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 1, h as usize, w as usize], data)?, labels, classes)
}

/// Writes `dataset` (samples of shape `[1, h, w]` or `[h, w]`) as PGM files
/// plus a manifest. Pixels are quantized to 8 bits.
pub fn export_image_dir(dataset: &Dataset, dir: &Path) -> Result<()> {
    let shape = dataset.sample_shape();
    let (h, w) = match *shape {
        [1, h, w] | [h, w] => (h, w),
        _ => {
            return Err(Error::Data(format!(
                "cannot export samples of shape {shape:?} as grayscale images"
            )))
        }
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join(MANIFEST);
    let mut writer = csv::Writer::from_path(&manifest)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?;
    for i in 0..dataset.len() {
        let file = format!("{i:06}.pgm");
        let pixels: Vec<u8> = dataset
            .sample(i)
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("sized buffer");
        let path = dir.join(&file);
        img.save(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        writer
            .serialize(ManifestRow {
                file,
                label: dataset.labels()[i],
            })
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(&manifest, e))
}
