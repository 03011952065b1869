//! Image datasets: IDX files, image folders and synthetic blobs.

use std::fs;
use std::path::{Path, PathBuf};

use llvq_core::nn::{Shape, Tensor};
use llvq_core::real::Real;
use llvq_core::train::{BlobParams, DatasetRef, DatasetSource};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Relative dataset paths are resolved against this directory when set.
pub const DATA_DIR_ENV: &str = "LLVQ_DATA_DIR";

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: bad IDX magic {found:#010x}, expected {expected:#010x}", path.display())]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{}: truncated, need {expected} bytes but found {actual}", path.display())]
    Truncated { path: PathBuf, expected: u64, actual: u64 },
    #[error("{what}: header says {header} but found {found}")]
    CountMismatch { what: String, header: u64, found: u64 },
    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{}: no decodable images", .0.display())]
    NoImages(PathBuf),
    #[error("dataset is empty")]
    Empty,
    #[error("pixel {index} is {value}, outside [0, 1]")]
    PixelRange { index: usize, value: f32 },
    #[error("invalid dataset parameters: {0}")]
    InvalidParams(String),
}

/// `n` images stored NHWC as `f32` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
    labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn new(
        n: usize,
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f32>,
        labels: Option<Vec<u8>>,
    ) -> Result<Self, DataError> {
        if n == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(DataError::Empty);
        }
        let expected = n * height * width * channels;
        if pixels.len() != expected {
            return Err(DataError::CountMismatch {
                what: "pixels".into(),
                header: expected as u64,
                found: pixels.len() as u64,
            });
        }
        if let Some((index, &value)) = pixels.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::PixelRange { index, value });
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(DataError::CountMismatch {
                    what: "labels".into(),
                    header: n as u64,
                    found: l.len() as u64,
                });
            }
        }
        Ok(Self {
            n,
            height,
            width,
            channels,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Shape of a batch of `n` images.
    pub fn shape(&self, n: usize) -> Shape {
        Shape::new(n, self.height, self.width, self.channels)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn item_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.pixels[i * self.item_len()..(i + 1) * self.item_len()]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn batch<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * self.item_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| T::from_f64(f64::from(p))));
        }
        Tensor::from_vec(self.shape(indices.len()), data).expect("batch size matches shape")
    }

    /// Consecutive batches in stored order; the last one may be short.
    pub fn batches<T: Real>(&self, batch_size: usize) -> impl Iterator<Item = Tensor<T>> + '_ {
        let idx: Vec<usize> = (0..self.n).collect();
        let size = batch_size.max(1);
        (0..self.n.div_ceil(size)).map(move |b| self.batch(&idx[b * size..((b + 1) * size).min(self.n)]))
    }

    /// A seeded random subset of `size` items, kept in stored order.
    pub fn subset(&self, size: usize, seed: u64) -> Dataset {
        if size >= self.n {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(size);
        idx.sort_unstable();
        let mut pixels = Vec::with_capacity(size * self.item_len());
        for &i in &idx {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            n: size,
            pixels,
            height: self.height,
            width: self.width,
            channels: self.channels,
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn check_header(path: &Path, bytes: &[u8], magic: u32, header_len: usize) -> Result<(), DataError> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: header_len as u64,
            actual: bytes.len() as u64,
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header_len {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: header_len as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(())
}

fn check_payload(path: &Path, bytes: &[u8], header_len: usize, payload: u64) -> Result<(), DataError> {
    let actual = (bytes.len() - header_len) as u64;
    if actual < payload {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: header_len as u64 + payload,
            actual: bytes.len() as u64,
        });
    }
    if actual > payload {
        return Err(DataError::CountMismatch {
            what: format!("{} payload bytes", path.display()),
            header: payload,
            found: actual,
        });
    }
    Ok(())
}

/// Reads an IDX image file (`u8` pixels) and scales by 1/255.
pub fn load_idx_images(path: &Path) -> Result<Dataset, DataError> {
    let bytes = read(path)?;
    check_header(path, &bytes, IDX_IMAGES_MAGIC, 16)?;
    let n = be_u32(&bytes, 4) as usize;
    let rows = be_u32(&bytes, 8) as usize;
    let cols = be_u32(&bytes, 12) as usize;
    check_payload(path, &bytes, 16, n as u64 * rows as u64 * cols as u64)?;
    let pixels = bytes[16..].iter().map(|&b| f32::from(b) / 255.0).collect();
    Dataset::new(n, rows, cols, 1, pixels, None)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let bytes = read(path)?;
    check_header(path, &bytes, IDX_LABELS_MAGIC, 8)?;
    let n = be_u32(&bytes, 4) as u64;
    check_payload(path, &bytes, 8, n)?;
    Ok(bytes[8..].to_vec())
}

/// Images plus labels; the two counts must agree.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let data = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if labels.len() != data.len() {
        return Err(DataError::CountMismatch {
            what: "labels vs images".into(),
            header: data.len() as u64,
            found: labels.len() as u64,
        });
    }
    Ok(Dataset { labels: Some(labels), ..data })
}

/// Every PNG or JPEG in `dir` (sorted by name), center-cropped to a square
/// and resized to `resolution`.
pub fn load_image_folder(dir: &Path, resolution: usize, channels: usize) -> Result<Dataset, DataError> {
    if resolution == 0 || !(channels == 1 || channels == 3) {
        return Err(DataError::InvalidParams(format!(
            "resolution {resolution} and channels {channels} (need >0 and 1 or 3)"
        )));
    }
    let entries = fs::read_dir(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    let side = resolution as u32;
    let mut pixels = Vec::new();
    for path in &files {
        let img = image::open(path).map_err(|source| DataError::Image {
            path: path.clone(),
            source,
        })?;
        let s = img.width().min(img.height());
        let img = img
            .crop_imm((img.width() - s) / 2, (img.height() - s) / 2, s, s)
            .resize_exact(side, side, image::imageops::FilterType::Triangle);
        if channels == 1 {
            pixels.extend(img.to_luma8().into_raw().into_iter().map(|b| f32::from(b) / 255.0));
        } else {
            pixels.extend(img.to_rgb8().into_raw().into_iter().map(|b| f32::from(b) / 255.0));
        }
    }
    if files.is_empty() {
        return Err(DataError::NoImages(dir.to_path_buf()));
    }
    Dataset::new(files.len(), resolution, resolution, channels, pixels, None)
}

/// Gaussian bumps at cluster-dependent positions plus pixel noise, clamped
/// to `[0, 1]`. Sample `i` belongs to cluster `i % clusters`; labels carry
/// the cluster.
pub fn synth_blobs(params: &BlobParams, seed: u64) -> Result<Dataset, DataError> {
    let BlobParams {
        clusters,
        samples,
        noise,
        size,
        channels,
    } = *params;
    if clusters == 0 || samples == 0 || size == 0 || channels == 0 || !(noise.is_finite() && noise >= 0.0) {
        return Err(DataError::InvalidParams(format!("{params:?}")));
    }
    if clusters > 256 {
        return Err(DataError::InvalidParams("at most 256 clusters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let width = s / 6.0;
    let centers: Vec<(f64, f64, Vec<f64>)> = (0..clusters)
        .map(|_| {
            let cy = rng.gen_range(0.2 * s..0.8 * s);
            let cx = rng.gen_range(0.2 * s..0.8 * s);
            let gains = (0..channels).map(|_| rng.gen_range(0.6..1.0)).collect();
            (cy, cx, gains)
        })
        .collect();
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut pixels = Vec::with_capacity(samples * size * size * channels);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let (cy, cx, gains) = &centers[i % clusters];
        labels.push((i % clusters) as u8);
        for y in 0..size {
            for x in 0..size {
                let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                let bump = (-d2 / (2.0 * width * width)).exp();
                for g in gains {
                    let jitter = if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                    pixels.push((bump * g + jitter).clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    Dataset::new(samples, size, size, channels, pixels, Some(labels))
}

/// Joins relative paths onto `$LLVQ_DATA_DIR` when it is set.
pub fn resolve_data_path(path: &str) -> PathBuf {
    let p = PathBuf::from(path);
    if p.is_relative() {
        if let Some(root) = std::env::var_os(DATA_DIR_ENV) {
            return PathBuf::from(root).join(p);
        }
    }
    p
}

/// Loads the dataset a config points at, applying its subset.
pub fn resolve(dataset: &DatasetRef) -> Result<Dataset, DataError> {
    let full = match &dataset.source {
        DatasetSource::Idx { images } => load_idx_images(&resolve_data_path(images))?,
        DatasetSource::ImageFolder {
            path,
            resolution,
            channels,
        } => load_image_folder(&resolve_data_path(path), *resolution, *channels)?,
        DatasetSource::SyntheticBlobs(p) => synth_blobs(p, dataset.subset_seed)?,
    };
    Ok(match dataset.subset {
        Some(0) => return Err(DataError::Empty),
        Some(n) => full.subset(n, dataset.subset_seed),
        None => full,
    })
}
