//! IDX (MNIST-style) and CIFAR-10 binary loaders, plus Gaussian toy data.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::images::{Dataset, ImageSet, Preprocessing};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::TruncatedFile(format!("{what} header")))
}

fn magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let found = be_u32(bytes, 0, what)?;
    if found != expected {
        return Err(Error::BadMagic { found, expected });
    }
    Ok(())
}

fn body<'a>(bytes: &'a [u8], start: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    let end = start
        .checked_add(len)
        .ok_or_else(|| Error::TruncatedFile(format!("{what} size overflows")))?;
    match bytes.len().cmp(&end) {
        std::cmp::Ordering::Less => Err(Error::TruncatedFile(format!(
            "{what}: {} bytes, header promises {end}",
            bytes.len()
        ))),
        std::cmp::Ordering::Greater => Err(Error::TruncatedFile(format!(
            "{what}: {} trailing bytes after the declared data",
            bytes.len() - end
        ))),
        std::cmp::Ordering::Equal => Ok(&bytes[start..end]),
    }
}

/// Parses an IDX image file (`u8` pixels) into `N × rows × cols × 1`
/// images scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<ImageSet> {
    magic(bytes, IDX_IMAGES_MAGIC, "image file")?;
    let n = be_u32(bytes, 4, "image file")? as usize;
    let rows = be_u32(bytes, 8, "image file")? as usize;
    let cols = be_u32(bytes, 12, "image file")? as usize;
    let len = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::TruncatedFile("image size overflows".into()))?;
    let data = body(bytes, 16, len, "image file")?;
    let pixels = data.iter().map(|&b| b as f64 / 255.0).collect();
    ImageSet::new(n, rows, cols, 1, pixels, Preprocessing::Raw)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    magic(bytes, IDX_LABELS_MAGIC, "label file")?;
    let n = be_u32(bytes, 4, "label file")? as usize;
    Ok(body(bytes, 8, n, "label file")?.iter().map(|&b| b as usize).collect())
}

/// IDX image and label files as a 10-class dataset.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let images = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    Dataset::new(images, labels, 10)
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    parse_idx(&fs::read(images)?, &fs::read(labels)?)
}

/// Parses concatenated CIFAR-10 records: a label byte, then the red, green
/// and blue planes, each 32×32 row-major. Pixels come out channel-last.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::TruncatedFile(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut pixels = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        for p in 0..plane {
            for c in 0..3 {
                pixels.push(rec[1 + c * plane + p] as f64 / 255.0);
            }
        }
    }
    let images = ImageSet::new(n, CIFAR_SIDE, CIFAR_SIDE, 3, pixels, Preprocessing::Raw)?;
    Dataset::new(images, labels, 10)
}

/// Concatenation of several CIFAR-10 batch files.
pub fn load_cifar10<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        bytes.extend(fs::read(p)?);
    }
    parse_cifar10(&bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// MNIST from a directory holding the four standard IDX files.
pub fn load_mnist_dir(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let dir = dir.as_ref();
    load_idx(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// CIFAR-10 from a directory of `data_batch_{1..5}.bin` and `test_batch.bin`.
pub fn load_cifar10_dir(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let files: Vec<_> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    load_cifar10(&files)
}

/// `classes` unit-covariance Gaussian clusters of `per_class` points each,
/// with means on a scaled simplex so every pair of means is `separation`
/// apart. Points are interleaved by class.
pub fn synthetic_blobs(
    classes: usize,
    per_class: usize,
    shape: (usize, usize, usize),
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    let d = shape.0 * shape.1 * shape.2;
    if classes == 0 || per_class == 0 {
        return Err(Error::EmptyDataset("synthetic blobs need at least one point".into()));
    }
    if d < classes {
        return Err(Error::ShapeMismatch(format!("{classes} class means do not fit in {d} dimensions")));
    }
    if !(separation > 0.0) {
        return Err(Error::Config("separation must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = separation / std::f64::consts::SQRT_2;
    let mut pixels = Vec::with_capacity(classes * per_class * d);
    let mut labels = Vec::with_capacity(classes * per_class);
    for i in 0..classes * per_class {
        let c = i % classes;
        for k in 0..d {
            let mean = if k == c { scale } else { 0.0 };
            let z: f64 = StandardNormal.sample(&mut rng);
            pixels.push(mean + z);
        }
        labels.push(c);
    }
    let images = ImageSet::new(labels.len(), shape.0, shape.1, shape.2, pixels, Preprocessing::Raw)?;
    Dataset::new(images, labels, classes)
}
