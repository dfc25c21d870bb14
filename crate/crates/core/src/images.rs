use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How an [`ImageSet`]'s pixels were produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Preprocessing {
    Raw,
    Standard,
    Zca { lambda: f64 },
}

impl std::fmt::Display for Preprocessing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Preprocessing::Raw => write!(f, "raw"),
            Preprocessing::Standard => write!(f, "standard"),
            Preprocessing::Zca { lambda } => write!(f, "zca({lambda})"),
        }
    }
}

/// A batch of `count` images, each `height × width × channels`, stored
/// channel-last and row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
    tag: Preprocessing,
}

impl ImageSet {
    pub fn new(
        count: usize,
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f64>,
        tag: Preprocessing,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if pixels.len() != count * height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for {count} images of {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("image pixels must be finite".into()));
        }
        Ok(ImageSet {
            count,
            height,
            width,
            channels,
            pixels,
            tag,
        })
    }

    /// Column vectors viewed as `count` images of shape `1×1×d`.
    pub fn from_vectors(vectors: &[Vec<f64>]) -> Result<Self> {
        let d = vectors.first().map(|v| v.len()).unwrap_or(1);
        let mut pixels = Vec::with_capacity(vectors.len() * d);
        for v in vectors {
            if v.len() != d {
                return Err(Error::ShapeMismatch("vectors differ in length".into()));
            }
            pixels.extend_from_slice(v);
        }
        ImageSet::new(vectors.len(), 1, 1, d, pixels, Preprocessing::Raw)
    }

    pub fn empty_like(&self) -> Self {
        ImageSet {
            count: 0,
            pixels: Vec::new(),
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Flattened length of one image.
    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn tag(&self) -> Preprocessing {
        self.tag
    }

    pub fn with_tag(mut self, tag: Preprocessing) -> Self {
        self.tag = tag;
        self
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.image_len();
        &mut self.pixels[i * n..(i + 1) * n]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.pixels.chunks_exact(self.image_len())
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        ImageSet {
            count: indices.len(),
            pixels,
            ..self.clone()
        }
    }

    pub fn range(&self, start: usize, end: usize) -> Self {
        let n = self.image_len();
        ImageSet {
            count: end - start,
            pixels: self.pixels[start * n..end * n].to_vec(),
            ..self.clone()
        }
    }

    pub fn same_shape(&self, other: &ImageSet) -> bool {
        self.shape() == other.shape()
    }

    pub fn concat(&self, other: &ImageSet) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "cannot concatenate {:?} with {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut pixels = self.pixels.clone();
        pixels.extend_from_slice(&other.pixels);
        Ok(ImageSet {
            count: self.count + other.count,
            pixels,
            ..self.clone()
        })
    }

    /// Pushes one flattened image.
    pub fn push(&mut self, image: &[f64]) -> Result<()> {
        if image.len() != self.image_len() {
            return Err(Error::ShapeMismatch("image length differs from set".into()));
        }
        self.pixels.extend_from_slice(image);
        self.count += 1;
        Ok(())
    }
}

/// A labelled image dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: ImageSet,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: ImageSet, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::ShapeMismatch(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Dataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Indices of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn with_images(&self, images: ImageSet) -> Self {
        Dataset {
            images,
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }
}
