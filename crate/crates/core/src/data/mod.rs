//! Dataset ingestion, preprocessing and the one-class protocol split.

mod formats;

pub use formats::{
    load_cifar_batch, load_idx, load_image_dir, load_image_file, load_mnist, LabelMap,
};

use rand::Rng;

use crate::autodiff::{Element, Tensor};
use crate::error::{Error, Result};
use crate::networks::IMAGE_SIZE;

/// 8-bit image in `[C, H, W]` layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels * height * width != pixels.len() || pixels.is_empty() {
            return Err(Error::Data(format!(
                "{channels}x{height}x{width} image with {} bytes",
                pixels.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> u8 {
        self.pixels[(c * self.height + y) * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<Image>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Vec<Image>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn channels(&self) -> Option<usize> {
        self.images.first().map(|i| i.channels)
    }

    /// The first `n` samples (all of them when `n >= len`).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            name: self.name.clone(),
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Preprocessed batch `[N, C, 32, 32]`.
    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let per: Vec<Tensor<T>> = self.images.iter().map(preprocess).collect();
        let refs: Vec<&Tensor<T>> = per.iter().collect();
        Tensor::stack(&refs).map_err(|_| Error::Data("images have differing channel counts".into()))
    }
}

/// Training images of one class plus the untouched test set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OneClassSplit {
    pub train: Dataset,
    pub test: Dataset,
    pub positive_class: u8,
}

impl OneClassSplit {
    /// Ground truth per test sample: `true` for the in-class label.
    pub fn is_positive(&self) -> Vec<bool> {
        self.test
            .labels
            .iter()
            .map(|&l| l == self.positive_class)
            .collect()
    }
}

pub fn one_class_split(
    train: &Dataset,
    test: &Dataset,
    positive_class: u8,
) -> Result<OneClassSplit> {
    let keep: Vec<usize> = (0..train.len())
        .filter(|&i| train.labels[i] == positive_class)
        .collect();
    if keep.is_empty() {
        return Err(Error::ClassAbsent(positive_class));
    }
    if !test.labels.iter().any(|&l| l != positive_class) {
        return Err(Error::Data(format!(
            "test set has no samples outside class {positive_class}"
        )));
    }
    let filtered = Dataset {
        name: train.name.clone(),
        images: keep.iter().map(|&i| train.images[i].clone()).collect(),
        labels: vec![positive_class; keep.len()],
    };
    Ok(OneClassSplit {
        train: filtered,
        test: test.clone(),
        positive_class,
    })
}

/// Source coordinate for output index `dst` under half-pixel-centre alignment.
fn source_coord(dst: usize, scale: f64, extent: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(extent - 1);
    (lo, hi, s - lo as f64)
}

/// Bilinear resize to 32x32 followed by division by 255.
pub fn preprocess<T: Element>(image: &Image) -> Tensor<T> {
    let (c, h, w) = (image.channels, image.height, image.width);
    let sy = h as f64 / IMAGE_SIZE as f64;
    let sx = w as f64 / IMAGE_SIZE as f64;
    let rows: Vec<_> = (0..IMAGE_SIZE).map(|y| source_coord(y, sy, h)).collect();
    let cols: Vec<_> = (0..IMAGE_SIZE).map(|x| source_coord(x, sx, w)).collect();
    let mut out = Vec::with_capacity(c * IMAGE_SIZE * IMAGE_SIZE);
    for ch in 0..c {
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let p = |y, x| image.pixel(ch, y, x) as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out.push(T::from_f64_lossy(v / 255.0));
            }
        }
    }
    Tensor::new(vec![c, IMAGE_SIZE, IMAGE_SIZE], out).expect("preprocess shape")
}

/// Mirrors columns with probability `p`.
pub fn augment_flip<R: Rng + ?Sized>(image: &Image, rng: &mut R, p: f64) -> Image {
    if p <= 0.0 || !rng.random_bool(p.min(1.0)) {
        return image.clone();
    }
    flip_horizontal(image)
}

pub fn flip_horizontal(image: &Image) -> Image {
    let mut out = image.clone();
    for row in out.pixels.chunks_mut(image.width) {
        row.reverse();
    }
    out
}
