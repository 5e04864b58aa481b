use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, Image};
use crate::error::{Error, Result};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Big-endian IDX image and label files.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ib = read(images_path)?;
    let lb = read(labels_path)?;
    let magic = be_u32(&ib, 0, images_path)?;
    if magic != IDX_IMAGES {
        return Err(Error::format(
            images_path,
            format!("bad image magic {magic:#010x}"),
        ));
    }
    let magic = be_u32(&lb, 0, labels_path)?;
    if magic != IDX_LABELS {
        return Err(Error::format(
            labels_path,
            format!("bad label magic {magic:#010x}"),
        ));
    }
    let n = be_u32(&ib, 4, images_path)? as usize;
    let h = be_u32(&ib, 8, images_path)? as usize;
    let w = be_u32(&ib, 12, images_path)? as usize;
    let nl = be_u32(&lb, 4, labels_path)? as usize;
    if n != nl {
        return Err(Error::format(
            labels_path,
            format!("{nl} labels for {n} images in {}", images_path.display()),
        ));
    }
    let per = h * w;
    if per == 0 {
        return Err(Error::format(images_path, "zero image extent"));
    }
    if ib.len() != 16 + n * per {
        return Err(Error::format(
            images_path,
            format!("expected {} bytes, found {}", 16 + n * per, ib.len()),
        ));
    }
    if lb.len() != 8 + n {
        return Err(Error::format(
            labels_path,
            format!("expected {} bytes, found {}", 8 + n, lb.len()),
        ));
    }
    let images = ib[16..]
        .chunks(per)
        .map(|px| Image::new(1, h, w, px.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(name_of(images_path), images, lb[8..].to_vec())
}

/// Standard MNIST file names inside `dir`; returns `(train, test)`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

/// CIFAR-10 binary batch: records of one label byte and three 32x32 planes.
pub fn load_cifar_batch(path: &Path) -> Result<Dataset> {
    let bytes = read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(
            path,
            format!(
                "size {} is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        ));
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(images.capacity());
    for rec in bytes.chunks(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::format(
                path,
                format!("label {} out of range", rec[0]),
            ));
        }
        labels.push(rec[0]);
        images.push(Image::new(3, CIFAR_SIDE, CIFAR_SIDE, rec[1..].to_vec())?);
    }
    Dataset::new(name_of(path), images, labels)
}

/// Label assignment for [`load_image_dir`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelMap {
    /// Every file gets the same label.
    Constant(u8),
    /// First matching file-name prefix wins; unmatched files are an error.
    Prefix(Vec<(String, u8)>),
}

impl LabelMap {
    fn label(&self, file_name: &str) -> Option<u8> {
        match self {
            LabelMap::Constant(l) => Some(*l),
            LabelMap::Prefix(rules) => rules
                .iter()
                .find(|(p, _)| file_name.starts_with(p.as_str()))
                .map(|(_, l)| *l),
        }
    }
}

/// Decodes one image file. Grayscale files become one channel, everything
/// else three (alpha dropped).
pub fn load_image_file(path: &Path) -> Result<Image> {
    let decoded = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let img = if decoded.color().channel_count() <= 2 {
        let g = decoded.to_luma8();
        let (w, h) = g.dimensions();
        Image::new(1, h as usize, w as usize, g.into_raw())?
    } else {
        let rgb = decoded.to_rgb8();
        let (w, h) = rgb.dimensions();
        let (w, h) = (w as usize, h as usize);
        let raw = rgb.into_raw();
        // interleaved HWC to planar CHW
        let mut planar = vec![0u8; 3 * h * w];
        for (i, px) in raw.chunks(3).enumerate() {
            for c in 0..3 {
                planar[c * h * w + i] = px[c];
            }
        }
        Image::new(3, h, w, planar)?
    };
    Ok(img)
}

/// Decodes every regular file of `dir` in lexicographic name order.
pub fn load_image_dir(dir: &Path, labels: &LabelMap) -> Result<Dataset> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut images = Vec::with_capacity(files.len());
    let mut out_labels = Vec::with_capacity(files.len());
    for path in &files {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        let label = labels
            .label(name)
            .ok_or_else(|| Error::format(path, "no label rule matches this file"))?;
        let img = load_image_file(path)?;
        if let Some(first) = images.first() {
            let first: &Image = first;
            if first.channels != img.channels {
                return Err(Error::format(
                    path,
                    "channel count differs from earlier files",
                ));
            }
        }
        images.push(img);
        out_labels.push(label);
    }
    Dataset::new(name_of(dir), images, out_labels)
}

fn name_of(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}
