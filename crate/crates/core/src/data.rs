//! Synthetic stripe images and IDX ingestion.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, substream, Stream};
use crate::tensor::{Shape, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub seed: Option<u64>,
    pub params: BTreeMap<String, String>,
}

/// Images `(n, c, h, w)` in `[0, 1]` with one class index per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, meta: DatasetMeta) -> Result<Self> {
        if labels.len() != images.shape().n {
            return Err(Error::shape(format!(
                "{} labels for {} images",
                labels.len(),
                images.shape().n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} not below class count {num_classes}"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(c, h, w)` of one image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s.c, s.h, s.w)
    }

    /// Gather images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let s = self.images.shape();
        let per = s.c * s.h * s.w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= s.n {
                return Err(Error::invalid(format!("index {i} out of range for {} samples", s.n)));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((
            Tensor::from_vec_unchecked([indices.len(), s.c, s.h, s.w], data)?,
            labels,
        ))
    }

    pub fn subset(&self, indices: &[usize], name: &str) -> Result<Dataset> {
        let (images, labels) = self.batch(indices)?;
        let mut meta = self.meta.clone();
        meta.name = format!("{}/{name}", self.meta.name);
        Dataset::new(images, labels, self.num_classes, meta)
    }
}

/// Two-class stripes: class 0 lights even rows, class 1 lights even columns.
/// Labels alternate `0, 1, 0, ...`; noise is Gaussian and the result is clamped to `[0, 1]`.
pub fn synth_stripes(n: usize, size: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if size == 0 || !size.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "stripe image size must be even and positive, got {size}"
        )));
    }
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 samples, got {n}")));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid(format!(
            "noise std must be finite and non-negative, got {noise_std}"
        )));
    }
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = stream(seed, Stream::Noise);
    let plane = size * size;
    let mut data = Vec::with_capacity(n * plane);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    for &label in &labels {
        for r in 0..size {
            for c in 0..size {
                let on = if label == 0 { r % 2 == 0 } else { c % 2 == 0 };
                let base = if on { 1.0 } else { 0.0 };
                let v = if noise_std > 0.0 {
                    base + rng.sample(noise)
                } else {
                    base
                };
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    let mut params = BTreeMap::new();
    params.insert("n".into(), n.to_string());
    params.insert("size".into(), size.to_string());
    params.insert("noise_std".into(), noise_std.to_string());
    Dataset::new(
        Tensor::from_vec(Shape::new(n, 1, size, size), data)?,
        labels,
        2,
        DatasetMeta {
            name: "stripes".into(),
            seed: Some(seed),
            params,
        },
    )
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(format!(
                "truncated IDX {}: need {len} bytes at offset {}, file has {}",
                self.what,
                self.pos,
                self.bytes.len()
            )));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse an unsigned-byte IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let mut r = Reader {
        bytes,
        pos: 0,
        what: "images",
    };
    let magic = r.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!("bad IDX image magic {magic:#010x}")));
    }
    let (n, rows, cols) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let total = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format("IDX image dimensions overflow"))?;
    Ok((n, rows, cols, r.take(total)?))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let mut r = Reader {
        bytes,
        pos: 0,
        what: "labels",
    };
    let magic = r.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = r.u32()? as usize;
    r.take(n)
}

/// Build a dataset from in-memory IDX image and label files.
pub fn idx_dataset(images: &[u8], labels: &[u8], limit: Option<usize>) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let label_bytes = parse_idx_labels(labels)?;
    if label_bytes.len() != n {
        return Err(Error::format(format!(
            "IDX count mismatch: {n} images but {} labels",
            label_bytes.len()
        )));
    }
    let count = limit.map_or(n, |l| l.min(n));
    let data = pixels[..count * rows * cols]
        .iter()
        .map(|&p| f64::from(p) / 255.0)
        .collect();
    let labels: Vec<usize> = label_bytes[..count].iter().map(|&l| usize::from(l)).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut params = BTreeMap::new();
    params.insert("rows".into(), rows.to_string());
    params.insert("cols".into(), cols.to_string());
    Dataset::new(
        Tensor::from_vec_unchecked([count, 1, rows, cols], data)?,
        labels,
        num_classes,
        DatasetMeta {
            name: "idx".into(),
            seed: None,
            params,
        },
    )
}

pub fn load_idx(image_path: &Path, label_path: &Path, limit: Option<usize>) -> Result<Dataset> {
    let images = std::fs::read(image_path)?;
    let labels = std::fs::read(label_path)?;
    let mut ds = idx_dataset(&images, &labels, limit)?;
    ds.meta.name = image_path.display().to_string();
    Ok(ds)
}

/// Stratified, seeded partition into `(train, eval)`; `fraction` of each class goes to train.
pub fn split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "split fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (class, mut idx) in by_class {
        idx.shuffle(&mut substream(seed, Stream::Split, class as u64));
        let cut = (fraction * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..cut]);
        eval.extend_from_slice(&idx[cut..]);
    }
    if train.is_empty() || eval.is_empty() {
        return Err(Error::invalid(format!(
            "split of {} samples at {fraction} leaves an empty side",
            dataset.len()
        )));
    }
    train.sort_unstable();
    eval.sort_unstable();
    Ok((dataset.subset(&train, "train")?, dataset.subset(&eval, "eval")?))
}
