//! IDX parsing and serialization, splits and subsets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::Image;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::dim(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| usize::from(l) >= NUM_CLASSES) {
            return Err(Error::arg(format!("label {l} out of range")));
        }
        Ok(Self {
            images,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize], split: Split) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split,
        }
    }

    /// Count of each label.
    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[usize::from(l)] += 1;
        }
        h
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(at, "header truncated"))
}

fn check_magic(bytes: &[u8], want: u32) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != want {
        return Err(Error::format(
            0,
            format!("magic {magic:#010x}, expected {want:#010x}"),
        ));
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Image>> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows != cols || rows == 0 {
        return Err(Error::format(
            8,
            format!("images of {rows}x{cols}, expected square"),
        ));
    }
    let size = rows * cols;
    let payload = &bytes[16..];
    if payload.len() < count * size {
        return Err(Error::format(
            bytes.len(),
            format!(
                "payload holds {} bytes, header promises {}",
                payload.len(),
                count * size
            ),
        ));
    }
    if payload.len() > count * size {
        return Err(Error::format(
            16 + count * size,
            "trailing bytes after the last image",
        ));
    }
    payload
        .chunks_exact(size)
        .map(|px| Image::from_bytes(rows, px))
        .collect()
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::format(
            8 + payload.len().min(count),
            format!(
                "payload holds {} labels, header promises {count}",
                payload.len()
            ),
        ));
    }
    if let Some(k) = payload.iter().position(|&l| usize::from(l) >= NUM_CLASSES) {
        return Err(Error::format(
            8 + k,
            format!("label {} out of range", payload[k]),
        ));
    }
    Ok(payload.to_vec())
}

/// Inverse of `parse_idx_images`; pixels are rounded to the nearest byte.
pub fn images_to_idx(images: &[Image]) -> Result<Vec<u8>> {
    let side = images.first().map_or(28, Image::side);
    let mut out = Vec::with_capacity(16 + images.len() * side * side);
    for v in [IMAGES_MAGIC, images.len() as u32, side as u32, side as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        if img.side() != side {
            return Err(Error::dim("images of different sizes"));
        }
        out.extend(img.pixels().iter().map(|p| (p * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn labels_to_idx(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Seeded permutation; the last `val_count` samples become the validation set.
pub fn split_train_val(train: &Dataset, val_count: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if val_count >= train.len() {
        return Err(Error::arg(format!(
            "validation size {val_count} leaves nothing of {} samples",
            train.len()
        )));
    }
    let idx = shuffled(train.len(), seed);
    let cut = train.len() - val_count;
    Ok((
        train.select(&idx[..cut], Split::Train),
        train.select(&idx[cut..], Split::Val),
    ))
}

/// First `k` samples after a seeded shuffle. When `stratified`, classes are
/// taken round-robin so their counts differ by at most one (while supply lasts).
pub fn subset(ds: &Dataset, k: usize, seed: u64, stratified: bool) -> Result<Dataset> {
    if k > ds.len() {
        return Err(Error::arg(format!(
            "subset of {k} from {} samples",
            ds.len()
        )));
    }
    let idx = shuffled(ds.len(), seed);
    if !stratified {
        return Ok(ds.select(&idx[..k], ds.split));
    }
    let mut queues: Vec<std::collections::VecDeque<usize>> = vec![Default::default(); NUM_CLASSES];
    for (pos, &i) in idx.iter().enumerate() {
        queues[usize::from(ds.labels[i])].push_back(pos);
    }
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        for q in queues.iter_mut() {
            if picked.len() == k {
                break;
            }
            if let Some(pos) = q.pop_front() {
                picked.push(pos);
            }
        }
    }
    picked.sort_unstable();
    let chosen: Vec<usize> = picked.into_iter().map(|p| idx[p]).collect();
    Ok(ds.select(&chosen, ds.split))
}
