//! Reading IDX files (plain or gzipped) and building the run's splits.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flate2::read::GzDecoder;
use peps_core::data::{
    parse_idx_images, parse_idx_labels, split_train_val, subset, Dataset, Split,
};

use crate::run_spec::RunSpec;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Reads `path`, inflating it when it starts with the gzip magic.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .with_context(|| format!("inflating {}", path.display()))?;
        return Ok(out);
    }
    Ok(raw)
}

/// `dir/name`, or `dir/name.gz` when only that exists.
fn locate(dir: &Path, name: &str) -> Result<PathBuf> {
    let plain = dir.join(name);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    bail!("neither {} nor {} exists", plain.display(), gz.display())
}

fn load_pair(dir: &Path, images: &str, labels: &str, split: Split) -> Result<Dataset> {
    let ip = locate(dir, images)?;
    let lp = locate(dir, labels)?;
    let imgs = parse_idx_images(&read_maybe_gz(&ip)?)
        .with_context(|| format!("parsing {}", ip.display()))?;
    let labs = parse_idx_labels(&read_maybe_gz(&lp)?)
        .with_context(|| format!("parsing {}", lp.display()))?;
    Ok(Dataset::new(imgs, labs, split)?)
}

pub struct RunData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl RunData {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Official train file split into train/validation by the run seed, the
/// test file as test, each optionally cut to a stratified subset.
pub fn load(spec: &RunSpec) -> Result<RunData> {
    let dir = spec.require_data_dir()?;
    let full = load_pair(dir, TRAIN_IMAGES, TRAIN_LABELS, Split::Train)?;
    let test = load_pair(dir, TEST_IMAGES, TEST_LABELS, Split::Test)?;
    let seed = spec.train.seed;
    let (train, val) = split_train_val(&full, spec.val_count(full.len()), seed)?;
    let cut = |ds: Dataset, k: Option<usize>| -> Result<Dataset> {
        match k {
            Some(k) if k < ds.len() => Ok(subset(&ds, k, seed, true)?),
            _ => Ok(ds),
        }
    };
    Ok(RunData {
        train: cut(train, spec.subset)?,
        val: cut(val, spec.val_subset())?,
        test: cut(test, spec.test_subset())?,
    })
}
