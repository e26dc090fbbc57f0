//! Effective settings: defaults, then the config file, then flags.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use peps_core::data::Split;
use peps_core::training::{parse_kv, TrainConfig};

use crate::Flags;

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub train: TrainConfig,
    /// Training keys given explicitly (file or flag).
    pub explicit: Vec<String>,
    pub subset: Option<usize>,
    pub val_subset: Option<usize>,
    pub test_subset: Option<usize>,
    /// Validation samples carved from the training file; `None` means
    /// 5000, or a twelfth of the file when it is smaller than 60000.
    pub val_count: Option<usize>,
    pub workers: Option<usize>,
    pub split: Split,
    pub index: usize,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            data_dir: None,
            out: None,
            checkpoint: None,
            image: None,
            train: TrainConfig::default(),
            explicit: Vec::new(),
            subset: None,
            val_subset: None,
            test_subset: None,
            val_count: None,
            workers: None,
            split: Split::Test,
            index: 0,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .ok()
        .with_context(|| format!("invalid value `{value}` for `{key}`"))
}

impl RunSpec {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = Some(value.into()),
            "out" => self.out = Some(value.into()),
            "checkpoint" => self.checkpoint = Some(value.into()),
            "image" => self.image = Some(value.into()),
            "subset" => self.subset = Some(num(key, value)?),
            "val_subset" => self.val_subset = Some(num(key, value)?),
            "test_subset" => self.test_subset = Some(num(key, value)?),
            "val_count" => self.val_count = Some(num(key, value)?),
            "workers" => self.workers = Some(num(key, value)?),
            "split" => self.split = value.parse()?,
            "index" => self.index = num(key, value)?,
            _ => {
                if !self.train.set(key, value)? {
                    bail!("unknown config key `{key}`");
                }
                if !self.explicit.iter().any(|k| k == key) {
                    self.explicit.push(key.to_string());
                }
            }
        }
        Ok(())
    }

    pub fn resolve(flags: &Flags) -> Result<Self> {
        let mut spec = RunSpec::default();
        if let Some(path) = &flags.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (k, v) in
                parse_kv(&text).with_context(|| format!("in config {}", path.display()))?
            {
                spec.set(&k, &v)
                    .with_context(|| format!("in config {}", path.display()))?;
            }
        }
        let path_flags = [
            ("data_dir", &flags.data_dir),
            ("out", &flags.out),
            ("checkpoint", &flags.checkpoint),
            ("image", &flags.image),
        ];
        for (k, v) in path_flags {
            if let Some(p) = v {
                spec.set(k, &p.to_string_lossy())?;
            }
        }
        let value_flags = [
            ("d", &flags.d),
            ("chi", &flags.chi),
            ("lr", &flags.lr),
            ("batch", &flags.batch),
            ("epochs", &flags.epochs),
            ("seed", &flags.seed),
            ("feature", &flags.feature),
            ("positivity", &flags.positivity),
            ("subset", &flags.subset),
            ("val_count", &flags.val_count),
            ("workers", &flags.workers),
            ("split", &flags.split),
            ("index", &flags.index),
        ];
        for (k, v) in value_flags {
            if let Some(v) = v {
                spec.set(k, v)?;
            }
        }
        spec.train.validate()?;
        if spec.workers == Some(0) {
            bail!("workers must be at least 1");
        }
        if let Some(dir) = &spec.data_dir {
            if !dir.is_dir() {
                bail!("data directory {} does not exist", dir.display());
            }
        }
        if let Some(w) = spec.workers {
            // a second initialization (tests calling twice) keeps the first pool
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build_global();
        }
        Ok(spec)
    }

    /// Every effective setting as `key=value`, for the metrics header.
    pub fn echo(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .train
            .to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        let opt = |x: Option<usize>| x.map_or("all".to_string(), |v| v.to_string());
        out.push(format!("subset={}", opt(self.subset)));
        out.push(format!("val_subset={}", opt(self.val_subset())));
        out.push(format!("test_subset={}", opt(self.test_subset())));
        out.push(format!(
            "val_count={}",
            self.val_count.map_or("auto".to_string(), |v| v.to_string())
        ));
        out
    }

    pub fn val_count(&self, available: usize) -> usize {
        self.val_count.unwrap_or(if available >= 60000 {
            5000
        } else {
            available / 12
        })
    }

    pub fn val_subset(&self) -> Option<usize> {
        self.val_subset.or(self.subset.map(|n| n / 4))
    }

    pub fn test_subset(&self) -> Option<usize> {
        self.test_subset.or(self.subset.map(|n| n / 2))
    }

    pub fn require_checkpoint(&self) -> Result<&PathBuf> {
        let p = self
            .checkpoint
            .as_ref()
            .context("--checkpoint is required")?;
        if !p.is_file() {
            bail!("checkpoint {} does not exist", p.display());
        }
        Ok(p)
    }

    pub fn require_data_dir(&self) -> Result<&PathBuf> {
        self.data_dir.as_ref().context("--data-dir is required")
    }
}
