//! Hyperparameters and the flat `key = value` config format.

use crate::autodiff::DEFAULT_SVD_EPS;
use crate::error::{Error, Result};
use crate::features::FeatureKind;

use super::optim::{AdamHyper, OptimizerKind};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Virtual bond dimension D.
    pub bond: usize,
    pub chi: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub adam: AdamHyper,
    pub positivity: bool,
    pub feature: FeatureKind,
    pub svd_eps: f64,
    /// Number of labels T.
    pub labels: usize,
    /// Recompute row absorptions during backward instead of keeping them.
    pub checkpoint_rows: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            bond: 2,
            chi: 10,
            learning_rate: 1e-4,
            batch_size: 100,
            epochs: 100,
            weight_decay: 0.0,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            adam: AdamHyper::default(),
            positivity: true,
            feature: FeatureKind::Product,
            svd_eps: DEFAULT_SVD_EPS,
            labels: 10,
            checkpoint_rows: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

pub fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value `{value}` for `{key}` (expected on or off)"
        ))),
    }
}

fn switch(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl TrainConfig {
    /// Sets one key. Returns `Ok(false)` when the key is not a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "d" => self.bond = parse(key, value)?,
            "chi" => self.chi = parse(key, value)?,
            "lr" => self.learning_rate = parse(key, value)?,
            "batch" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "adam_beta1" => self.adam.beta1 = parse(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "positivity" => self.positivity = parse_switch(key, value)?,
            "feature" => self.feature = value.parse()?,
            "svd_eps" => self.svd_eps = parse(key, value)?,
            "labels" => self.labels = parse(key, value)?,
            "checkpoint_rows" => self.checkpoint_rows = parse_switch(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every key with its current value, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d", self.bond.to_string()),
            ("chi", self.chi.to_string()),
            ("lr", self.learning_rate.to_string()),
            ("batch", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("optimizer", self.optimizer.as_str().to_string()),
            ("adam_beta1", self.adam.beta1.to_string()),
            ("adam_beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("positivity", switch(self.positivity).to_string()),
            ("feature", self.feature.as_str().to_string()),
            ("svd_eps", self.svd_eps.to_string()),
            ("labels", self.labels.to_string()),
            ("checkpoint_rows", switch(self.checkpoint_rows).to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.bond),
            ("chi", self.chi),
            ("batch", self.batch_size),
            ("labels", self.labels),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be at least 1")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("lr must be a non-negative number".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(
                "weight_decay must be a non-negative number".into(),
            ));
        }
        if !(self.svd_eps > 0.0) {
            return Err(Error::Config("svd_eps must be positive".into()));
        }
        let AdamHyper { beta1, beta2, eps } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return Err(Error::Config(
                "adam constants need 0 <= beta < 1 and eps > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Parses `key = value` lines; `#` starts a comment. Duplicate keys are errors.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`",
                n + 1
            )));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{k}`",
                n + 1
            )));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}
