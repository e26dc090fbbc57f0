//! Parameter updates. Both optimizers optionally project onto |θ| afterwards.

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!(
                "unknown optimizer `{other}` (expected sgd or adam)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<DenseTensor>,
    pub v: Vec<DenseTensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[DenseTensor]) -> Self {
        let zeros: Vec<DenseTensor> = params
            .iter()
            .map(|p| DenseTensor::zeros(p.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam(AdamState),
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &[DenseTensor]) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam(AdamState::new(params)),
        }
    }

    /// Applies one update with this optimizer.
    pub fn step(
        &mut self,
        params: &mut [DenseTensor],
        grads: &[DenseTensor],
        lr: f64,
        hyper: &AdamHyper,
        positivity: bool,
    ) -> Result<()> {
        match self {
            OptimizerState::Sgd => sgd_step(params, grads, lr, positivity),
            OptimizerState::Adam(s) => adam_step(params, grads, s, lr, hyper, positivity),
        }
    }
}

fn check_shapes(params: &[DenseTensor], grads: &[DenseTensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::dim(format!(
                "parameter {k} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    Ok(())
}

fn project(x: f64, positivity: bool) -> f64 {
    if positivity {
        x.abs()
    } else {
        x
    }
}

/// θ ← θ − lr·g
pub fn sgd_step(
    params: &mut [DenseTensor],
    grads: &[DenseTensor],
    lr: f64,
    positivity: bool,
) -> Result<()> {
    check_shapes(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        *p = p.zip_map(g, |x, g| project(x - lr * g, positivity))?;
    }
    Ok(())
}

/// Bias-corrected Adam.
pub fn adam_step(
    params: &mut [DenseTensor],
    grads: &[DenseTensor],
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
    positivity: bool,
) -> Result<()> {
    check_shapes(params, grads)?;
    check_shapes(&state.m, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (k, g) in grads.iter().enumerate() {
        let gd = g.data();
        let mut m = state.m[k].to_vec();
        let mut v = state.v[k].to_vec();
        let mut p = params[k].to_vec();
        for i in 0..gd.len() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gd[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gd[i] * gd[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] = project(p[i] - lr * mh / (vh.sqrt() + hyper.eps), positivity);
        }
        let shape = g.shape().to_vec();
        state.m[k] = DenseTensor::from_parts(shape.clone(), m);
        state.v[k] = DenseTensor::from_parts(shape.clone(), v);
        params[k] = DenseTensor::from_parts(shape, p);
    }
    Ok(())
}
