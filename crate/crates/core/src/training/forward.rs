//! One image through feature map, PEPS absorption and contraction.

use crate::autodiff::{LossDomain, NodeId, Tape};
use crate::contraction::{bidirectional_contract_with, ContractOptions, LogitNode, Logits};
use crate::error::{Error, Result};
use crate::features::{
    conv_feature_map_on, product_state_map, site_vectors, ConvParams, FeatureKind, Image,
};
use crate::peps::{absorb_features, record_features, Geometry, Model, PepsGrid};
use crate::tensor::DenseTensor;

use super::config::TrainConfig;
use super::loss::cross_entropy_loss;

impl From<&TrainConfig> for ContractOptions {
    fn from(c: &TrainConfig) -> Self {
        ContractOptions {
            chi: c.chi,
            svd_eps: c.svd_eps,
            checkpoint_rows: c.checkpoint_rows,
        }
    }
}

/// A freshly initialized model for images of side `image_side`.
pub fn init_model(cfg: &TrainConfig, image_side: usize) -> Result<Model> {
    cfg.validate()?;
    let geom = Geometry::new(
        cfg.feature.grid_side(image_side),
        cfg.bond,
        cfg.feature.phys_dim(),
        cfg.labels,
    )?;
    let conv = (cfg.feature == FeatureKind::Conv).then(|| ConvParams::init(cfg.seed ^ 0x00c0_ffee));
    Model::new(
        PepsGrid::init(geom, cfg.seed),
        cfg.feature,
        conv,
        cfg.positivity,
    )
}

pub struct Forward {
    pub logits: LogitNode,
    /// Parameter leaves in `Model::params` order.
    pub params: Vec<NodeId>,
}

/// Records the full model on `tape`. With positivity on, a recording tape
/// evaluates |θ| so gradients carry sign(θ).
pub fn forward(
    tape: &mut Tape,
    model: &Model,
    img: &Image,
    opts: &ContractOptions,
) -> Result<Forward> {
    let geom = model.peps.geometry();
    let params: Vec<NodeId> = model.params().into_iter().map(|t| tape.leaf(t)).collect();
    let used: Vec<NodeId> = if model.positivity && tape.is_recording() {
        params.iter().map(|&p| tape.abs(p)).collect::<Result<_>>()?
    } else {
        params.clone()
    };
    let sites = &used[..geom.sites()];
    let features = match model.feature {
        FeatureKind::Product => {
            let grid = product_state_map(img);
            if grid.side() != geom.side {
                return Err(Error::dim(format!(
                    "{0}x{0} image gives a {1}x{1} grid, model is {2}x{2}",
                    img.side(),
                    grid.side(),
                    geom.side
                )));
            }
            record_features(tape, &grid)
        }
        FeatureKind::Conv => {
            let n = geom.sites();
            let grid = conv_feature_map_on(tape, img, used[n], used[n + 1])?;
            if tape.shape(grid)[0] != geom.side {
                return Err(Error::dim(format!(
                    "{0}x{0} image gives a {1}x{1} grid, model is {2}x{2}",
                    img.side(),
                    tape.shape(grid)[0],
                    geom.side
                )));
            }
            site_vectors(tape, grid)?
        }
    };
    let absorbed = absorb_features(tape, geom, sites, &features)?;
    let logits = bidirectional_contract_with(tape, &absorbed, opts)?;
    Ok(Forward { logits, params })
}

/// Logits without gradient bookkeeping.
pub fn predict(model: &Model, img: &Image, opts: &ContractOptions) -> Result<Logits> {
    let mut tape = Tape::inference();
    let f = forward(&mut tape, model, img, opts)?;
    Ok(Logits::from_node(&tape, f.logits))
}

/// Cross-entropy of `softmax(ln f)`, i.e. of the normalized scores `f / sum f`.
pub fn log_domain_loss(logits: &Logits, label: usize) -> Result<f64> {
    if let Some(v) = logits.values.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Numerical(format!("non-positive class score {v}")));
    }
    cross_entropy_loss(&logits.log_values(), label)
}

/// Loss of one sample and its gradient with respect to `Model::params`.
pub fn loss_and_grad(
    model: &Model,
    img: &Image,
    label: usize,
    opts: &ContractOptions,
) -> Result<(f64, Vec<DenseTensor>)> {
    let mut tape = Tape::new();
    let f = forward(&mut tape, model, img, opts)?;
    let loss = tape.cross_entropy(f.logits.values, label, LossDomain::LogDomain)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let out = f
        .params
        .iter()
        .map(|&p| {
            grads
                .get(p)
                .cloned()
                .unwrap_or_else(|| DenseTensor::zeros(tape.shape(p)))
        })
        .collect();
    Ok((value, out))
}
