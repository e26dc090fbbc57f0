//! Minibatch training and evaluation over datasets.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::contraction::ContractOptions;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::peps::Model;
use crate::tensor::DenseTensor;

use super::config::TrainConfig;
use super::forward::{log_domain_loss, loss_and_grad, predict};
use super::loss::argmax;
use super::optim::OptimizerState;

/// One row of the metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub seconds: f64,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_acc,val_acc,test_acc,seconds";

    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch,
            self.train_loss,
            self.train_acc,
            opt(self.val_acc),
            opt(self.test_acc),
            self.seconds
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// NaN when some sample has a non-positive class score.
    pub mean_loss: f64,
    pub predictions: Vec<usize>,
}

/// Accuracy and mean loss on `ds`; samples are evaluated in parallel and
/// reduced in index order.
pub fn evaluate(model: &Model, ds: &Dataset, opts: &ContractOptions) -> Result<Evaluation> {
    let per: Vec<(usize, f64)> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let logits = predict(model, &ds.images[i], opts).map_err(|e| with_sample(e, i))?;
            let label = usize::from(ds.labels[i]);
            Ok((
                argmax(&logits.values),
                log_domain_loss(&logits, label).unwrap_or(f64::NAN),
            ))
        })
        .collect::<Result<_>>()?;
    let n = ds.len().max(1) as f64;
    let correct = per
        .iter()
        .zip(&ds.labels)
        .filter(|((p, _), &l)| *p == usize::from(l))
        .count();
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        mean_loss: per.iter().map(|(_, l)| l).sum::<f64>() / n,
        predictions: per.into_iter().map(|(p, _)| p).collect(),
    })
}

fn with_sample(e: Error, i: usize) -> Error {
    match e {
        Error::Capacity(m) => Error::Capacity(format!("sample {i}: {m}")),
        Error::Numerical(m) => Error::Numerical(format!("sample {i}: {m}")),
        Error::Dimension(m) => Error::Dimension(format!("sample {i}: {m}")),
        other => other,
    }
}

/// The visiting order of epoch `epoch`: a permutation seeded by (seed, epoch).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Mean loss and mean gradient over the samples at `batch`.
pub fn batch_gradient(
    model: &Model,
    ds: &Dataset,
    batch: &[usize],
    opts: &ContractOptions,
) -> Result<(f64, Vec<DenseTensor>)> {
    let per: Vec<(f64, Vec<DenseTensor>)> = batch
        .par_iter()
        .map(|&i| {
            loss_and_grad(model, &ds.images[i], usize::from(ds.labels[i]), opts)
                .map_err(|e| with_sample(e, i))
        })
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut iter = per.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or_else(|| Error::arg("empty batch"))?;
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            *acc = acc.add(gi)?;
        }
    }
    Ok((loss / n, grads.iter().map(|g| g.scale(1.0 / n)).collect()))
}

/// One pass over `ds` in minibatches with one optimizer step per batch.
/// Returns the mean of the batch losses.
pub fn train_epoch(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    epoch: usize,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::arg("empty training set"));
    }
    let opts = ContractOptions::from(cfg);
    let order = epoch_order(ds.len(), cfg.seed, epoch);
    let mut total = 0.0;
    let mut batches = 0;
    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        let (loss, mut grads) = batch_gradient(model, ds, batch, &opts)
            .map_err(|e| Error::Numerical(format!("epoch {epoch}, batch {b}: {e}")))?;
        let max_grad = grads.iter().map(DenseTensor::max_abs).fold(0.0, f64::max);
        if !loss.is_finite() || !max_grad.is_finite() {
            return Err(Error::Numerical(format!(
                "epoch {epoch}, batch {b}: loss {loss}, max |grad| {max_grad}"
            )));
        }
        let mut params = model.params();
        if cfg.weight_decay > 0.0 {
            for (g, p) in grads.iter_mut().zip(&params) {
                *g = g.add(&p.scale(cfg.weight_decay))?;
            }
        }
        state.step(
            &mut params,
            &grads,
            cfg.learning_rate,
            &cfg.adam,
            model.positivity,
        )?;
        model.set_params(params)?;
        total += loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}

pub struct Splits<'a> {
    pub train: &'a Dataset,
    pub val: Option<&'a Dataset>,
    pub test: Option<&'a Dataset>,
}

/// `train_epoch` followed by accuracies on every split.
pub fn run_epoch(
    model: &mut Model,
    state: &mut OptimizerState,
    splits: &Splits<'_>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Metrics> {
    let start = Instant::now();
    let train_loss = train_epoch(model, splits.train, cfg, state, epoch)?;
    let opts = ContractOptions::from(cfg);
    let acc = |ds: Option<&Dataset>| -> Result<Option<f64>> {
        ds.map(|d| evaluate(model, d, &opts).map(|e| e.accuracy))
            .transpose()
    };
    let train_acc = acc(Some(splits.train))?.expect("train split present");
    let val_acc = acc(splits.val)?;
    let test_acc = acc(splits.test)?;
    Ok(Metrics {
        epoch,
        train_loss,
        train_acc,
        val_acc,
        test_acc,
        seconds: start.elapsed().as_secs_f64(),
    })
}
