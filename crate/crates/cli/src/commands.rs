use std::fs::{self, File};
use std::io::{BufWriter, Write};

use anyhow::{bail, Context, Result};
use log::info;
use peps_core::contraction::ContractOptions;
use peps_core::data::parse_idx_images;
use peps_core::features::FeatureKind;
use peps_core::peps::Model;
use peps_core::training::{
    argmax, evaluate, init_model, predict as predict_logits, run_epoch, softmax, OptimizerState,
    Splits,
};
use peps_core::Error;

use crate::datasets::{self, read_maybe_gz};
use crate::run_spec::RunSpec;

pub fn train(spec: &RunSpec) -> Result<()> {
    let cfg = &spec.train;
    let data = datasets::load(spec)?;
    let side = data.train.images.first().map_or(28, |i| i.side());
    let out = spec.out.clone().unwrap_or_else(|| "peps-out".into());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let best_path = spec
        .checkpoint
        .clone()
        .unwrap_or_else(|| out.join("model.ckpt"));
    let last_path = out.join("last.ckpt");

    let mut model = init_model(cfg, side)?;
    let mut state = OptimizerState::new(cfg.optimizer, &model.params());
    model.save(&best_path)?;
    info!(
        "train {} / val {} / test {} samples, {} parameters",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        model.param_count()
    );

    let metrics_path = out.join("metrics.csv");
    let mut metrics = BufWriter::new(
        File::create(&metrics_path)
            .with_context(|| format!("creating {}", metrics_path.display()))?,
    );
    for line in spec.echo() {
        writeln!(metrics, "# {line}")?;
    }
    writeln!(metrics, "{}", peps_core::training::Metrics::CSV_HEADER)?;
    metrics.flush()?;

    let splits = Splits {
        train: &data.train,
        val: (!data.val.is_empty()).then_some(&data.val),
        test: (!data.test.is_empty()).then_some(&data.test),
    };
    let mut best: Option<(usize, f64, Option<f64>)> = None;
    for epoch in 1..=cfg.epochs {
        let m = run_epoch(&mut model, &mut state, &splits, cfg, epoch)?;
        writeln!(metrics, "{}", m.csv_row())?;
        metrics.flush()?;
        model.save(&last_path)?;
        let val = m.val_acc.unwrap_or(m.train_acc);
        info!(
            "epoch {epoch}: loss {:.5} train {:.4} val {} test {} ({:.1}s)",
            m.train_loss,
            m.train_acc,
            fmt_opt(m.val_acc),
            fmt_opt(m.test_acc),
            m.seconds
        );
        if best.is_none_or(|(_, b, _)| val > b) {
            model.save(&best_path)?;
            best = Some((epoch, val, m.test_acc));
        }
    }
    match best {
        Some((epoch, val, test)) => println!(
            "best epoch {epoch}: val_acc {val:.4} test_acc {}",
            fmt_opt(test)
        ),
        None => println!(
            "epochs = 0: wrote initial checkpoint {}",
            best_path.display()
        ),
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.4}"))
}

/// Loads the checkpoint and rejects explicit settings that contradict it.
fn load_model(spec: &RunSpec) -> Result<Model> {
    let path = spec.require_checkpoint()?;
    let model = Model::load(path).with_context(|| format!("loading {}", path.display()))?;
    let g = model.peps.geometry();
    let set = |k: &str| spec.explicit.iter().any(|e| e == k);
    if set("d") && spec.train.bond != g.bond {
        return Err(Error::Version(format!(
            "checkpoint has D = {}, config asks for {}",
            g.bond, spec.train.bond
        ))
        .into());
    }
    if set("feature") && spec.train.feature != model.feature {
        return Err(Error::Version(format!(
            "checkpoint uses the {} feature map, config asks for {}",
            model.feature.as_str(),
            spec.train.feature.as_str()
        ))
        .into());
    }
    if set("labels") && spec.train.labels != g.labels {
        return Err(Error::Version(format!(
            "checkpoint has T = {}, config asks for {}",
            g.labels, spec.train.labels
        ))
        .into());
    }
    Ok(model)
}

pub fn eval(spec: &RunSpec) -> Result<()> {
    let model = load_model(spec)?;
    let data = datasets::load(spec)?;
    let ds = data.get(spec.split);
    let e = evaluate(&model, ds, &ContractOptions::from(&spec.train))?;
    println!("split: {}", spec.split.as_str());
    println!("samples: {}", ds.len());
    println!("accuracy: {}", e.accuracy);
    println!("mean_loss: {}", e.mean_loss);
    Ok(())
}

pub fn predict(spec: &RunSpec) -> Result<()> {
    let model = load_model(spec)?;
    let image = match &spec.image {
        Some(path) => {
            let imgs = parse_idx_images(&read_maybe_gz(path)?)
                .with_context(|| format!("parsing {}", path.display()))?;
            match imgs.into_iter().nth(spec.index) {
                Some(i) => i,
                None => bail!("{} has no image {}", path.display(), spec.index),
            }
        }
        None => {
            let data = datasets::load(spec)?;
            let ds = data.get(spec.split);
            match ds.images.get(spec.index) {
                Some(i) => i.clone(),
                None => bail!("{} split has no sample {}", spec.split.as_str(), spec.index),
            }
        }
    };
    let logits = predict_logits(&model, &image, &ContractOptions::from(&spec.train))?;
    if logits.values.iter().any(|&v| !(v > 0.0)) {
        return Err(
            Error::Numerical("non-positive class score; probabilities undefined".into()).into(),
        );
    }
    let probs = softmax(&logits.log_values());
    for (label, p) in probs.iter().enumerate() {
        println!("{label} {p:.6}");
    }
    println!("prediction: {}", argmax(&logits.values));
    Ok(())
}

pub fn inspect(spec: &RunSpec) -> Result<()> {
    let model = load_model(spec)?;
    let g = model.peps.geometry();
    let (ci, cj) = g.center();
    println!("L: {}", g.side);
    println!("D: {}", g.bond);
    println!("d: {}", g.phys);
    println!("T: {}", g.labels);
    println!("center: ({ci}, {cj})");
    println!("feature: {}", model.feature.as_str());
    println!("peps_parameters: {}", model.peps.param_count());
    if model.feature == FeatureKind::Conv {
        println!(
            "conv_parameters: {}",
            model.conv.as_ref().map_or(0, |c| c.param_count())
        );
    }
    println!("parameters: {}", model.param_count());
    println!("min_entry: {}", model.peps.min_entry());
    println!("max_entry: {}", model.peps.max_entry());
    println!(
        "positivity: {}",
        if model.positivity { "on" } else { "off" }
    );
    Ok(())
}
