//! Subcommand bodies. Each one checks every input it needs before writing
//! anything.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::Path;

use osmcaa::checkpoint::{self, Checkpoint};
use osmcaa::config::{EvalOn, RunConfig};
use osmcaa::data::{self, write_atomic, Dataset};
use osmcaa::gradcheck::{check_all_modes, GradCheckOptions};
use osmcaa::loss::{total_loss, BatchState};
use osmcaa::mining::weights_to_json;
use osmcaa::model::{forward, ModelDims};
use osmcaa::sampler::{sample_batch, BatchSpec, DatasetIndex};
use osmcaa::trainer::{check_inputs, evaluate_params, train_with, EvalSummary, TrainState};
use osmcaa::{Error, Rng};
use serde_json::json;

use crate::Failure;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Error::io(path, e).into()
}

fn describe(dims: ModelDims) -> String {
    format!(
        "input {}, hidden {}, embed {}, classes {}",
        dims.input, dims.hidden, dims.embed, dims.classes
    )
}

fn require_input_dim(ckpt: &Checkpoint, ds: &Dataset) -> Result<(), Failure> {
    if ckpt.dims().input == ds.dim() {
        return Ok(());
    }
    Err(Error::DimensionMismatch(format!(
        "checkpoint has {}; dataset has {} samples of dimension {}",
        describe(ckpt.dims()),
        ds.len(),
        ds.dim()
    ))
    .into())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

pub fn generate(cfg: &RunConfig) -> Result<(), Failure> {
    let path = match (&cfg.out, &cfg.dataset) {
        (Some(p), _) | (None, Some(p)) => p,
        (None, None) => {
            return Err(Failure::Validation(
                "generate needs --out or --dataset".into(),
            ))
        }
    };
    let ds = data::generate(&cfg.synth)?;
    data::save(&ds, path)?;
    println!("wrote {}", path.display());
    println!("samples   {}", ds.len());
    println!("features  {}", ds.dim());
    println!("classes   {}", ds.num_classes());
    println!("outliers  {}", ds.num_outliers());
    Ok(())
}

fn print_summary(label: &str, eval: &EvalSummary) {
    let recalls: Vec<String> = eval
        .recall_at
        .iter()
        .map(|(k, v)| format!("R@{k} {v:.4}"))
        .collect();
    println!("{label}: {}  mAP {:.4}", recalls.join("  "), eval.map);
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    let ds_path = cfg.require_path("dataset", &cfg.dataset)?;
    let ckpt_path = cfg.require_path("checkpoint", &cfg.checkpoint)?;
    let ds = data::load(ds_path)?;
    let (train_ds, eval_ds) = cfg.partition(&ds)?;
    let train_cfg = cfg.train_config(train_ds.num_classes())?;

    let resume = match &cfg.resume {
        None => None,
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            require_input_dim(&ckpt, &ds)?;
            let expected = train_cfg.model_dims(ds.dim(), train_ds.num_classes());
            if ckpt.dims() != expected {
                return Err(Error::DimensionMismatch(format!(
                    "checkpoint has {}; this run needs {}",
                    describe(ckpt.dims()),
                    describe(expected)
                ))
                .into());
            }
            Some(TrainState {
                epoch: ckpt.epoch,
                params: ckpt.params,
                optimizer: ckpt.optimizer,
            })
        }
    };
    let dims = resume.as_ref().map_or_else(
        || train_cfg.model_dims(ds.dim(), train_ds.num_classes()),
        |s| s.params.dims(),
    );
    check_inputs(&train_ds, &eval_ds, &train_cfg, dims)?;
    let resumed = resume.is_some();

    // A fresh run starts a new log; a resumed run appends to it.
    let mut log = match &cfg.log {
        None => None,
        Some(path) => {
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(resumed)
                .truncate(!resumed)
                .open(path)
                .map_err(|e| io_failure(path, e))?;
            Some((path, BufWriter::new(file)))
        }
    };

    let outcome = train_with(&train_ds, &eval_ds, &train_cfg, resume, |record| {
        if let Some((path, out)) = log.as_mut() {
            let line = serde_json::to_string(record)?;
            writeln!(out, "{line}")
                .and_then(|()| out.flush())
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    })?;

    let ckpt = Checkpoint {
        epoch: outcome.state.epoch,
        params: outcome.state.params.clone(),
        optimizer: outcome.state.optimizer.clone(),
        config_echo: cfg.to_text(),
    };
    checkpoint::save(&ckpt, ckpt_path)?;

    println!(
        "trained {} epochs ({} train classes, {} eval classes), now at epoch {}",
        outcome.records.len(),
        train_ds.num_classes(),
        eval_ds.num_classes(),
        outcome.state.epoch
    );
    if let Some(initial) = &outcome.initial_eval {
        print_summary("initial", initial);
    }
    if let Some(last) = outcome.final_eval() {
        print_summary("final", last);
    }
    if let Some(last) = outcome.records.last() {
        println!("outlier attention gap {:.4}", last.outlier_caa_gap);
    }
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), Failure> {
    let ckpt_path = cfg.require_path("checkpoint", &cfg.checkpoint)?;
    let ds_path = cfg.require_path("dataset", &cfg.dataset)?;
    let ckpt = checkpoint::load(ckpt_path)?;
    let ds = data::load(ds_path)?;
    require_input_dim(&ckpt, &ds)?;
    let eval_ds = cfg.evaluation_set(&ds)?;
    let result = evaluate_params(&ckpt.params, &eval_ds, &cfg.ks)?;

    println!("{:<10} {:>8}", "metric", "value");
    for (k, v) in &result.recall_at {
        println!("{:<10} {:>8.4}", format!("Recall@{k}"), v);
    }
    println!("{:<10} {:>8.4}", "mAP", result.map_score);

    if let Some(out) = &cfg.out {
        let max_k = cfg.ks.iter().copied().max().unwrap_or(1);
        let doc = json!({
            "epoch": ckpt.epoch,
            "samples": eval_ds.len(),
            "classes": eval_ds.num_classes(),
            "recall_at": result.recall_at,
            "map": result.map_score,
            "cmc": result.cmc_curve(max_k),
        });
        write_json(out, &doc)?;
    }
    Ok(())
}

fn stats(values: &[f64]) -> serde_json::Value {
    if values.is_empty() {
        return json!(null);
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    json!({ "min": min, "mean": mean, "max": max })
}

pub fn inspect(cfg: &RunConfig) -> Result<(), Failure> {
    let ckpt_path = cfg.require_path("checkpoint", &cfg.checkpoint)?;
    let ds_path = cfg.require_path("dataset", &cfg.dataset)?;
    let ckpt = checkpoint::load(ckpt_path)?;
    let ds = data::load(ds_path)?;
    require_input_dim(&ckpt, &ds)?;
    // Attention is defined against training labels, so sample from that side.
    let source = match cfg.eval_on {
        EvalOn::Test => cfg.partition(&ds)?.0,
        EvalOn::All => ds,
    };
    let spec = BatchSpec::new(cfg.batch_classes, cfg.batch_per_class)?;
    let index = DatasetIndex::new(&source.labels);
    let batch = sample_batch(&index, spec, &mut Rng::new(cfg.seed).split("inspect"))?;

    let x = source.features.select_rows(&batch.indices);
    let cache = forward(&ckpt.params, &x)?;
    let state = BatchState {
        raw: &cache.raw,
        embeddings: &cache.embeddings,
        labels: &batch.labels,
    };
    let out = total_loss(state, &ckpt.params.ctx, cfg.mode, &cfg.mining, &cfg.loss)?;
    let w = &out.weights;
    let summary = json!({
        "s_pos": stats(&w.s_pos),
        "s_neg": stats(&w.s_neg),
        "a_img": stats(&w.a_img),
        "w_pos": stats(&w.w_pos),
        "w_neg": stats(&w.w_neg),
    });
    let doc = json!({
        "mode": cfg.mode,
        "epoch": ckpt.epoch,
        "indices": batch.indices,
        "labels": batch.labels,
        "weights": weights_to_json(w, &out.pairs),
        "summary": summary,
        "loss_total": out.report.loss_total,
    });

    match &cfg.out {
        Some(path) => {
            write_json(path, &doc)?;
            println!(
                "{} positive pairs, {} negative pairs, mode {}",
                out.pairs.positives.len(),
                out.pairs.negatives.len(),
                cfg.mode
            );
            println!("{:<6} {:>8} {:>8} {:>8}", "score", "min", "mean", "max");
            for key in ["s_pos", "s_neg", "a_img"] {
                let s = &summary[key];
                let cell = |f: &str| s[f].as_f64().map_or("-".to_string(), |v| format!("{v:.4}"));
                println!(
                    "{:<6} {:>8} {:>8} {:>8}",
                    key,
                    cell("min"),
                    cell("mean"),
                    cell("max")
                );
            }
        }
        None => {
            println!(
                "{}",
                serde_json::to_string_pretty(&doc).map_err(Error::from)?
            );
        }
    }
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, instances: usize, corrupt: Option<f64>) -> Result<(), Failure> {
    if instances == 0 {
        return Err(Failure::Validation("--instances must be at least 1".into()));
    }
    let opts = GradCheckOptions {
        instances,
        seed: cfg.seed,
        caa_input: cfg.mining.caa_input,
        corrupt,
        ..GradCheckOptions::default()
    };
    let reports = check_all_modes(&opts)?;
    println!(
        "{} instances per mode, h = {:e}, tolerance = {:e}",
        instances, opts.step, opts.tolerance
    );
    println!("{:<9} {:>14} {:>6}  result", "mode", "max rel err", "worst");
    for r in &reports {
        println!(
            "{:<9} {:>14.3e} {:>6}  {}",
            r.mode.as_str(),
            r.max_relative_error,
            r.worst_instance,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    if let Some(out) = &cfg.out {
        write_json(out, &serde_json::to_value(&reports).map_err(Error::from)?)?;
    }
    if reports.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(Failure::Runtime("gradient check failed".into()))
    }
}
