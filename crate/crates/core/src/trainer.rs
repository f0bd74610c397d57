//! Training loop: sample, embed, mine, weigh, differentiate, step.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, Dataset};
use crate::error::{Error, Result};
use crate::eval::{embed_dataset, evaluate, RetrievalResult, DEFAULT_KS};
use crate::loss::{total_loss, BatchLoss, BatchState, LossConfig};
use crate::mining::{self, CaaInput, MiningConfig, Mode};
use crate::model::{
    backward, forward, init_params, sgd_step, ModelDims, ModelParams, OptimizerState,
};
use crate::numerics::{Matrix, Rng};
use crate::sampler::{epoch_iterator, BatchSpec, DatasetIndex};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: BatchSpec,
    pub mode: Mode,
    pub loss: LossConfig,
    pub mining: MiningConfig,
    pub lr: f64,
    pub momentum: f64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Evaluate every this many epochs (and always after the last one).
    pub eval_every: usize,
    pub ks: Vec<usize>,
    pub seed: u64,
    /// Where a failing batch is dumped on a non-finite loss.
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch: BatchSpec {
                classes: 8,
                per_class: 7,
            },
            mode: Mode::OsmCaa,
            loss: LossConfig::default(),
            mining: MiningConfig::default(),
            lr: 0.001,
            momentum: 0.9,
            hidden_dim: 64,
            embed_dim: 16,
            eval_every: 10,
            ks: DEFAULT_KS.to_vec(),
            seed: 0,
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        BatchSpec::new(self.batch.classes, self.batch.per_class)?;
        self.loss.validate()?;
        self.mining.validate()?;
        if self.loss.alpha != self.mining.alpha {
            return Err(Error::config("alpha", "loss and mining margins differ"));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::config("ks", "need positive K values"));
        }
        OptimizerState::new(self.lr, self.momentum, ModelDims::default())?;
        Ok(())
    }

    pub fn model_dims(&self, input: usize, classes: usize) -> ModelDims {
        ModelDims {
            input,
            hidden: self.hidden_dim,
            embed: self.embed_dim,
            classes,
        }
    }
}

/// Recall@K and mAP without the per-query ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub recall_at: BTreeMap<usize, f64>,
    pub map: f64,
}

impl From<&RetrievalResult> for EvalSummary {
    fn from(r: &RetrievalResult) -> Self {
        Self {
            recall_at: r.recall_at.clone(),
            map: r.map_score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mode: Mode,
    pub batches: usize,
    pub loss_pos: f64,
    pub loss_neg: f64,
    pub loss_total: f64,
    pub loss_aux: f64,
    pub objective: f64,
    /// Mean attention of clean training samples minus that of flagged outliers.
    pub outlier_caa_gap: f64,
    pub eval: Option<EvalSummary>,
}

/// Parameters and optimizer state to continue from.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<EpochRecord>,
    /// Evaluation of the initial parameters; absent on resumed runs.
    pub initial_eval: Option<EvalSummary>,
}

impl TrainOutcome {
    pub fn final_eval(&self) -> Option<&EvalSummary> {
        self.records.iter().rev().find_map(|r| r.eval.as_ref())
    }
}

/// Attention of every sample for its observed label.
pub fn dataset_caa(params: &ModelParams, ds: &Dataset, cfg: &MiningConfig) -> Result<Vec<f64>> {
    let features = match cfg.caa_input {
        CaaInput::Normalized => embed_dataset(params, ds)?,
        CaaInput::Raw => forward(params, &ds.features)?.raw,
    };
    mining::caa_scores(&features, &ds.labels, &params.ctx, cfg)
}

/// Mean attention of clean samples minus mean attention of flagged outliers;
/// 0 when either group is empty.
pub fn audit_caa(params: &ModelParams, ds: &Dataset, cfg: &MiningConfig) -> Result<f64> {
    let a = dataset_caa(params, ds, cfg)?;
    let mean = |outlier: bool| {
        let vals: Vec<f64> = a
            .iter()
            .zip(&ds.outlier_mask)
            .filter(|(_, &o)| o == outlier)
            .map(|(v, _)| *v)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Ok(match (mean(false), mean(true)) {
        (Some(clean), Some(outliers)) => clean - outliers,
        _ => 0.0,
    })
}

/// Evaluates retrieval on a held-out set against its clean labels.
pub fn evaluate_params(
    params: &ModelParams,
    ds: &Dataset,
    ks: &[usize],
) -> Result<RetrievalResult> {
    evaluate(&embed_dataset(params, ds)?, &ds.clean_labels, ks)
}

#[derive(Serialize)]
struct FailureDump<'a> {
    epoch: usize,
    batch: usize,
    indices: &'a [usize],
    labels: &'a [usize],
    distances: Vec<Vec<f64>>,
    weights: serde_json::Value,
    objective: f64,
}

fn dump_failure(
    dir: Option<&PathBuf>,
    epoch: usize,
    batch: usize,
    indices: &[usize],
    labels: &[usize],
    out: &BatchLoss,
) -> Option<PathBuf> {
    let dir = dir?;
    let m = out.distances.len();
    let dump = FailureDump {
        epoch,
        batch,
        indices,
        labels,
        distances: (0..m)
            .map(|i| (0..m).map(|j| out.distances.get(i, j)).collect())
            .collect(),
        weights: mining::weights_to_json(&out.weights, &out.pairs),
        objective: out.report.objective,
    };
    let path = dir.join(format!("nonfinite-epoch{epoch}-batch{batch}.json"));
    let text = serde_json::to_string_pretty(&dump).ok()?;
    write_atomic(&path, text.as_bytes()).ok()?;
    Some(path)
}

fn report_is_finite(out: &BatchLoss) -> bool {
    let r = &out.report;
    [
        r.loss_pos,
        r.loss_neg,
        r.loss_total,
        r.loss_aux,
        r.objective,
    ]
    .iter()
    .all(|v| v.is_finite())
        && r.grad_embeddings.is_finite()
        && r.grad_raw.is_finite()
        && r.grad_context.is_finite()
}

/// Fresh parameters and optimizer for a training set.
pub fn initial_state(ds_train: &Dataset, cfg: &TrainConfig) -> Result<TrainState> {
    let dims = cfg.model_dims(ds_train.dim(), ds_train.num_classes());
    let params = init_params(dims, &mut Rng::new(cfg.seed).split("init"))?;
    Ok(TrainState {
        epoch: 0,
        params,
        optimizer: OptimizerState::new(cfg.lr, cfg.momentum, dims)?,
    })
}

/// Everything [`train`] needs from its inputs, checked up front: feature
/// widths match the model, the context vectors cover the training labels,
/// and there are enough training classes to fill a batch.
pub fn check_inputs(
    ds_train: &Dataset,
    ds_eval: &Dataset,
    cfg: &TrainConfig,
    dims: ModelDims,
) -> Result<()> {
    cfg.validate()?;
    if dims.input != ds_train.dim() || dims.input != ds_eval.dim() {
        return Err(Error::DimensionMismatch(format!(
            "model input {} vs train features {} and eval features {}",
            dims.input,
            ds_train.dim(),
            ds_eval.dim()
        )));
    }
    if ds_train.num_classes() > dims.classes {
        return Err(Error::DimensionMismatch(format!(
            "model has {} context vectors, training labels need {}",
            dims.classes,
            ds_train.num_classes()
        )));
    }
    let classes = DatasetIndex::new(&ds_train.labels).num_classes();
    if classes < cfg.batch.classes {
        return Err(Error::InsufficientClasses {
            needed: cfg.batch.classes,
            found: classes,
        });
    }
    Ok(())
}

/// Runs `cfg.epochs` epochs, continuing from `resume` when given.
///
/// Batches of epoch `e` come from a stream keyed by (seed, e) alone, so all
/// modes see identical batches and a resumed run matches an uninterrupted one.
pub fn train(
    ds_train: &Dataset,
    ds_eval: &Dataset,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    train_with(ds_train, ds_eval, cfg, resume, |_| Ok(()))
}

/// [`train`] with a callback run on each record as soon as its epoch ends.
pub fn train_with(
    ds_train: &Dataset,
    ds_eval: &Dataset,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let resumed = resume.is_some();
    let mut state = match resume {
        Some(s) => s,
        None => initial_state(ds_train, cfg)?,
    };
    check_inputs(ds_train, ds_eval, cfg, state.params.dims())?;
    state.optimizer.lr = cfg.lr;
    state.optimizer.momentum = cfg.momentum;

    let initial_eval = if resumed {
        None
    } else {
        Some(EvalSummary::from(&evaluate_params(
            &state.params,
            ds_eval,
            &cfg.ks,
        )?))
    };

    let index = DatasetIndex::new(&ds_train.labels);
    let root = Rng::new(cfg.seed);
    let mut records = Vec::with_capacity(cfg.epochs);
    let last_epoch = state.epoch + cfg.epochs;
    for epoch in (state.epoch + 1)..=last_epoch {
        let batches = epoch_iterator(&index, cfg.batch, root.split_index("epoch", epoch as u64))?;
        let mut sums = [0.0f64; 5];
        let mut count = 0usize;
        for (b, batch) in batches.enumerate() {
            let x = ds_train.features.select_rows(&batch.indices);
            let cache = forward(&state.params, &x)?;
            let out = total_loss(
                BatchState {
                    raw: &cache.raw,
                    embeddings: &cache.embeddings,
                    labels: &batch.labels,
                },
                &state.params.ctx,
                cfg.mode,
                &cfg.mining,
                &cfg.loss,
            )?;
            if !report_is_finite(&out) {
                let dump = dump_failure(
                    cfg.dump_dir.as_ref(),
                    epoch,
                    b,
                    &batch.indices,
                    &batch.labels,
                    &out,
                );
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    dump,
                });
            }
            let grads = backward(
                &state.params,
                &cache,
                &out.report.grad_embeddings,
                Some(&out.report.grad_raw),
                &out.report.grad_context,
            );
            sgd_step(&mut state.params, &grads, &mut state.optimizer);
            let r = &out.report;
            for (s, v) in sums.iter_mut().zip([
                r.loss_pos,
                r.loss_neg,
                r.loss_total,
                r.loss_aux,
                r.objective,
            ]) {
                *s += v;
            }
            count += 1;
        }
        state.epoch = epoch;
        let mean = |i: usize| sums[i] / count.max(1) as f64;
        let evaluate_now = epoch % cfg.eval_every == 0 || epoch == last_epoch;
        let eval = if evaluate_now {
            Some(EvalSummary::from(&evaluate_params(
                &state.params,
                ds_eval,
                &cfg.ks,
            )?))
        } else {
            None
        };
        records.push(EpochRecord {
            epoch,
            mode: cfg.mode,
            batches: count,
            loss_pos: mean(0),
            loss_neg: mean(1),
            loss_total: mean(2),
            loss_aux: mean(3),
            objective: mean(4),
            outlier_caa_gap: audit_caa(&state.params, ds_train, &cfg.mining)?,
            eval,
        });
        on_epoch(records.last().expect("just pushed"))?;
    }
    Ok(TrainOutcome {
        state,
        records,
        initial_eval,
    })
}

/// Objective of one batch under the current parameters; exposed for descent checks.
pub fn batch_objective(
    params: &ModelParams,
    x: &Matrix,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<BatchLoss> {
    let cache = forward(params, x)?;
    total_loss(
        BatchState {
            raw: &cache.raw,
            embeddings: &cache.embeddings,
            labels,
        },
        &params.ctx,
        cfg.mode,
        &cfg.mining,
        &cfg.loss,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, synthetic_task, SynthConfig};

    fn toy() -> (Dataset, Dataset) {
        let cfg = SynthConfig {
            n_classes: 4,
            per_class: 6,
            dim: 5,
            mean_rank: 0,
            manifold_rank: 0,
            outlier_rate: 0.1,
            ..SynthConfig::default()
        };
        synthetic_task(&cfg, 2).unwrap()
    }

    fn small_cfg(mode: Mode) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch: BatchSpec::new(2, 2).unwrap(),
            mode,
            hidden_dim: 8,
            embed_dim: 4,
            ks: vec![1, 2],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_gives_one_finite_record() {
        let (train_ds, eval_ds) = toy();
        let out = train(&train_ds, &eval_ds, &small_cfg(Mode::OsmCaa), None).unwrap();
        assert_eq!(out.records.len(), 1);
        let r = &out.records[0];
        assert_eq!(r.epoch, 1);
        assert_eq!(r.batches, 3);
        for v in [
            r.loss_pos,
            r.loss_neg,
            r.loss_total,
            r.loss_aux,
            r.objective,
            r.outlier_caa_gap,
        ] {
            assert!(v.is_finite());
        }
        assert!(r.eval.is_some());
        assert!(out.initial_eval.is_some());
    }

    #[test]
    fn same_seed_same_records() {
        let (train_ds, eval_ds) = toy();
        let cfg = TrainConfig {
            epochs: 3,
            eval_every: 2,
            ..small_cfg(Mode::Osm)
        };
        let a = train(&train_ds, &eval_ds, &cfg, None).unwrap();
        let b = train(&train_ds, &eval_ds, &cfg, None).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.state, b.state);
        assert!(a.records[0].eval.is_none());
        assert!(a.records[1].eval.is_some() && a.records[2].eval.is_some());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (train_ds, eval_ds) = toy();
        let two = TrainConfig {
            epochs: 2,
            ..small_cfg(Mode::OsmCaa)
        };
        let full = train(&train_ds, &eval_ds, &two, None).unwrap();
        let first = train(&train_ds, &eval_ds, &small_cfg(Mode::OsmCaa), None).unwrap();
        let second = train(
            &train_ds,
            &eval_ds,
            &small_cfg(Mode::OsmCaa),
            Some(first.state),
        )
        .unwrap();
        assert_eq!(second.records[0].epoch, 2);
        assert_eq!(second.state, full.state);
        assert!(second.initial_eval.is_none());
    }

    #[test]
    fn modes_see_identical_batches() {
        // Batches depend on (seed, epoch) only; with zero learning signal the
        // parameters stay put, so compare the sampled index sequences directly.
        let (train_ds, _) = toy();
        let index = DatasetIndex::new(&train_ds.labels);
        let spec = BatchSpec::new(2, 2).unwrap();
        let root = Rng::new(5);
        let a: Vec<_> = epoch_iterator(&index, spec, root.split_index("epoch", 1))
            .unwrap()
            .collect();
        let b: Vec<_> = epoch_iterator(&index, spec, Rng::new(5).split_index("epoch", 1))
            .unwrap()
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn audit_gap_is_zero_without_outliers() {
        let ds = generate(&SynthConfig {
            n_classes: 3,
            per_class: 5,
            dim: 4,
            mean_rank: 0,
            manifold_rank: 0,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = small_cfg(Mode::OsmCaa);
        let state = initial_state(&ds, &cfg).unwrap();
        assert_eq!(audit_caa(&state.params, &ds, &cfg.mining).unwrap(), 0.0);
    }

    #[test]
    fn audit_gap_near_zero_for_random_params() {
        let ds = generate(&SynthConfig {
            n_classes: 10,
            per_class: 100,
            outlier_rate: 0.2,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig::default();
        let state = initial_state(&ds, &cfg).unwrap();
        let gap = audit_caa(&state.params, &ds, &cfg.mining).unwrap();
        assert!(gap.abs() < 0.1, "gap {gap}");
    }

    #[test]
    fn non_finite_loss_dumps_the_batch() {
        let (train_ds, eval_ds) = toy();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            dump_dir: Some(dir.path().to_path_buf()),
            ..small_cfg(Mode::OsmCaa)
        };
        let mut state = initial_state(&train_ds, &cfg).unwrap();
        // Extreme context vectors overflow the attention logits.
        state.params.ctx.vectors.as_mut_slice()[0] = f64::MAX;
        state.params.ctx.vectors.as_mut_slice()[1] = -f64::MAX;
        match train(&train_ds, &eval_ds, &cfg, Some(state)) {
            Err(Error::NonFiniteLoss {
                dump: Some(path), ..
            }) => {
                let v: serde_json::Value =
                    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
                assert!(v["indices"].as_array().is_some_and(|a| a.len() == 4));
                assert!(v["weights"]["w_pos"].is_array());
            }
            other => panic!("expected NonFiniteLoss with dump, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_config() {
        let (train_ds, eval_ds) = toy();
        let cfg = TrainConfig {
            epochs: 0,
            ..small_cfg(Mode::Baseline)
        };
        assert!(train(&train_ds, &eval_ds, &cfg, None).is_err());
    }
}
