//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. Command-line flags are applied on top with [`RunConfig::set`].

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::{split, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::DEFAULT_KS;
use crate::loss::LossConfig;
use crate::mining::{MiningConfig, Mode};
use crate::model::ModelDims;
use crate::numerics::Rng;
use crate::sampler::BatchSpec;
use crate::trainer::TrainConfig;

/// How `train` partitions a dataset file into train and evaluation classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitOrder {
    /// Lowest class ids train.
    Ordered,
    /// Seeded shuffle of class ids.
    Shuffled,
}

/// Which samples `evaluate` and `inspect` draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalOn {
    /// The held-out side of the train/test partition.
    Test,
    /// Every sample in the file.
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub mode: Mode,
    pub epochs: usize,
    pub batch_classes: usize,
    pub batch_per_class: usize,
    pub lr: f64,
    pub momentum: f64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub mining: MiningConfig,
    pub loss: LossConfig,
    pub eval_every: usize,
    pub train_fraction: f64,
    pub split: SplitOrder,
    pub eval_on: EvalOn,
    pub ks: Vec<usize>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub dump_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            mode: train.mode,
            epochs: train.epochs,
            batch_classes: train.batch.classes,
            batch_per_class: train.batch.per_class,
            lr: train.lr,
            momentum: train.momentum,
            hidden_dim: train.hidden_dim,
            embed_dim: train.embed_dim,
            mining: train.mining,
            loss: train.loss,
            eval_every: train.eval_every,
            train_fraction: 0.5,
            split: SplitOrder::Ordered,
            eval_on: EvalOn::Test,
            ks: DEFAULT_KS.to_vec(),
            dataset: None,
            checkpoint: None,
            resume: None,
            out: None,
            log: None,
            dump_dir: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(
            key,
            format!("expected a boolean, got `{value}`"),
        )),
    }
}

/// Parses a comma-separated list of positive K values.
pub fn parse_ks(value: &str) -> Result<Vec<usize>> {
    let ks: Vec<usize> = value
        .split(',')
        .map(|s| num::<usize>("ks", s.trim()))
        .collect::<Result<_>>()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::config("ks", "need positive K values"));
    }
    Ok(ks)
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "n_classes",
        "per_class",
        "dim",
        "cluster_spread",
        "manifold_elongation",
        "manifold_rank",
        "mean_rank",
        "outlier_rate",
        "mode",
        "epochs",
        "batch_classes",
        "batch_per_class",
        "lr",
        "momentum",
        "hidden_dim",
        "embed_dim",
        "sigma_osm",
        "sigma_caa",
        "alpha",
        "lambda",
        "aux_weight",
        "eps_denom",
        "force_aux",
        "caa_input",
        "eval_every",
        "train_fraction",
        "split",
        "eval_on",
        "ks",
        "dataset",
        "checkpoint",
        "resume",
        "out",
        "log",
        "dump_dir",
    ];

    /// Assigns one key. Values are validated for syntax here and for range in
    /// [`RunConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "seed" => {
                self.seed = num(key, value)?;
                self.synth.seed = self.seed;
            }
            "n_classes" => self.synth.n_classes = num(key, value)?,
            "per_class" => self.synth.per_class = num(key, value)?,
            "dim" => self.synth.dim = num(key, value)?,
            "cluster_spread" => self.synth.cluster_spread = num(key, value)?,
            "manifold_elongation" => self.synth.manifold_elongation = num(key, value)?,
            "manifold_rank" => self.synth.manifold_rank = num(key, value)?,
            "mean_rank" => self.synth.mean_rank = num(key, value)?,
            "outlier_rate" => self.synth.outlier_rate = num(key, value)?,
            "mode" => self.mode = value.parse()?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_classes" => self.batch_classes = num(key, value)?,
            "batch_per_class" => self.batch_per_class = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "sigma_osm" => self.mining.sigma_osm = num(key, value)?,
            "sigma_caa" => self.mining.sigma_caa = num(key, value)?,
            "alpha" => {
                let alpha: f64 = num(key, value)?;
                self.mining.alpha = alpha;
                self.loss.alpha = alpha;
            }
            "lambda" => self.loss.lambda = num(key, value)?,
            "aux_weight" => self.loss.aux_weight = num(key, value)?,
            "eps_denom" => self.loss.eps_denom = num(key, value)?,
            "force_aux" => self.loss.force_aux = flag(key, value)?,
            "caa_input" => self.mining.caa_input = value.parse()?,
            "eval_every" => self.eval_every = num(key, value)?,
            "train_fraction" => self.train_fraction = num(key, value)?,
            "split" => {
                self.split = match value {
                    "ordered" => SplitOrder::Ordered,
                    "shuffled" => SplitOrder::Shuffled,
                    _ => return Err(Error::config(key, "expected ordered or shuffled")),
                }
            }
            "eval_on" => {
                self.eval_on = match value {
                    "test" => EvalOn::Test,
                    "all" => EvalOn::All,
                    _ => return Err(Error::config(key, "expected test or all")),
                }
            }
            "ks" => self.ks = parse_ks(value)?,
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "resume" => self.resume = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "log" => self.log = Some(PathBuf::from(value)),
            "dump_dir" => self.dump_dir = Some(PathBuf::from(value)),
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Applies every assignment in a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::FormatError {
                line: idx + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train_config(self.synth.n_classes.max(2)).map(|_| ())?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Training settings for a dataset with `classes` training classes.
    pub fn train_config(&self, classes: usize) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch: BatchSpec::new(self.batch_classes, self.batch_per_class)?,
            mode: self.mode,
            loss: self.loss,
            mining: self.mining,
            lr: self.lr,
            momentum: self.momentum,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            eval_every: self.eval_every,
            ks: self.ks.clone(),
            seed: self.seed,
            dump_dir: self.dump_dir.clone(),
        };
        cfg.validate()?;
        ModelDims {
            input: self.synth.dim,
            hidden: self.hidden_dim,
            embed: self.embed_dim,
            classes,
        }
        .validate()?;
        Ok(cfg)
    }

    /// Every key with its current value, one per line; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("n_classes", self.synth.n_classes.to_string());
        put("per_class", self.synth.per_class.to_string());
        put("dim", self.synth.dim.to_string());
        put("cluster_spread", format!("{:?}", self.synth.cluster_spread));
        put(
            "manifold_elongation",
            format!("{:?}", self.synth.manifold_elongation),
        );
        put("manifold_rank", self.synth.manifold_rank.to_string());
        put("mean_rank", self.synth.mean_rank.to_string());
        put("outlier_rate", format!("{:?}", self.synth.outlier_rate));
        put("mode", self.mode.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_classes", self.batch_classes.to_string());
        put("batch_per_class", self.batch_per_class.to_string());
        put("lr", format!("{:?}", self.lr));
        put("momentum", format!("{:?}", self.momentum));
        put("hidden_dim", self.hidden_dim.to_string());
        put("embed_dim", self.embed_dim.to_string());
        put("sigma_osm", format!("{:?}", self.mining.sigma_osm));
        put("sigma_caa", format!("{:?}", self.mining.sigma_caa));
        put("alpha", format!("{:?}", self.loss.alpha));
        put("lambda", format!("{:?}", self.loss.lambda));
        put("aux_weight", format!("{:?}", self.loss.aux_weight));
        put("eps_denom", format!("{:?}", self.loss.eps_denom));
        put("force_aux", self.loss.force_aux.to_string());
        put("caa_input", self.mining.caa_input.to_string());
        put("eval_every", self.eval_every.to_string());
        put("train_fraction", format!("{:?}", self.train_fraction));
        put(
            "split",
            match self.split {
                SplitOrder::Ordered => "ordered".into(),
                SplitOrder::Shuffled => "shuffled".into(),
            },
        );
        put(
            "eval_on",
            match self.eval_on {
                EvalOn::Test => "test".into(),
                EvalOn::All => "all".into(),
            },
        );
        put(
            "ks",
            self.ks
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        let paths = [
            ("dataset", &self.dataset),
            ("checkpoint", &self.checkpoint),
            ("resume", &self.resume),
            ("out", &self.out),
            ("log", &self.log),
            ("dump_dir", &self.dump_dir),
        ];
        for (k, p) in paths {
            if let Some(p) = p {
                put(k, p.display().to_string());
            }
        }
        out
    }

    /// Class-disjoint train/test partition of a dataset file, as `train` sees it.
    pub fn partition(&self, ds: &Dataset) -> Result<(Dataset, Dataset)> {
        match self.split {
            SplitOrder::Ordered => split(ds, self.train_fraction, None),
            SplitOrder::Shuffled => {
                let mut rng = Rng::new(self.seed).split("split");
                split(ds, self.train_fraction, Some(&mut rng))
            }
        }
    }

    /// The samples `evaluate` runs on.
    pub fn evaluation_set(&self, ds: &Dataset) -> Result<Dataset> {
        match self.eval_on {
            EvalOn::Test => Ok(self.partition(ds)?.1),
            EvalOn::All => Ok(ds.clone()),
        }
    }

    /// The path for `key`, or a validation error naming it.
    pub fn require_path<'a>(&self, key: &str, value: &'a Option<PathBuf>) -> Result<&'a PathBuf> {
        value
            .as_ref()
            .ok_or_else(|| Error::config(key, "required by this command"))
    }
}
