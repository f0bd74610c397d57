//! Synthetic clustered datasets with label-noise outliers, and their text format.
//!
//! File layout:
//!
//! ```text
//! osmcaa-dataset v1 <N> <D_in>
//! <label>,<clean_label>,<feature_0>,...,<feature_{D_in-1}>
//! ```
//!
//! Features are written with Rust's shortest round-trip float formatting, so
//! a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix, Rng};

pub const HEADER_TAG: &str = "osmcaa-dataset";
pub const FORMAT_VERSION: &str = "v1";

/// Minimum angle between class means, in degrees.
pub const MIN_MEAN_SEPARATION_DEG: f64 = 15.0;
const MAX_MEAN_ATTEMPTS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Isotropic noise standard deviation.
    pub cluster_spread: f64,
    /// Standard deviation multiplier along one random direction per class.
    pub manifold_elongation: f64,
    /// Rank of a subspace shared by all classes from which each elongation
    /// direction is drawn. 0 draws directions from the whole space.
    pub manifold_rank: usize,
    /// Rank of a subspace, orthogonal to the manifold one, holding all class
    /// means. 0 places means anywhere on the unit sphere.
    pub mean_rank: usize,
    /// Fraction of samples relabeled to a wrong class.
    pub outlier_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 20,
            per_class: 200,
            dim: 32,
            cluster_spread: 0.25,
            manifold_elongation: 4.0,
            manifold_rank: 2,
            mean_rank: 8,
            outlier_rate: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("n_classes", "need at least 2 classes"));
        }
        if self.per_class < 2 {
            return Err(Error::config(
                "per_class",
                "need at least 2 samples per class",
            ));
        }
        if self.dim < 2 {
            return Err(Error::config("dim", "need at least 2 dimensions"));
        }
        if !(self.cluster_spread.is_finite() && self.cluster_spread >= 0.0) {
            return Err(Error::config("cluster_spread", "must be non-negative"));
        }
        if !(self.manifold_elongation.is_finite() && self.manifold_elongation >= 1.0) {
            return Err(Error::config("manifold_elongation", "must be at least 1"));
        }
        if self.mean_rank == 1 {
            return Err(Error::config("mean_rank", "must be 0 or at least 2"));
        }
        if self.mean_rank.saturating_add(self.manifold_rank) > self.dim {
            return Err(Error::config(
                "manifold_rank",
                "mean_rank + manifold_rank must not exceed dim",
            ));
        }
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return Err(Error::config("outlier_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    /// Observed (possibly corrupted) labels.
    pub labels: Vec<usize>,
    /// Labels before corruption.
    pub clean_labels: Vec<usize>,
    pub outlier_mask: Vec<bool>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, clean_labels: Vec<usize>) -> Result<Self> {
        if labels.len() != features.rows() || clean_labels.len() != features.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows, {} labels, {} clean labels",
                features.rows(),
                labels.len(),
                clean_labels.len()
            )));
        }
        let outlier_mask = labels
            .iter()
            .zip(&clean_labels)
            .map(|(a, b)| a != b)
            .collect();
        Ok(Self {
            features,
            labels,
            clean_labels,
            outlier_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// One more than the largest label id seen in either label array.
    pub fn num_classes(&self) -> usize {
        self.labels
            .iter()
            .chain(&self.clean_labels)
            .max()
            .map_or(0, |&y| y.saturating_add(1))
    }

    pub fn num_outliers(&self) -> usize {
        self.outlier_mask.iter().filter(|&&o| o).count()
    }

    /// Rows in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            clean_labels: indices.iter().map(|&i| self.clean_labels[i]).collect(),
            outlier_mask: indices.iter().map(|&i| self.outlier_mask[i]).collect(),
        }
    }
}

fn random_unit(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random unit vector in the span of an orthonormal `basis`, or in the
/// whole space when the basis is empty.
fn random_unit_in(basis: &[Vec<f64>], dim: usize, rng: &mut Rng) -> Vec<f64> {
    if basis.is_empty() {
        return random_unit(dim, rng);
    }
    let coef = random_unit(basis.len(), rng);
    let mut v = vec![0.0; dim];
    for (b, c) in basis.iter().zip(&coef) {
        v.iter_mut().zip(b).for_each(|(v, b)| *v += c * b);
    }
    v
}

fn class_means(n: usize, dim: usize, basis: &[Vec<f64>], rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let max_cos = MIN_MEAN_SEPARATION_DEG.to_radians().cos();
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut attempts = 0;
    while means.len() < n {
        attempts += 1;
        if attempts > MAX_MEAN_ATTEMPTS {
            return Err(Error::MeanSeparationFailure {
                attempts: MAX_MEAN_ATTEMPTS,
            });
        }
        let candidate = random_unit_in(basis, dim, rng);
        if means.iter().all(|m| dot(m, &candidate) < max_cos) {
            means.push(candidate);
        }
    }
    Ok(means)
}

/// Orthonormal basis of a random `rank`-dimensional subspace by Gram-Schmidt.
fn random_basis(rank: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(v, b)| *v -= p * b);
        }
        let n = norm(&v);
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Relabels exactly `round(rate * N)` distinct samples to a uniformly random
/// other class among `num_classes`.
pub fn inject_outliers(
    ds: &mut Dataset,
    num_classes: usize,
    rate: f64,
    rng: &mut Rng,
) -> Result<usize> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config("outlier_rate", "must lie in [0, 1)"));
    }
    let count = (rate * ds.len() as f64).round() as usize;
    if count > 0 && num_classes < 2 {
        return Err(Error::InsufficientClasses {
            needed: 2,
            found: num_classes,
        });
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    rng.shuffle(&mut order);
    for &i in order.iter().take(count) {
        let clean = ds.clean_labels[i];
        let mut wrong = rng.below(num_classes - 1);
        if wrong >= clean {
            wrong += 1;
        }
        ds.labels[i] = wrong;
        ds.outlier_mask[i] = true;
    }
    Ok(count)
}

/// Gaussian clusters around well-separated unit-sphere means, each stretched
/// along its own random direction, followed by label corruption.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    // Mean and manifold subspaces come from one basis, so they are orthogonal.
    let mut basis = random_basis(
        cfg.mean_rank + cfg.manifold_rank,
        cfg.dim,
        &mut root.split("subspaces"),
    );
    let manifold_basis = basis.split_off(cfg.mean_rank);
    let means = class_means(cfg.n_classes, cfg.dim, &basis, &mut root.split("means"))?;
    let mut rng = root.split("samples");
    let stretch = cfg.cluster_spread * (cfg.manifold_elongation.powi(2) - 1.0).sqrt();

    let n = cfg.n_classes * cfg.per_class;
    let mut data = Vec::with_capacity(n * cfg.dim);
    let mut labels = Vec::with_capacity(n);
    for (class, mean) in means.iter().enumerate() {
        let axis = random_unit_in(&manifold_basis, cfg.dim, &mut rng);
        for _ in 0..cfg.per_class {
            let along = stretch * rng.normal();
            for (c, m) in mean.iter().enumerate() {
                data.push(m + cfg.cluster_spread * rng.normal() + along * axis[c]);
            }
            labels.push(class);
        }
    }
    let features = Matrix::new(n, cfg.dim, data)?;
    let mut ds = Dataset::new(features, labels.clone(), labels)?;
    inject_outliers(
        &mut ds,
        cfg.n_classes,
        cfg.outlier_rate,
        &mut root.split("outliers"),
    )?;
    Ok(ds)
}

pub fn to_text(ds: &Dataset) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{HEADER_TAG} {FORMAT_VERSION} {} {}",
        ds.len(),
        ds.dim()
    );
    for i in 0..ds.len() {
        let _ = write!(out, "{},{}", ds.labels[i], ds.clean_labels[i]);
        for v in ds.features.row(i) {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

fn format_err(line: usize, message: impl Into<String>) -> Error {
    Error::FormatError {
        line,
        message: message.into(),
    }
}

/// Parses the dataset text format. Line numbers in errors are 1-based.
pub fn parse(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let header = match lines.next() {
        Some((_, h)) if !h.trim().is_empty() => h,
        _ => return Err(format_err(1, "missing header")),
    };
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != HEADER_TAG {
        return Err(format_err(
            1,
            format!("expected `{HEADER_TAG} {FORMAT_VERSION} <N> <D_in>`"),
        ));
    }
    if fields[1] != FORMAT_VERSION {
        return Err(format_err(
            1,
            format!("unsupported version `{}`", fields[1]),
        ));
    }
    let n: usize = fields[2]
        .parse()
        .map_err(|_| format_err(1, "invalid sample count"))?;
    let dim: usize = fields[3]
        .parse()
        .map_err(|_| format_err(1, "invalid dimension"))?;
    if n == 0 || dim == 0 {
        return Err(format_err(1, "sample count and dimension must be positive"));
    }

    let mut labels = Vec::new();
    let mut clean = Vec::new();
    let mut data = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if labels.len() == n {
            return Err(format_err(
                lineno,
                format!("more than the declared {n} rows"),
            ));
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len().checked_sub(2) != Some(dim) {
            return Err(Error::DimensionMismatch(format!(
                "row {} (line {lineno}) has {} features, expected {dim}",
                labels.len(),
                cells.len().saturating_sub(2)
            )));
        }
        let label = |s: &str, what: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| format_err(lineno, format!("invalid {what} `{s}`")))
        };
        labels.push(label(cells[0], "label")?);
        clean.push(label(cells[1], "clean label")?);
        for cell in &cells[2..] {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| format_err(lineno, format!("invalid feature `{cell}`")))?;
            if !v.is_finite() {
                return Err(format_err(lineno, "non-finite feature"));
            }
            data.push(v);
        }
    }
    if labels.len() != n {
        return Err(format_err(
            text.lines().count().max(1),
            format!("header declares {n} rows, found {}", labels.len()),
        ));
    }
    Dataset::new(Matrix::new(n, dim, data)?, labels, clean)
}

/// Writes `contents` via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, to_text(ds).as_bytes())
}

pub fn load(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

/// Class-disjoint train/test partition.
///
/// Classes are taken by observed label. With `rng` the class order is
/// shuffled; without it the lowest class ids go to training. Labels on each
/// side are re-indexed densely in ascending class order. A sample whose
/// clean class landed on the other side has no valid clean label there and
/// is dropped.
pub fn split(
    ds: &Dataset,
    train_fraction: f64,
    rng: Option<&mut Rng>,
) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config("train_fraction", "must lie in (0, 1)"));
    }
    let mut classes: Vec<usize> = ds
        .labels
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if let Some(rng) = rng {
        rng.shuffle(&mut classes);
    }
    let n_train = (train_fraction * classes.len() as f64).round() as usize;
    if n_train < 2 || classes.len() - n_train < 2 {
        return Err(Error::InsufficientClasses {
            needed: 4,
            found: classes.len(),
        });
    }
    let mut train_classes = classes[..n_train].to_vec();
    let mut test_classes = classes[n_train..].to_vec();
    train_classes.sort_unstable();
    test_classes.sort_unstable();

    let side = |class_ids: &[usize]| -> Dataset {
        let remap: BTreeMap<usize, usize> =
            class_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let keep: Vec<usize> = (0..ds.len())
            .filter(|&i| {
                remap.contains_key(&ds.labels[i]) && remap.contains_key(&ds.clean_labels[i])
            })
            .collect();
        let mut sub = ds.subset(&keep);
        sub.labels.iter_mut().for_each(|y| *y = remap[y]);
        sub.clean_labels.iter_mut().for_each(|y| *y = remap[y]);
        sub
    };
    Ok((side(&train_classes), side(&test_classes)))
}

/// Clean dataset over `n_classes`, split in order into train/test halves by
/// `train_classes`, with label noise injected into the training side only.
pub fn synthetic_task(cfg: &SynthConfig, train_classes: usize) -> Result<(Dataset, Dataset)> {
    let clean_cfg = SynthConfig {
        outlier_rate: 0.0,
        ..cfg.clone()
    };
    let full = generate(&clean_cfg)?;
    let fraction = train_classes as f64 / cfg.n_classes as f64;
    let (mut train, test) = split(&full, fraction, None)?;
    let mut rng = Rng::new(cfg.seed).split("train-outliers");
    inject_outliers(&mut train, train_classes, cfg.outlier_rate, &mut rng)?;
    Ok((train, test))
}
