//! Contrastive and weighted contrastive losses with analytic gradients.
//!
//! Pair weights and their normalizing sums are constants during
//! differentiation: gradients flow through the distances only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mining::{self, CaaInput, ClassContext, MiningConfig, Mode, PairSets, PairWeights};
use crate::numerics::{pairwise_distances, DistanceMatrix, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub aux_weight: f64,
    /// Sums of weights below this zero the corresponding term.
    pub eps_denom: f64,
    /// Train the classification branch even when the mode ignores attention.
    pub force_aux: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.2,
            lambda: 0.5,
            aux_weight: 1.0,
            eps_denom: 1e-8,
            force_aux: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config("alpha", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda", "must lie in [0, 1]"));
        }
        if !(self.aux_weight.is_finite() && self.aux_weight >= 0.0) {
            return Err(Error::config("aux_weight", "must be non-negative"));
        }
        if !(self.eps_denom.is_finite() && self.eps_denom > 0.0) {
            return Err(Error::config("eps_denom", "must be positive"));
        }
        Ok(())
    }

    pub fn aux_active(&self, mode: Mode) -> bool {
        mode.uses_caa() || self.force_aux
    }
}

/// Classic per-pair contrastive term: `d^2` for positives, `max(0, alpha - d)^2` otherwise.
pub fn contrastive_loss(d: f64, same_class: bool, alpha: f64) -> f64 {
    if same_class {
        d * d
    } else {
        let h = (alpha - d).max(0.0);
        h * h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WclLoss {
    pub loss_pos: f64,
    pub loss_neg: f64,
    pub loss_total: f64,
}

fn normalizer(weights: &[f64], eps: f64) -> Option<f64> {
    let total: f64 = weights.iter().sum();
    (total >= eps).then_some(total)
}

/// Independently normalized positive and negative terms mixed by `lambda`.
pub fn wcl_forward(
    d: &DistanceMatrix,
    weights: &PairWeights,
    pairs: &PairSets,
    cfg: &LossConfig,
) -> WclLoss {
    let loss_pos = normalizer(&weights.w_pos, cfg.eps_denom).map_or(0.0, |total| {
        let num: f64 = pairs
            .positives
            .iter()
            .zip(&weights.w_pos)
            .map(|(&(i, j), w)| w * contrastive_loss(d.get(i, j), true, cfg.alpha))
            .sum();
        0.5 * num / total
    });
    let loss_neg = normalizer(&weights.w_neg, cfg.eps_denom).map_or(0.0, |total| {
        let num: f64 = pairs
            .negatives
            .iter()
            .zip(&weights.w_neg)
            .map(|(&(i, j), w)| w * contrastive_loss(d.get(i, j), false, cfg.alpha))
            .sum();
        0.5 * num / total
    });
    WclLoss {
        loss_pos,
        loss_neg,
        loss_total: (1.0 - cfg.lambda) * loss_pos + cfg.lambda * loss_neg,
    }
}

fn add_pair_grad(grad: &mut Matrix, f: &Matrix, i: usize, j: usize, coef: f64) {
    for c in 0..f.cols() {
        let diff = coef * (f.get(i, c) - f.get(j, c));
        grad.set(i, c, grad.get(i, c) + diff);
        grad.set(j, c, grad.get(j, c) - diff);
    }
}

/// Gradient of the mixed loss with respect to the unit embeddings `f`.
pub fn wcl_backward(
    f: &Matrix,
    d: &DistanceMatrix,
    weights: &PairWeights,
    pairs: &PairSets,
    cfg: &LossConfig,
) -> Matrix {
    let mut grad = Matrix::zeros(f.rows(), f.cols());
    if let Some(total) = normalizer(&weights.w_pos, cfg.eps_denom) {
        // d/df_i of 0.5 w d^2 = w (f_i - f_j)
        let scale = (1.0 - cfg.lambda) / total;
        for (&(i, j), w) in pairs.positives.iter().zip(&weights.w_pos) {
            add_pair_grad(&mut grad, f, i, j, scale * w);
        }
    }
    if let Some(total) = normalizer(&weights.w_neg, cfg.eps_denom) {
        // d/df_i of 0.5 w h^2 = -w h (f_i - f_j) / d, for h = alpha - d > 0
        let scale = cfg.lambda / total;
        for (&(i, j), w) in pairs.negatives.iter().zip(&weights.w_neg) {
            let dist = d.get(i, j);
            let h = cfg.alpha - dist;
            if h > 0.0 && dist > 0.0 {
                add_pair_grad(&mut grad, f, i, j, -scale * w * h / dist);
            }
        }
    }
    grad
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxLoss {
    pub loss: f64,
    pub grad_features: Matrix,
    pub grad_context: Matrix,
}

/// Mean softmax cross-entropy of the labels under the attention softmax.
pub fn aux_classification_loss(
    f: &Matrix,
    labels: &[usize],
    ctx: &ClassContext,
    sigma_caa: f64,
) -> Result<AuxLoss> {
    mining::check_labels(labels, ctx.num_classes())?;
    let mut probs = mining::class_softmax(f, ctx, sigma_caa)?;
    let m = f.rows();
    let scale = 1.0 / m as f64;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let logits: Vec<f64> = (0..ctx.num_classes())
            .map(|k| crate::numerics::dot(f.row(i), ctx.vectors.row(k)) / sigma_caa)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - logits[y];
        // Reuse the probability matrix as dL/dlogits.
        let row = probs.row_mut(i);
        row[y] -= 1.0;
        row.iter_mut().for_each(|g| *g *= scale);
    }
    let mut grad_features = Matrix::zeros(m, f.cols());
    let mut grad_context = Matrix::zeros(ctx.num_classes(), ctx.dim());
    for i in 0..m {
        for k in 0..ctx.num_classes() {
            let g = probs.get(i, k) / sigma_caa;
            if g == 0.0 {
                continue;
            }
            for c in 0..f.cols() {
                grad_features.set(i, c, grad_features.get(i, c) + g * ctx.vectors.get(k, c));
                grad_context.set(k, c, grad_context.get(k, c) + g * f.get(i, c));
            }
        }
    }
    Ok(AuxLoss {
        loss: (loss * scale).max(0.0),
        grad_features,
        grad_context,
    })
}

/// Network outputs for one batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchState<'a> {
    /// Output before normalization.
    pub raw: &'a Matrix,
    /// Unit-norm embeddings.
    pub embeddings: &'a Matrix,
    pub labels: &'a [usize],
}

impl BatchState<'_> {
    pub fn caa_features(&self, input: CaaInput) -> &Matrix {
        match input {
            CaaInput::Normalized => self.embeddings,
            CaaInput::Raw => self.raw,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss_pos: f64,
    pub loss_neg: f64,
    pub loss_total: f64,
    pub loss_aux: f64,
    /// The optimized scalar: `loss_total + aux_weight * loss_aux` when the branch is active.
    pub objective: f64,
    /// dObjective/d(unit embeddings).
    pub grad_embeddings: Matrix,
    /// dObjective/d(raw outputs) not routed through the normalization;
    /// nonzero only when attention reads raw outputs.
    pub grad_raw: Matrix,
    pub grad_context: Matrix,
}

/// Everything computed for one batch: pairs, weights and the loss report.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub distances: DistanceMatrix,
    pub pairs: PairSets,
    pub weights: PairWeights,
    pub report: LossReport,
}

/// Loss and gradients for fixed pair weights.
#[allow(clippy::too_many_arguments)]
pub fn loss_with_weights(
    batch: BatchState<'_>,
    ctx: &ClassContext,
    pairs: &PairSets,
    weights: &PairWeights,
    distances: &DistanceMatrix,
    mining_cfg: &MiningConfig,
    cfg: &LossConfig,
    aux_active: bool,
) -> Result<LossReport> {
    let wcl = wcl_forward(distances, weights, pairs, cfg);
    let mut grad_embeddings = wcl_backward(batch.embeddings, distances, weights, pairs, cfg);
    let mut grad_raw = Matrix::zeros(batch.raw.rows(), batch.raw.cols());
    let mut grad_context = Matrix::zeros(ctx.num_classes(), ctx.dim());
    let mut loss_aux = 0.0;
    let mut objective = wcl.loss_total;
    if aux_active {
        let features = batch.caa_features(mining_cfg.caa_input);
        let aux = aux_classification_loss(features, batch.labels, ctx, mining_cfg.sigma_caa)?;
        loss_aux = aux.loss;
        objective += cfg.aux_weight * aux.loss;
        let target = match mining_cfg.caa_input {
            CaaInput::Normalized => &mut grad_embeddings,
            CaaInput::Raw => &mut grad_raw,
        };
        target.add_scaled(&aux.grad_features, cfg.aux_weight);
        grad_context.add_scaled(&aux.grad_context, cfg.aux_weight);
    }
    Ok(LossReport {
        loss_pos: wcl.loss_pos,
        loss_neg: wcl.loss_neg,
        loss_total: wcl.loss_total,
        loss_aux,
        objective,
        grad_embeddings,
        grad_raw,
        grad_context,
    })
}

/// Mines the batch online, then computes the loss report for `mode`.
pub fn total_loss(
    batch: BatchState<'_>,
    ctx: &ClassContext,
    mode: Mode,
    mining_cfg: &MiningConfig,
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    let distances = pairwise_distances(batch.embeddings)?;
    let pairs = mining::construct_pairs(batch.labels);
    let weights = mining::mine(
        &distances,
        batch.caa_features(mining_cfg.caa_input),
        batch.labels,
        ctx,
        &pairs,
        mining_cfg,
        mode,
    )?;
    let report = loss_with_weights(
        batch,
        ctx,
        &pairs,
        &weights,
        &distances,
        mining_cfg,
        cfg,
        cfg.aux_active(mode),
    )?;
    Ok(BatchLoss {
        distances,
        pairs,
        weights,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::construct_pairs;
    use crate::numerics::{finite_diff_grad, l2_normalize_rows, max_relative_error, Rng};

    fn weights_for(pairs: &PairSets, w_pos: Vec<f64>, w_neg: Vec<f64>) -> PairWeights {
        let (np, nn) = (pairs.positives.len(), pairs.negatives.len());
        PairWeights {
            s_pos: vec![1.0; np],
            s_neg: vec![1.0; nn],
            a_img: Vec::new(),
            a_pair_pos: vec![1.0; np],
            a_pair_neg: vec![1.0; nn],
            w_pos,
            w_neg,
        }
    }

    #[test]
    fn contrastive_examples() {
        assert!((contrastive_loss(0.5, true, 1.2) - 0.25).abs() < 1e-15);
        assert_eq!(contrastive_loss(1.5, false, 1.2), 0.0);
        assert_eq!(contrastive_loss(0.0, true, 1.2), 0.0);
    }

    #[test]
    fn forward_examples() {
        // Three samples: (0,1) positive at 0.5; (0,2) negative at 0.7; (1,2)
        // negative carries zero weight.
        let pairs = construct_pairs(&[0, 0, 1]);
        let d = DistanceMatrix::from_fn(3, |i, j| match (i, j) {
            (0, 1) => 0.5,
            (0, 2) => 0.7,
            _ => 1.0,
        })
        .unwrap();
        let w = weights_for(&pairs, vec![1.0], vec![0.5, 0.0]);
        let out = wcl_forward(&d, &w, &pairs, &LossConfig::default());
        assert!((out.loss_pos - 0.125).abs() < 1e-15);
        assert!((out.loss_neg - 0.125).abs() < 1e-15);
        assert!((out.loss_total - 0.125).abs() < 1e-15);
    }

    #[test]
    fn degenerate_denominator_is_zero() {
        let pairs = construct_pairs(&[0, 0, 1]);
        let d = DistanceMatrix::from_fn(3, |_, _| 1.5).unwrap();
        let w = weights_for(&pairs, vec![1.0], vec![0.0, 0.0]);
        let cfg = LossConfig::default();
        let out = wcl_forward(&d, &w, &pairs, &cfg);
        assert_eq!(out.loss_neg, 0.0);
        let f = Matrix::zeros(3, 2);
        let g = wcl_backward(&f, &d, &w, &pairs, &LossConfig { lambda: 1.0, ..cfg });
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn positives_at_zero_distance_have_zero_gradient() {
        let f = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let labels = [0, 0, 1, 1];
        let pairs = construct_pairs(&labels);
        let d = pairwise_distances(&f).unwrap();
        let w = weights_for(&pairs, vec![1.0; 2], vec![1.0; 4]);
        let cfg = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        assert_eq!(wcl_backward(&f, &d, &w, &pairs, &cfg).max_abs(), 0.0);
        // Negatives at sqrt(2) > alpha are inactive too.
        let cfg = LossConfig {
            lambda: 1.0,
            ..LossConfig::default()
        };
        assert_eq!(wcl_backward(&f, &d, &w, &pairs, &cfg).max_abs(), 0.0);
    }

    fn random_unit(rng: &mut Rng, m: usize, dim: usize) -> Matrix {
        let data = (0..m * dim).map(|_| rng.normal()).collect();
        l2_normalize_rows(&Matrix::new(m, dim, data).unwrap()).unwrap()
    }

    #[test]
    fn wcl_gradient_matches_finite_differences() {
        // Embeddings are treated as free coordinates here; the normalization
        // chain is covered by the model tests.
        let mut rng = Rng::new(77);
        let (m, dim) = (12, 8);
        let labels: Vec<usize> = (0..m).map(|i| i / 3).collect();
        let f = random_unit(&mut rng, m, dim);
        let pairs = construct_pairs(&labels);
        let d = pairwise_distances(&f).unwrap();
        let w_pos = (0..pairs.positives.len())
            .map(|_| rng.uniform_range(0.1, 1.0))
            .collect();
        let w_neg = (0..pairs.negatives.len())
            .map(|_| rng.uniform_range(0.1, 1.0))
            .collect();
        let w = weights_for(&pairs, w_pos, w_neg);
        let cfg = LossConfig::default();
        for &(i, j) in &pairs.negatives {
            assert!(
                (d.get(i, j) - cfg.alpha).abs() > 1e-3,
                "instance too close to the hinge"
            );
        }
        let analytic = wcl_backward(&f, &d, &w, &pairs, &cfg);
        let numeric = finite_diff_grad(
            |x| wcl_forward(&pairwise_distances(x).unwrap(), &w, &pairs, &cfg).loss_total,
            &f,
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(analytic.as_slice(), numeric.as_slice(), 1e-3);
        assert!(err <= 1e-6, "max relative error {err:e}");
    }

    #[test]
    fn aux_examples() {
        let f = Matrix::from_rows(&[vec![0.6, 0.8], vec![0.0, 1.0]]).unwrap();
        let one = ClassContext::new(Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
        let aux = aux_classification_loss(&f, &[0, 0], &one, 0.18).unwrap();
        assert_eq!(aux.loss, 0.0);
        assert_eq!(aux.grad_context.max_abs(), 0.0);

        let two = ClassContext::new(Matrix::from_rows(&[vec![0.3, 0.3], vec![0.3, 0.3]]).unwrap())
            .unwrap();
        let aux = aux_classification_loss(&f, &[0, 1], &two, 0.18).unwrap();
        assert!((aux.loss - std::f64::consts::LN_2).abs() < 1e-15);

        let err = aux_classification_loss(&f, &[0, 2], &two, 0.18).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { sample: 1, .. }));
    }

    #[test]
    fn aux_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let (m, classes, dim) = (8, 4, 8);
        let f = random_unit(&mut rng, m, dim);
        let labels: Vec<usize> = (0..m).map(|i| i % classes).collect();
        let ctx_data = (0..classes * dim)
            .map(|_| rng.uniform_range(-0.35, 0.35))
            .collect();
        let ctx = ClassContext::new(Matrix::new(classes, dim, ctx_data).unwrap()).unwrap();
        let aux = aux_classification_loss(&f, &labels, &ctx, 0.18).unwrap();

        let num_f = finite_diff_grad(
            |x| {
                aux_classification_loss(x, &labels, &ctx, 0.18)
                    .unwrap()
                    .loss
            },
            &f,
            1e-5,
        )
        .unwrap();
        let num_c = finite_diff_grad(
            |c| {
                let ctx = ClassContext::new(c.clone()).unwrap();
                aux_classification_loss(&f, &labels, &ctx, 0.18)
                    .unwrap()
                    .loss
            },
            &ctx.vectors,
            1e-5,
        )
        .unwrap();
        let err_f = max_relative_error(aux.grad_features.as_slice(), num_f.as_slice(), 1e-3);
        let err_c = max_relative_error(aux.grad_context.as_slice(), num_c.as_slice(), 1e-3);
        assert!(err_f <= 1e-6 && err_c <= 1e-6, "{err_f:e} {err_c:e}");
    }

    #[test]
    fn baseline_equals_scaled_mean_of_pair_terms() {
        let mut rng = Rng::new(21);
        let f = random_unit(&mut rng, 9, 4);
        let labels: Vec<usize> = (0..9).map(|i| i / 3).collect();
        let ctx = ClassContext::new(
            Matrix::from_rows(&[vec![0.1; 4], vec![0.2; 4], vec![-0.1; 4]]).unwrap(),
        )
        .unwrap();
        let cfg = LossConfig::default();
        let out = total_loss(
            BatchState {
                raw: &f,
                embeddings: &f,
                labels: &labels,
            },
            &ctx,
            Mode::Baseline,
            &MiningConfig::default(),
            &cfg,
        )
        .unwrap();
        let d = &out.distances;
        let pos: Vec<f64> = out
            .pairs
            .positives
            .iter()
            .map(|&(i, j)| contrastive_loss(d.get(i, j), true, 1.2))
            .collect();
        let neg: Vec<f64> = out
            .pairs
            .negatives
            .iter()
            .map(|&(i, j)| contrastive_loss(d.get(i, j), false, 1.2))
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((out.report.loss_pos - 0.5 * mean(&pos)).abs() < 1e-12);
        assert!((out.report.loss_neg - 0.5 * mean(&neg)).abs() < 1e-12);
        // Baseline leaves the classification branch idle.
        assert_eq!(out.report.loss_aux, 0.0);
        assert_eq!(out.report.grad_context.max_abs(), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        for bad in [
            LossConfig {
                lambda: 1.5,
                ..LossConfig::default()
            },
            LossConfig {
                alpha: -1.0,
                ..LossConfig::default()
            },
            LossConfig {
                eps_denom: 0.0,
                ..LossConfig::default()
            },
            LossConfig {
                aux_weight: -0.1,
                ..LossConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
