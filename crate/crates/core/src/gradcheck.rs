//! End-to-end gradient verification against central finite differences.
//!
//! Each instance draws a random network, batch and labels, mines pair
//! weights once at the base point, and compares the analytic gradient of the
//! optimized scalar (with those weights frozen) to central differences over
//! every parameter, context vectors included.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::{loss_with_weights, total_loss, BatchState, LossConfig};
use crate::mining::{CaaInput, MiningConfig, Mode};
use crate::model::{backward, forward, init_params, ModelDims, ModelParams};
use crate::numerics::{
    finite_diff_grad, max_relative_error, norm, pairwise_distances, Matrix, Rng,
};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
/// Denominator floor for relative errors, so entries that are zero up to
/// round-off are judged on absolute error.
pub const RELATIVE_FLOOR: f64 = 1e-3;
/// Instances with a rectifier input or negative-pair hinge this close to
/// its kink are redrawn.
const KINK_MARGIN: f64 = 1e-3;
/// Instances with an output row shorter than this are redrawn. Near zero
/// norm the normalization curves like `1/|raw|^3`, and the central
/// difference truncation error grows past the tolerance.
const NORM_MARGIN: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub caa_input: CaaInput,
    /// Added to the first analytic gradient entry; a negative control.
    pub corrupt: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            instances: 50,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            caa_input: CaaInput::Normalized,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeReport {
    pub mode: Mode,
    pub instances: usize,
    pub max_relative_error: f64,
    pub worst_instance: usize,
    pub step: f64,
    pub tolerance: f64,
    pub passed: bool,
}

struct Instance {
    dims: ModelDims,
    params: ModelParams,
    x: Matrix,
    labels: Vec<usize>,
}

fn draw_instance(rng: &mut Rng, mining: &MiningConfig) -> Result<Instance> {
    loop {
        let m = 6 + rng.below(11);
        let dims = ModelDims {
            input: 4 + rng.below(5),
            hidden: 6 + rng.below(7),
            embed: 4 + rng.below(13),
            classes: 2 + rng.below(3),
        };
        let params = init_params(dims, rng)?;
        let x = Matrix::new(
            m,
            dims.input,
            (0..m * dims.input).map(|_| rng.normal()).collect(),
        )?;
        // Round-robin labels guarantee both positives and negatives.
        let mut labels: Vec<usize> = (0..m).map(|i| i % dims.classes).collect();
        rng.shuffle(&mut labels);

        // A sample whose hidden units are all off has a zero output.
        let cache = match forward(&params, &x) {
            Ok(cache) => cache,
            Err(Error::ZeroNormRow { .. }) => continue,
            Err(e) => return Err(e),
        };
        if cache
            .pre_hidden
            .as_slice()
            .iter()
            .any(|z| z.abs() < KINK_MARGIN)
        {
            continue;
        }
        if (0..m).any(|i| norm(cache.raw.row(i)) < NORM_MARGIN) {
            continue;
        }
        let d = pairwise_distances(&cache.embeddings)?;
        let near_kink = (0..m).any(|i| {
            (i + 1..m).any(|j| {
                labels[i] != labels[j]
                    && ((d.get(i, j) - mining.alpha).abs() < KINK_MARGIN
                        || d.get(i, j) < KINK_MARGIN)
            })
        });
        if near_kink {
            continue;
        }
        return Ok(Instance {
            dims,
            params,
            x,
            labels,
        });
    }
}

/// Maximum relative error between analytic and numeric gradients on one instance.
fn check_instance(
    inst: &Instance,
    mode: Mode,
    mining: &MiningConfig,
    loss_cfg: &LossConfig,
    opts: &GradCheckOptions,
) -> Result<f64> {
    let cache = forward(&inst.params, &inst.x)?;
    let batch = BatchState {
        raw: &cache.raw,
        embeddings: &cache.embeddings,
        labels: &inst.labels,
    };
    let out = total_loss(batch, &inst.params.ctx, mode, mining, loss_cfg)?;
    let grads = backward(
        &inst.params,
        &cache,
        &out.report.grad_embeddings,
        Some(&out.report.grad_raw),
        &out.report.grad_context,
    );
    let mut analytic = grads.to_flat();
    if let Some(delta) = opts.corrupt {
        analytic[0] += delta;
    }

    let aux_active = loss_cfg.aux_active(mode);
    let objective = |flat: &Matrix| -> f64 {
        let Ok(params) = ModelParams::from_flat(inst.dims, flat.as_slice()) else {
            return f64::NAN;
        };
        let Ok(cache) = forward(&params, &inst.x) else {
            return f64::NAN;
        };
        let Ok(d) = pairwise_distances(&cache.embeddings) else {
            return f64::NAN;
        };
        let batch = BatchState {
            raw: &cache.raw,
            embeddings: &cache.embeddings,
            labels: &inst.labels,
        };
        loss_with_weights(
            batch,
            &params.ctx,
            &out.pairs,
            &out.weights,
            &d,
            mining,
            loss_cfg,
            aux_active,
        )
        .map_or(f64::NAN, |r| r.objective)
    };
    let base = Matrix::new(1, inst.dims.num_params(), inst.params.to_flat())?;
    let numeric = finite_diff_grad(objective, &base, opts.step)?;
    Ok(max_relative_error(
        &analytic,
        numeric.as_slice(),
        RELATIVE_FLOOR,
    ))
}

/// Runs `opts.instances` random instances for one mode.
pub fn check_mode(mode: Mode, opts: &GradCheckOptions) -> Result<ModeReport> {
    let mining = MiningConfig {
        caa_input: opts.caa_input,
        ..MiningConfig::default()
    };
    let loss_cfg = LossConfig::default();
    let mut rng = Rng::new(opts.seed).split(mode.as_str());
    let mut worst = (0.0, 0);
    for i in 0..opts.instances {
        let inst = draw_instance(&mut rng, &mining)?;
        let err = check_instance(&inst, mode, &mining, &loss_cfg, opts)?;
        if err > worst.0 {
            worst = (err, i);
        }
    }
    Ok(ModeReport {
        mode,
        instances: opts.instances,
        max_relative_error: worst.0,
        worst_instance: worst.1,
        step: opts.step,
        tolerance: opts.tolerance,
        passed: worst.0 <= opts.tolerance,
    })
}

pub fn check_all_modes(opts: &GradCheckOptions) -> Result<Vec<ModeReport>> {
    Mode::ALL
        .iter()
        .map(|&mode| check_mode(mode, opts))
        .collect()
}
