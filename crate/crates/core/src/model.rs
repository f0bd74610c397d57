//! Two-layer embedding network, classification head and SGD with momentum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mining::ClassContext;
use crate::numerics::{dot, l2_normalize_rows, Matrix, Rng};

/// Layer widths: input -> hidden -> embedding, plus the number of classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub embed: usize,
    pub classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            input: 32,
            hidden: 64,
            embed: 16,
            classes: 10,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("input_dim", self.input),
            ("hidden_dim", self.hidden),
            ("embed_dim", self.embed),
            ("classes", self.classes),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.hidden * self.input
            + self.hidden
            + self.embed * self.hidden
            + self.embed
            + self.classes * self.embed
    }
}

/// Network weights; `ctx` holds one context vector per class (no bias).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub ctx: ClassContext,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            w1: Matrix::zeros(dims.hidden, dims.input),
            b1: vec![0.0; dims.hidden],
            w2: Matrix::zeros(dims.embed, dims.hidden),
            b2: vec![0.0; dims.embed],
            ctx: ClassContext {
                vectors: Matrix::zeros(dims.classes, dims.embed),
            },
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input: self.w1.cols(),
            hidden: self.w1.rows(),
            embed: self.w2.rows(),
            classes: self.ctx.num_classes(),
        }
    }

    /// Tensors in a fixed order: w1, b1, w2, b2, ctx.
    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            self.w1.as_slice(),
            &self.b1,
            self.w2.as_slice(),
            &self.b2,
            self.ctx.vectors.as_slice(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
            self.ctx.vectors.as_mut_slice(),
        ]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn from_flat(dims: ModelDims, flat: &[f64]) -> Result<Self> {
        if flat.len() != dims.num_params() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                dims.num_params(),
                flat.len()
            )));
        }
        let mut params = Self::zeros(dims);
        let mut offset = 0;
        for t in params.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(params)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Zero-mean uniform weights with half-width `1/sqrt(fan_in)`; zero biases.
pub fn init_params(dims: ModelDims, rng: &mut Rng) -> Result<ModelParams> {
    dims.validate()?;
    let mut params = ModelParams::zeros(dims);
    let fill = |m: &mut Matrix, rng: &mut Rng| {
        let scale = 1.0 / (m.cols() as f64).sqrt();
        m.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = rng.uniform_range(-scale, scale));
    };
    fill(&mut params.w1, rng);
    fill(&mut params.w2, rng);
    fill(&mut params.ctx.vectors, rng);
    Ok(params)
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Matrix,
    pub pre_hidden: Matrix,
    pub hidden: Matrix,
    /// Output before normalization.
    pub raw: Matrix,
    /// Unit-norm embeddings.
    pub embeddings: Matrix,
}

fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.rows());
    for i in 0..x.rows() {
        let xi = x.row(i);
        for (o, slot) in out.row_mut(i).iter_mut().enumerate() {
            *slot = dot(xi, w.row(o)) + b[o];
        }
    }
    out
}

pub fn forward(params: &ModelParams, x: &Matrix) -> Result<ForwardCache> {
    if x.cols() != params.w1.cols() {
        return Err(Error::DimensionMismatch(format!(
            "input width {} does not match model input {}",
            x.cols(),
            params.w1.cols()
        )));
    }
    let pre_hidden = affine(x, &params.w1, &params.b1);
    let mut hidden = pre_hidden.clone();
    hidden
        .as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = v.max(0.0));
    let raw = affine(&hidden, &params.w2, &params.b2);
    let embeddings = l2_normalize_rows(&raw)?;
    Ok(ForwardCache {
        input: x.clone(),
        pre_hidden,
        hidden,
        raw,
        embeddings,
    })
}

/// Pulls a gradient on `f = raw / |raw|` back to `raw`: `(I - f f^T) g / |raw|`.
pub fn normalize_backward(raw: &Matrix, embeddings: &Matrix, grad: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(raw.rows(), raw.cols());
    for i in 0..raw.rows() {
        let f = embeddings.row(i);
        let g = grad.row(i);
        let n = dot(raw.row(i), raw.row(i)).sqrt();
        let proj = dot(f, g);
        for (c, slot) in out.row_mut(i).iter_mut().enumerate() {
            *slot = (g[c] - f[c] * proj) / n;
        }
    }
    out
}

/// Parameter gradients for an upstream gradient on the unit embeddings,
/// an optional extra gradient on the raw outputs, and a context gradient.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    grad_embeddings: &Matrix,
    grad_raw: Option<&Matrix>,
    grad_context: &Matrix,
) -> ModelParams {
    let dims = params.dims();
    let mut grads = ModelParams::zeros(dims);
    let mut g_raw = normalize_backward(&cache.raw, &cache.embeddings, grad_embeddings);
    if let Some(extra) = grad_raw {
        g_raw.add_scaled(extra, 1.0);
    }

    let mut g_hidden = Matrix::zeros(cache.hidden.rows(), dims.hidden);
    for i in 0..g_raw.rows() {
        let gi = g_raw.row(i);
        let hi = cache.hidden.row(i);
        for (o, &g) in gi.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.b2[o] += g;
            let w_row = params.w2.row(o);
            let gw_row = grads.w2.row_mut(o);
            for h in 0..dims.hidden {
                gw_row[h] += g * hi[h];
            }
            let gh = g_hidden.row_mut(i);
            for h in 0..dims.hidden {
                gh[h] += g * w_row[h];
            }
        }
    }
    // Rectifier derivative is 0 at exactly 0.
    for (g, &z) in g_hidden
        .as_mut_slice()
        .iter_mut()
        .zip(cache.pre_hidden.as_slice())
    {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    for i in 0..g_hidden.rows() {
        let xi = cache.input.row(i);
        for (h, &g) in g_hidden.row(i).iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.b1[h] += g;
            for (slot, &x) in grads.w1.row_mut(h).iter_mut().zip(xi) {
                *slot += g * x;
            }
        }
    }
    grads.ctx.vectors = grad_context.clone();
    grads
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: ModelParams,
}

impl OptimizerState {
    pub fn new(lr: f64, momentum: f64, dims: ModelDims) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: ModelParams::zeros(dims),
        })
    }
}

/// `v <- mu v - lr g; p <- p + v` for every tensor.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, state: &mut OptimizerState) {
    let (lr, mu) = (state.lr, state.momentum);
    for ((p, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.velocity.tensors_mut())
    {
        for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = mu * *v - lr * g;
            *p += *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};

    fn dims(input: usize, hidden: usize, embed: usize, classes: usize) -> ModelDims {
        ModelDims {
            input,
            hidden,
            embed,
            classes,
        }
    }

    #[test]
    fn zero_params_are_rejected() {
        let params = ModelParams::zeros(dims(3, 4, 2, 2));
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(
            forward(&params, &x),
            Err(Error::ZeroNormRow { row: 0, .. })
        ));
    }

    #[test]
    fn identity_network_normalizes_input() {
        let n = 3;
        let mut params = ModelParams::zeros(dims(n, n, n, 1));
        for i in 0..n {
            params.w1.set(i, i, 1.0);
            params.w2.set(i, i, 1.0);
        }
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 2.0]]).unwrap();
        let cache = forward(&params, &x).unwrap();
        let expected = [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
        for (a, b) in cache.embeddings.row(0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let params = init_params(dims(4, 5, 3, 2), &mut Rng::new(0)).unwrap();
        let x = Matrix::zeros(2, 3);
        assert!(matches!(
            forward(&params, &x),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let mut rng = Rng::new(8);
        let params = init_params(dims(6, 10, 8, 4), &mut rng).unwrap();
        let x = Matrix::new(20, 6, (0..120).map(|_| rng.normal()).collect()).unwrap();
        let cache = forward(&params, &x).unwrap();
        for i in 0..20 {
            assert!(
                (dot(cache.embeddings.row(i), cache.embeddings.row(i)).sqrt() - 1.0).abs() < 1e-12
            );
        }
        let again = forward(&params, &x).unwrap();
        assert_eq!(again.embeddings, cache.embeddings);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(1);
        let d = dims(4, 6, 3, 2);
        let params = init_params(d, &mut rng).unwrap();
        let x = Matrix::new(5, 4, (0..20).map(|_| rng.normal()).collect()).unwrap();
        let cache = forward(&params, &x).unwrap();
        let g = backward(
            &params,
            &cache,
            &Matrix::zeros(5, 3),
            None,
            &Matrix::zeros(2, 3),
        );
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tangent_gradient_has_no_radial_component() {
        let mut rng = Rng::new(2);
        let raw = Matrix::new(4, 5, (0..20).map(|_| rng.normal()).collect()).unwrap();
        let f = l2_normalize_rows(&raw).unwrap();
        let mut g = Matrix::new(4, 5, (0..20).map(|_| rng.normal()).collect()).unwrap();
        for i in 0..4 {
            let p = dot(g.row(i), f.row(i));
            let fi = f.row(i).to_vec();
            g.row_mut(i)
                .iter_mut()
                .zip(fi)
                .for_each(|(v, fv)| *v -= p * fv);
        }
        let back = normalize_backward(&raw, &f, &g);
        for i in 0..4 {
            assert!(dot(back.row(i), f.row(i)).abs() < 1e-10);
        }
    }

    #[test]
    fn normalization_jacobian_matches_directional_derivatives() {
        let mut rng = Rng::new(3);
        let raw = Matrix::new(1, 6, (0..6).map(|_| rng.normal()).collect()).unwrap();
        let f = l2_normalize_rows(&raw).unwrap();
        let dir: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        // J^T g for each basis g gives J's rows; check J v against finite differences.
        let h = 1e-6;
        let shifted = |s: f64| {
            let data = raw
                .as_slice()
                .iter()
                .zip(&dir)
                .map(|(r, v)| r + s * v)
                .collect();
            l2_normalize_rows(&Matrix::new(1, 6, data).unwrap()).unwrap()
        };
        let (plus, minus) = (shifted(h), shifted(-h));
        for c in 0..6 {
            let mut basis = Matrix::zeros(1, 6);
            basis.set(0, c, 1.0);
            let jt_row = normalize_backward(&raw, &f, &basis);
            let analytic = dot(jt_row.row(0), &dir);
            let numeric = (plus.get(0, c) - minus.get(0, c)) / (2.0 * h);
            assert!((analytic - numeric).abs() < 1e-7, "component {c}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Scalar: sum of u.f_i plus a linear term in the context vectors.
        let mut rng = Rng::new(4);
        let d = dims(6, 10, 8, 4);
        let params = init_params(d, &mut rng).unwrap();
        let x = Matrix::new(12, 6, (0..72).map(|_| rng.normal()).collect()).unwrap();
        let upstream = Matrix::new(12, 8, (0..96).map(|_| rng.normal()).collect()).unwrap();
        let ctx_grad = Matrix::new(4, 8, (0..32).map(|_| rng.normal()).collect()).unwrap();
        let cache = forward(&params, &x).unwrap();
        assert!(cache.pre_hidden.as_slice().iter().all(|z| z.abs() > 1e-4));
        let grads = backward(&params, &cache, &upstream, None, &ctx_grad);

        let flat = Matrix::new(1, d.num_params(), params.to_flat()).unwrap();
        let numeric = finite_diff_grad(
            |p| {
                let params = ModelParams::from_flat(d, p.as_slice()).unwrap();
                let f = forward(&params, &x).unwrap().embeddings;
                dot(f.as_slice(), upstream.as_slice())
                    + dot(params.ctx.vectors.as_slice(), ctx_grad.as_slice())
            },
            &flat,
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(&grads.to_flat(), numeric.as_slice(), 1e-3);
        assert!(err <= 1e-6, "max relative error {err:e}");
    }

    #[test]
    fn sgd_examples() {
        let d = dims(1, 1, 1, 1);
        let mut p = ModelParams::zeros(d);
        let mut g = ModelParams::zeros(d);
        g.w1.set(0, 0, 1.0);
        let mut state = OptimizerState::new(0.1, 0.0, d).unwrap();
        sgd_step(&mut p, &g, &mut state);
        assert!((p.w1.get(0, 0) + 0.1).abs() < 1e-15);

        let mut p = ModelParams::zeros(d);
        let mut state = OptimizerState::new(0.1, 0.9, d).unwrap();
        sgd_step(&mut p, &g, &mut state);
        sgd_step(&mut p, &g, &mut state);
        assert!((p.w1.get(0, 0) + 0.29).abs() < 1e-15);
        assert_eq!(p.b1[0], 0.0);

        let before = p.clone();
        let mut state = OptimizerState::new(0.1, 0.9, d).unwrap();
        sgd_step(&mut p, &ModelParams::zeros(d), &mut state);
        assert_eq!(p, before);
    }

    #[test]
    fn optimizer_validation() {
        let d = dims(1, 1, 1, 1);
        assert!(OptimizerState::new(0.0, 0.9, d).is_err());
        assert!(OptimizerState::new(0.1, 1.0, d).is_err());
    }

    #[test]
    fn init_is_deterministic_and_centered() {
        let d = dims(128, 100, 4, 3);
        let a = init_params(d, &mut Rng::new(10)).unwrap();
        let b = init_params(d, &mut Rng::new(10)).unwrap();
        assert_eq!(a, b);
        assert!(a.b1.iter().chain(&a.b2).all(|&v| v == 0.0));

        let w = a.w1.as_slice();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        // Uniform(-s, s) has standard deviation s / sqrt(3).
        let s = 1.0 / (128f64).sqrt();
        let se = s / 3f64.sqrt() / n.sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
        assert!(w.iter().all(|v| v.abs() <= s));

        let tiny = init_params(dims(1, 1, 1, 1), &mut Rng::new(1)).unwrap();
        assert_eq!(tiny.to_flat().len(), 5);
        assert!(tiny.is_finite());
    }

    #[test]
    fn flat_round_trip() {
        let d = dims(3, 4, 2, 5);
        let p = init_params(d, &mut Rng::new(6)).unwrap();
        assert_eq!(ModelParams::from_flat(d, &p.to_flat()).unwrap(), p);
        assert!(ModelParams::from_flat(d, &[0.0; 3]).is_err());
    }
}
