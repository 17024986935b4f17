//! Central finite differences, and layer-by-layer gradient checks built on them.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Layer, Model};
use crate::nn::softmax_cross_entropy;
use crate::tensor::Tensor;

/// Step used by the checks.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Pass threshold on [`relative_error`].
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
/// Denominator floor in [`relative_error`], so all-zero gradients compare cleanly.
pub const RELATIVE_FLOOR: f64 = 1e-8;

/// `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_difference_grad(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
    let mut probe = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, 1e-8)`
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / norm(analytic).max(norm(numeric)).max(RELATIVE_FLOOR)
}

/// Outcome of checking one layer (or a whole model).
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    /// Relative error of the input gradient.
    pub input_error: f64,
    /// Worst relative error over parameter gradients (0 without parameters).
    pub param_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.input_error.max(self.param_error)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < self.tolerance
    }
}

/// Checks `model` against finite differences of `loss(model.forward_train(x))`.
///
/// `loss` maps the output to a scalar and its gradient. Training-mode batch
/// norm recomputes batch statistics inside every perturbed forward.
pub fn check_with_loss(
    name: &str,
    model: &Model,
    x: &Tensor,
    loss: &dyn Fn(&Tensor) -> Result<(f64, Tensor)>,
) -> Result<GradCheck> {
    let mut working = model.clone();
    let (y, trace) = working.forward_train(x)?;
    let (_, dy) = loss(&y)?;
    let (dx, grads) = working.backward(&trace, &dy)?;

    let eval = |m: &Model, input: &Tensor| -> f64 {
        let mut m = m.clone();
        match m.forward_train(input).and_then(|(y, _)| loss(&y)) {
            Ok((l, _)) => l,
            Err(_) => f64::NAN,
        }
    };

    let numeric_dx = finite_difference_grad(
        |v| eval(model, &Tensor::from_parts(x.shape().to_vec(), v.to_vec())),
        x.data(),
        DEFAULT_STEP,
    );
    let input_error = relative_error(dx.data(), &numeric_dx);

    let flat = model.flat_params();
    let mut param_error = 0.0;
    if !flat.is_empty() {
        let numeric = finite_difference_grad(
            |v| {
                let mut m = model.clone();
                m.set_flat_params(v).expect("same parameter count");
                eval(&m, x)
            },
            &flat,
            DEFAULT_STEP,
        );
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
        param_error = relative_error(&analytic, &numeric);
    }
    let nan_to_inf = |e: f64| if e.is_nan() { f64::INFINITY } else { e };
    Ok(GradCheck {
        name: name.to_string(),
        input_error: nan_to_inf(input_error),
        param_error: nan_to_inf(param_error),
        tolerance: DEFAULT_TOLERANCE,
    })
}

/// Linear probe loss `Σ r·y` with fixed random weights `r`.
pub fn probe_loss(weights: Tensor) -> impl Fn(&Tensor) -> Result<(f64, Tensor)> {
    move |y: &Tensor| {
        y.ensure_same_shape(&weights, "probe loss")?;
        let l = y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok((l, weights.clone()))
    }
}

fn layer_name(layer: &Layer) -> &'static str {
    match layer {
        Layer::Dense(_) => "dense",
        Layer::Conv2d(_) => "conv2d",
        Layer::Relu => "relu",
        Layer::Flatten => "flatten",
        Layer::BatchNorm(_) => "batchnorm-train",
        Layer::GroupNorm(g) if g.groups == 1 => "layernorm",
        Layer::GroupNorm(g) if g.groups == g.channels() => "instancenorm",
        Layer::GroupNorm(_) => "groupnorm",
        Layer::Residual(_) => "residual",
    }
}

/// Inputs whose entries stay at least 0.1 away from zero, so ReLU kinks
/// are never inside the finite-difference stencil.
fn kink_free_input<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Checks every layer of `model` in isolation on an input batch of shape
/// `input_shape`, plus the whole model under softmax cross-entropy.
/// Batch-norm layers are checked in training mode and again frozen.
pub fn check_model<R: Rng + ?Sized>(model: &Model, input_shape: &[usize], rng: &mut R) -> Result<Vec<GradCheck>> {
    let mut reports = Vec::new();
    let mut x = kink_free_input(input_shape, rng);
    let x_model = x.clone();
    for (i, layer) in model.layers.iter().enumerate() {
        let single = Model::new(vec![layer.clone()]);
        let y = single.forward_eval(&x)?;
        let weights = Tensor::uniform(y.shape(), -1.0, 1.0, rng);
        let loss = probe_loss(weights);
        reports.push(check_with_loss(
            &format!("{}[{i}]", layer_name(layer)),
            &single,
            &x,
            &loss,
        )?);
        if let Layer::BatchNorm(bn) = layer {
            let mut frozen = bn.clone();
            if !frozen.is_frozen() {
                let stats = frozen.running.clone();
                frozen.freeze(&stats)?;
            }
            let frozen = Model::new(vec![Layer::BatchNorm(frozen)]);
            reports.push(check_with_loss(&format!("batchnorm-eval[{i}]"), &frozen, &x, &loss)?);
        }
        // Next layer's input: this layer's output, pushed away from zero.
        x = Tensor::from_fn(y.shape(), |k| {
            let v = y.data()[k];
            if v.abs() < 0.1 {
                if v < 0.0 {
                    v - 0.1
                } else {
                    v + 0.1
                }
            } else {
                v
            }
        });
    }
    let logits = model.forward_eval(&x_model)?;
    let classes = logits.dim(1);
    let labels: Vec<usize> = (0..logits.dim(0)).map(|_| rng.random_range(0..classes)).collect();
    let ce = move |y: &Tensor| softmax_cross_entropy(y, &labels).map(|v| (v.loss, v.grad));
    reports.push(check_with_loss("model+cross-entropy", model, &x_model, &ce)?);
    Ok(reports)
}

/// Fails unless every check passed.
pub fn ensure_all_passed(checks: &[GradCheck]) -> Result<()> {
    match checks.iter().find(|c| !c.passed()) {
        None => Ok(()),
        Some(c) => Err(Error::GradCheck(format!(
            "{} failed: relative error {:.3e} >= {:.0e}",
            c.name,
            c.max_error(),
            c.tolerance
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_difference_grad(|v| v[0] * v[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_difference_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadratic_form_matches_analytic() {
        // f(θ) = θᵀAθ with symmetric A has gradient 2Aθ.
        let a = [[2.0, 0.5, -1.0], [0.5, 1.0, 0.25], [-1.0, 0.25, 3.0]];
        let theta = [0.3, -1.2, 0.8];
        let f = |v: &[f64]| {
            (0..3)
                .map(|i| (0..3).map(|j| v[i] * a[i][j] * v[j]).sum::<f64>())
                .sum::<f64>()
        };
        let numeric = finite_difference_grad(f, &theta, 1e-5);
        let analytic: Vec<f64> = (0..3)
            .map(|i| 2.0 * (0..3).map(|j| a[i][j] * theta[j]).sum::<f64>())
            .collect();
        assert!(relative_error(&analytic, &numeric) < 1e-9);
    }
}
