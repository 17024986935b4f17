//! Dense and convolution layers, ReLU, softmax cross-entropy and SGD with
//! momentum. All passes are written out by hand; nothing here builds a graph.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fully connected layer, `y = x · Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

/// Gradients of a dense layer.
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub dx: Tensor,
    pub dweight: Tensor,
    pub dbias: Tensor,
}

impl DenseLayer {
    /// Weights uniform in `±1/sqrt(in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[outputs, inputs], -bound, bound, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || bias.dim(0) != weight.dim(0) {
            return Err(Error::dim(format!(
                "dense weight {:?} and bias {:?} are inconsistent",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn inputs(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn outputs(&self) -> usize {
        self.weight.dim(0)
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        if x.rank() != 2 || x.dim(1) != self.inputs() {
            return Err(Error::dim(format!(
                "dense layer expects [N, {}], got {:?}",
                self.inputs(),
                x.shape()
            )));
        }
        Ok(x.dim(0))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.check_input(x)?;
        let (inp, out) = (self.inputs(), self.outputs());
        let (xd, w, b) = (x.data(), self.weight.data(), self.bias.data());
        let mut y = vec![0.0; n * out];
        for r in 0..n {
            let xr = &xd[r * inp..(r + 1) * inp];
            for o in 0..out {
                let wo = &w[o * inp..(o + 1) * inp];
                let mut acc = 0.0;
                for i in 0..inp {
                    acc += xr[i] * wo[i];
                }
                y[r * out + o] = acc + b[o];
            }
        }
        Ok(Tensor::from_parts(vec![n, out], y))
    }

    /// `dx = dy·W`, `dW = dyᵀ·x`, `db = Σ_rows dy`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<DenseGrads> {
        let n = self.check_input(x)?;
        let (inp, out) = (self.inputs(), self.outputs());
        if dy.shape() != [n, out] {
            return Err(Error::dim(format!(
                "dense dy expected [{n}, {out}], got {:?}",
                dy.shape()
            )));
        }
        let (xd, w, g) = (x.data(), self.weight.data(), dy.data());
        let mut dx = vec![0.0; n * inp];
        let mut dw = vec![0.0; out * inp];
        let mut db = vec![0.0; out];
        for r in 0..n {
            for o in 0..out {
                let go = g[r * out + o];
                db[o] += go;
                for i in 0..inp {
                    dx[r * inp + i] += go * w[o * inp + i];
                    dw[o * inp + i] += go * xd[r * inp + i];
                }
            }
        }
        Ok(DenseGrads {
            dx: Tensor::from_parts(vec![n, inp], dx),
            dweight: Tensor::from_parts(vec![out, inp], dw),
            dbias: Tensor::from_parts(vec![out], db),
        })
    }
}

/// 2-D cross-correlation over `[N, C, H, W]` inputs with zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer {
    /// `[outC, inC, kH, kW]`
    pub kernel: Tensor,
    /// `[outC]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub dx: Tensor,
    pub dkernel: Tensor,
    pub dbias: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

/// Output extent of a convolution along one axis, if valid.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = padding.checked_mul(2)?.checked_add(input)?;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl Conv2dLayer {
    /// Kernel uniform in `±1/sqrt(inC·kH·kW)`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel_size * kernel_size) as f64;
        let bound = 1.0 / fan_in.sqrt();
        Self {
            kernel: Tensor::uniform(
                &[out_channels, in_channels, kernel_size, kernel_size],
                -bound,
                bound,
                rng,
            ),
            bias: Tensor::zeros(&[out_channels]),
            stride,
            padding,
        }
    }

    pub fn from_parts(kernel: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        if kernel.rank() != 4 || bias.rank() != 1 || bias.dim(0) != kernel.dim(0) || stride == 0 {
            return Err(Error::dim(format!(
                "conv kernel {:?}, bias {:?}, stride {stride} are inconsistent",
                kernel.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            kernel,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.dim(1)
    }

    /// Output shape for an input of shape `[N, C, H, W]`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let g = self.geometry(input)?;
        Ok(vec![g.n, g.o, g.oh, g.ow])
    }

    fn geometry(&self, shape: &[usize]) -> Result<ConvGeometry> {
        if shape.len() != 4 || shape[1] != self.in_channels() {
            return Err(Error::dim(format!(
                "conv expects [N, {}, H, W], got {shape:?}",
                self.in_channels()
            )));
        }
        let (kh, kw) = (self.kernel.dim(2), self.kernel.dim(3));
        let oh = conv_output_extent(shape[2], kh, self.stride, self.padding);
        let ow = conv_output_extent(shape[3], kw, self.stride, self.padding);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(ConvGeometry {
                n: shape[0],
                c: shape[1],
                h: shape[2],
                w: shape[3],
                o: self.out_channels(),
                kh,
                kw,
                oh,
                ow,
            }),
            _ => Err(Error::dim(format!(
                "invalid conv geometry: input {shape:?}, kernel {kh}x{kw}, stride {}, padding {}",
                self.stride, self.padding
            ))),
        }
    }

    /// Input coordinate for output position `out` and kernel tap `k`, or
    /// `None` when it lands in the zero padding.
    #[inline]
    fn source(&self, out: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.geometry(x.shape())?;
        let (xd, kd, bd) = (x.data(), self.kernel.data(), self.bias.data());
        let mut y = vec![0.0; g.n * g.o * g.oh * g.ow];
        for n in 0..g.n {
            for o in 0..g.o {
                for i in 0..g.oh {
                    for j in 0..g.ow {
                        let mut acc = 0.0;
                        for c in 0..g.c {
                            for p in 0..g.kh {
                                let Some(r) = self.source(i, p, g.h) else { continue };
                                for q in 0..g.kw {
                                    let Some(s) = self.source(j, q, g.w) else { continue };
                                    acc += kd[((o * g.c + c) * g.kh + p) * g.kw + q]
                                        * xd[((n * g.c + c) * g.h + r) * g.w + s];
                                }
                            }
                        }
                        y[((n * g.o + o) * g.oh + i) * g.ow + j] = acc + bd[o];
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![g.n, g.o, g.oh, g.ow], y))
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<ConvGrads> {
        let g = self.geometry(x.shape())?;
        if dy.shape() != [g.n, g.o, g.oh, g.ow] {
            return Err(Error::dim(format!(
                "conv dy expected {:?}, got {:?}",
                [g.n, g.o, g.oh, g.ow],
                dy.shape()
            )));
        }
        let (xd, kd, gd) = (x.data(), self.kernel.data(), dy.data());
        let mut dx = vec![0.0; xd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut db = vec![0.0; g.o];
        for n in 0..g.n {
            for o in 0..g.o {
                for i in 0..g.oh {
                    for j in 0..g.ow {
                        let go = gd[((n * g.o + o) * g.oh + i) * g.ow + j];
                        db[o] += go;
                        for c in 0..g.c {
                            for p in 0..g.kh {
                                let Some(r) = self.source(i, p, g.h) else { continue };
                                for q in 0..g.kw {
                                    let Some(s) = self.source(j, q, g.w) else { continue };
                                    let ki = ((o * g.c + c) * g.kh + p) * g.kw + q;
                                    let xi = ((n * g.c + c) * g.h + r) * g.w + s;
                                    dk[ki] += go * xd[xi];
                                    dx[xi] += go * kd[ki];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(ConvGrads {
            dx: Tensor::from_parts(x.shape().to_vec(), dx),
            dkernel: Tensor::from_parts(self.kernel.shape().to_vec(), dk),
            dbias: Tensor::from_parts(vec![g.o], db),
        })
    }
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes `dy` where `x > 0`; the subgradient at exactly zero is 0.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x.ensure_same_shape(dy, "relu backward")?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Scalar loss with its gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub loss: f64,
    pub grad: Tensor,
}

/// Mean negative log-softmax of the true class over the batch.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<LossValue> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() {
        return Err(Error::dim(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (n, k) = (logits.dim(0), logits.dim(1));
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let z = logits.data();
    let mut grad = vec![0.0; n * k];
    let mut total = 0.0;
    for r in 0..n {
        let row = &z[r * k..(r + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_norm = max + sum_exp.ln();
        total += log_norm - row[labels[r]];
        for c in 0..k {
            let p = (row[c] - log_norm).exp();
            let onehot = if c == labels[r] { 1.0 } else { 0.0 };
            grad[r * k + c] = (p - onehot) / n as f64;
        }
    }
    Ok(LossValue {
        loss: total / n as f64,
        grad: Tensor::from_parts(vec![n, k], grad),
    })
}

/// One velocity tensor per learnable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumBuffer {
    pub velocity: Vec<Tensor>,
}

impl MomentumBuffer {
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self {
            velocity: params.into_iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn reset(&mut self) {
        self.velocity.iter_mut().for_each(|v| v.fill(0.0));
    }

    pub fn is_zero(&self) -> bool {
        self.velocity.iter().all(|v| v.data().iter().all(|&x| x == 0.0))
    }

    pub fn element_count(&self) -> usize {
        self.velocity.iter().map(Tensor::len).sum()
    }
}

/// Heavy-ball update of a single tensor:
/// `v ← m·v + (g + wd·θ)`, `θ ← θ − lr·v`.
pub fn sgd_update(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum_coef: f64,
    weight_decay: f64,
) -> Result<()> {
    param.ensure_same_shape(grad, "sgd gradient")?;
    param.ensure_same_shape(velocity, "sgd velocity")?;
    let (theta, v) = (param.data_mut(), velocity.data_mut());
    for ((t, vi), &g) in theta.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
        *vi = momentum_coef * *vi + (g + weight_decay * *t);
        *t -= lr * *vi;
    }
    Ok(())
}

/// Applies [`sgd_update`] to every parameter.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    momentum: &mut MomentumBuffer,
    lr: f64,
    momentum_coef: f64,
    weight_decay: f64,
) -> Result<()> {
    if lr < 0.0 || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "learning rate {lr} must be non-negative"
        )));
    }
    if params.len() != grads.len() || params.len() != momentum.velocity.len() {
        return Err(Error::dim(format!(
            "sgd: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            momentum.velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(momentum.velocity.iter_mut()) {
        sgd_update(p, g, v, lr, momentum_coef, weight_decay)?;
    }
    Ok(())
}
