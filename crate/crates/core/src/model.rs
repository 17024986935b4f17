//! Sequential models built from [`Layer`]s, with flat access to learnable
//! parameters and batch-norm running statistics.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_forward, Conv2dLayer, DenseLayer};
use crate::norm::{BnForwardCache, GnCache, GroupNormLayer, NormLayerState, RunningStats};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Conv2d(Conv2dLayer),
    Relu,
    /// `[N, ...] → [N, prod(...)]`
    Flatten,
    BatchNorm(NormLayerState),
    GroupNorm(GroupNormLayer),
    /// `x + f(x)` where `f` is the inner layer sequence.
    Residual(Vec<Layer>),
}

/// Per-layer values kept from a training forward pass.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Dense(Tensor),
    Conv2d(Tensor),
    Relu(Tensor),
    Flatten(Vec<usize>),
    BnTrain(BnForwardCache),
    BnEval(Tensor),
    GroupNorm(GnCache),
    Residual(Vec<LayerCache>),
}

/// Everything a training forward pass leaves behind.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub caches: Vec<LayerCache>,
    /// Statistics each batch-norm layer normalized with, in layer order:
    /// the mini-batch statistics in training mode, the frozen running
    /// statistics in frozen mode.
    pub norm_stats: Vec<RunningStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
}

/// Which learnable a flat parameter slot belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// γ or β of a batch-norm layer.
    BnAffine,
    /// γ or β of a group-norm layer.
    GnAffine,
}

impl Model {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    /// Training forward pass. Batch-norm layers in training mode normalize
    /// with mini-batch statistics and update their running statistics;
    /// frozen layers normalize with their running statistics.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        let mut trace = ForwardTrace {
            caches: Vec::with_capacity(self.layers.len()),
            norm_stats: Vec::new(),
        };
        let y = forward_train_seq(&mut self.layers, x.clone(), &mut trace.caches, &mut trace.norm_stats)?;
        Ok((y, trace))
    }

    /// Backward pass; returns `dx` and one gradient per parameter in
    /// [`params`](Self::params) order.
    pub fn backward(&self, trace: &ForwardTrace, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut grads = Vec::new();
        let dx = backward_seq(&self.layers, &trace.caches, dy.clone(), &mut grads)?;
        grads.reverse();
        Ok((dx, grads))
    }

    /// Inference forward pass; batch norm always uses running statistics.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        forward_eval_seq(&self.layers, x.clone())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        visit_params(&self.layers, &mut |t, _| out.push(t));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        collect_params_mut(&mut self.layers, &mut out);
        out
    }

    /// All learnable scalars concatenated in [`params`](Self::params) order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::dim(format!(
                "{} values for {} parameters",
                values.len(),
                self.parameter_count()
            )));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn param_kinds(&self) -> Vec<ParamKind> {
        let mut out = Vec::new();
        visit_params(&self.layers, &mut |_, k| out.push(k));
        out
    }

    /// Number of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn bn_layers(&self) -> Vec<&NormLayerState> {
        let mut out = Vec::new();
        collect_bn(&self.layers, &mut out);
        out
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut NormLayerState> {
        let mut out = Vec::new();
        collect_bn_mut(&mut self.layers, &mut out);
        out
    }

    pub fn has_batch_norm(&self) -> bool {
        !self.bn_layers().is_empty()
    }

    /// Running statistics of every batch-norm layer, in layer order.
    pub fn running_stats(&self) -> Vec<RunningStats> {
        self.bn_layers().into_iter().map(|l| l.running.clone()).collect()
    }

    /// Number of running-statistic scalars (two per batch-norm channel).
    pub fn stat_count(&self) -> usize {
        self.bn_layers().iter().map(|l| 2 * l.channels()).sum()
    }

    pub fn is_frozen(&self) -> bool {
        let bn = self.bn_layers();
        !bn.is_empty() && bn.iter().all(|l| l.is_frozen())
    }

    /// Checks that two models have the same architecture and tensor shapes.
    pub fn ensure_congruent(&self, other: &Model) -> Result<()> {
        let (a, b) = (self.params(), other.params());
        if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| !x.same_shape(y)) {
            return Err(Error::dim("models have different parameter shapes"));
        }
        let (a, b) = (self.bn_layers(), other.bn_layers());
        if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.channels() != y.channels()) {
            return Err(Error::dim("models have different batch-norm layers"));
        }
        Ok(())
    }
}

fn forward_train_seq(
    layers: &mut [Layer],
    mut x: Tensor,
    caches: &mut Vec<LayerCache>,
    stats: &mut Vec<RunningStats>,
) -> Result<Tensor> {
    for layer in layers.iter_mut() {
        x = match layer {
            Layer::Dense(d) => {
                let y = d.forward(&x)?;
                caches.push(LayerCache::Dense(x));
                y
            }
            Layer::Conv2d(c) => {
                let y = c.forward(&x)?;
                caches.push(LayerCache::Conv2d(x));
                y
            }
            Layer::Relu => {
                let y = relu_forward(&x);
                caches.push(LayerCache::Relu(x));
                y
            }
            Layer::Flatten => {
                let shape = x.shape().to_vec();
                let rest = shape[1..].iter().product();
                caches.push(LayerCache::Flatten(shape.clone()));
                x.reshape(vec![shape[0], rest])?
            }
            Layer::BatchNorm(bn) => {
                if bn.is_frozen() {
                    let y = bn.forward_eval(&x)?;
                    stats.push(bn.running.clone());
                    caches.push(LayerCache::BnEval(x));
                    y
                } else {
                    let (y, cache) = bn.forward_train(&x)?;
                    stats.push(cache.batch_stats());
                    caches.push(LayerCache::BnTrain(cache));
                    y
                }
            }
            Layer::GroupNorm(gn) => {
                let (y, cache) = gn.forward(&x)?;
                caches.push(LayerCache::GroupNorm(cache));
                y
            }
            Layer::Residual(inner) => {
                let mut inner_caches = Vec::with_capacity(inner.len());
                let fx = forward_train_seq(inner, x.clone(), &mut inner_caches, stats)?;
                caches.push(LayerCache::Residual(inner_caches));
                x.add(&fx)?
            }
        };
    }
    Ok(x)
}

/// Walks layers in reverse, pushing parameter gradients in reverse order.
fn backward_seq(layers: &[Layer], caches: &[LayerCache], mut dy: Tensor, grads: &mut Vec<Tensor>) -> Result<Tensor> {
    if layers.len() != caches.len() {
        return Err(Error::StaleCache(format!(
            "{} layers but {} caches",
            layers.len(),
            caches.len()
        )));
    }
    for (layer, cache) in layers.iter().zip(caches).rev() {
        dy = match (layer, cache) {
            (Layer::Dense(d), LayerCache::Dense(x)) => {
                let g = d.backward(x, &dy)?;
                grads.push(g.dbias);
                grads.push(g.dweight);
                g.dx
            }
            (Layer::Conv2d(c), LayerCache::Conv2d(x)) => {
                let g = c.backward(x, &dy)?;
                grads.push(g.dbias);
                grads.push(g.dkernel);
                g.dx
            }
            (Layer::Relu, LayerCache::Relu(x)) => relu_backward(x, &dy)?,
            (Layer::Flatten, LayerCache::Flatten(shape)) => dy.reshape(shape.clone())?,
            (Layer::BatchNorm(bn), LayerCache::BnTrain(cache)) => {
                let g = bn.backward_train(cache, &dy)?;
                grads.push(g.dbeta);
                grads.push(g.dgamma);
                g.dx
            }
            (Layer::BatchNorm(bn), LayerCache::BnEval(x)) => {
                let g = bn.backward_eval(x, &dy)?;
                grads.push(g.dbeta);
                grads.push(g.dgamma);
                g.dx
            }
            (Layer::GroupNorm(gn), LayerCache::GroupNorm(cache)) => {
                let g = gn.backward(cache, &dy)?;
                grads.push(g.dbeta);
                grads.push(g.dgamma);
                g.dx
            }
            (Layer::Residual(inner), LayerCache::Residual(inner_caches)) => {
                let dinner = backward_seq(inner, inner_caches, dy.clone(), grads)?;
                dy.add(&dinner)?
            }
            _ => return Err(Error::StaleCache("cache does not match layer kind".into())),
        };
    }
    Ok(dy)
}

fn forward_eval_seq(layers: &[Layer], mut x: Tensor) -> Result<Tensor> {
    for layer in layers {
        x = match layer {
            Layer::Dense(d) => d.forward(&x)?,
            Layer::Conv2d(c) => c.forward(&x)?,
            Layer::Relu => relu_forward(&x),
            Layer::Flatten => {
                let n = x.dim(0);
                let rest = x.len() / n;
                x.reshape(vec![n, rest])?
            }
            Layer::BatchNorm(bn) => bn.forward_eval(&x)?,
            Layer::GroupNorm(gn) => gn.forward(&x)?.0,
            Layer::Residual(inner) => {
                let fx = forward_eval_seq(inner, x.clone())?;
                x.add(&fx)?
            }
        };
    }
    Ok(x)
}

fn visit_params<'a>(layers: &'a [Layer], f: &mut impl FnMut(&'a Tensor, ParamKind)) {
    for layer in layers {
        match layer {
            Layer::Dense(d) => {
                f(&d.weight, ParamKind::Weight);
                f(&d.bias, ParamKind::Bias);
            }
            Layer::Conv2d(c) => {
                f(&c.kernel, ParamKind::Weight);
                f(&c.bias, ParamKind::Bias);
            }
            Layer::BatchNorm(bn) => {
                f(&bn.gamma, ParamKind::BnAffine);
                f(&bn.beta, ParamKind::BnAffine);
            }
            Layer::GroupNorm(gn) => {
                f(&gn.gamma, ParamKind::GnAffine);
                f(&gn.beta, ParamKind::GnAffine);
            }
            Layer::Residual(inner) => visit_params(inner, f),
            Layer::Relu | Layer::Flatten => {}
        }
    }
}

fn collect_params_mut<'a>(layers: &'a mut [Layer], out: &mut Vec<&'a mut Tensor>) {
    for layer in layers {
        match layer {
            Layer::Dense(d) => {
                out.push(&mut d.weight);
                out.push(&mut d.bias);
            }
            Layer::Conv2d(c) => {
                out.push(&mut c.kernel);
                out.push(&mut c.bias);
            }
            Layer::BatchNorm(bn) => {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
            Layer::GroupNorm(gn) => {
                out.push(&mut gn.gamma);
                out.push(&mut gn.beta);
            }
            Layer::Residual(inner) => collect_params_mut(inner, out),
            Layer::Relu | Layer::Flatten => {}
        }
    }
}

fn collect_bn<'a>(layers: &'a [Layer], out: &mut Vec<&'a NormLayerState>) {
    for layer in layers {
        match layer {
            Layer::BatchNorm(bn) => out.push(bn),
            Layer::Residual(inner) => collect_bn(inner, out),
            _ => {}
        }
    }
}

fn collect_bn_mut<'a>(layers: &'a mut [Layer], out: &mut Vec<&'a mut NormLayerState>) {
    for layer in layers {
        match layer {
            Layer::BatchNorm(bn) => out.push(bn),
            Layer::Residual(inner) => collect_bn_mut(inner, out),
            _ => {}
        }
    }
}

/// Normalizer placed after every hidden dense/conv layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalizer {
    None,
    Batch,
    Group(usize),
    Layer,
    Instance,
}

impl Normalizer {
    fn build(self, channels: usize, ema_alpha: f64, epsilon: f64) -> Result<Option<Layer>> {
        Ok(match self {
            Normalizer::None => None,
            Normalizer::Batch => Some(Layer::BatchNorm(NormLayerState::new(channels, ema_alpha, epsilon)?)),
            Normalizer::Group(g) => Some(Layer::GroupNorm(GroupNormLayer::new(channels, g, epsilon)?)),
            Normalizer::Layer => Some(Layer::GroupNorm(GroupNormLayer::layer_norm(channels, epsilon)?)),
            Normalizer::Instance => Some(Layer::GroupNorm(GroupNormLayer::instance_norm(channels, epsilon)?)),
        })
    }
}

/// Architecture description: optional 3×3 conv stack (each conv followed by
/// the normalizer and ReLU, optionally wrapped as residual blocks), then a
/// flatten, hidden dense layers with the same normalizer/ReLU pattern, and a
/// final dense layer producing class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// Per-example input shape, e.g. `[D]` or `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub conv_channels: Vec<usize>,
    /// Wrap conv blocks whose input and output channels agree in a residual add.
    pub residual: bool,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub normalizer: Normalizer,
    pub ema_alpha: f64,
    pub epsilon: f64,
}

impl ModelSpec {
    pub fn mlp(inputs: usize, hidden: Vec<usize>, classes: usize, normalizer: Normalizer) -> Self {
        Self {
            input_shape: vec![inputs],
            conv_channels: Vec::new(),
            residual: false,
            hidden,
            classes,
            normalizer,
            ema_alpha: crate::norm::DEFAULT_EMA_ALPHA,
            epsilon: crate::norm::DEFAULT_EPSILON,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Model> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument("a classifier needs at least two classes".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "bad input shape {:?}",
                self.input_shape
            )));
        }
        let mut layers = Vec::new();
        let mut features = self.input_len();
        if !self.conv_channels.is_empty() {
            if self.input_shape.len() != 3 {
                return Err(Error::InvalidArgument(format!(
                    "conv layers need a [C, H, W] input shape, got {:?}",
                    self.input_shape
                )));
            }
            let (mut c, h, w) = (self.input_shape[0], self.input_shape[1], self.input_shape[2]);
            for &out in &self.conv_channels {
                let mut block = vec![Layer::Conv2d(Conv2dLayer::new(c, out, 3, 1, 1, rng))];
                block.extend(self.normalizer.build(out, self.ema_alpha, self.epsilon)?);
                block.push(Layer::Relu);
                if self.residual && out == c {
                    layers.push(Layer::Residual(block));
                } else {
                    layers.extend(block);
                }
                c = out;
            }
            layers.push(Layer::Flatten);
            features = c * h * w;
        } else if self.input_shape.len() > 1 {
            layers.push(Layer::Flatten);
        }
        for &width in &self.hidden {
            layers.push(Layer::Dense(DenseLayer::new(features, width, rng)));
            layers.extend(self.normalizer.build(width, self.ema_alpha, self.epsilon)?);
            layers.push(Layer::Relu);
            features = width;
        }
        layers.push(Layer::Dense(DenseLayer::new(features, self.classes, rng)));
        Ok(Model::new(layers))
    }
}
