//! Batch normalization and group normalization.
//!
//! Inputs are `[N, C]` or `[N, C, spatial...]`. Batch norm computes per-channel
//! statistics jointly over the batch and spatial axes; group norm computes
//! per-instance statistics over each group of adjacent channels. Variances are
//! the biased (population) estimate everywhere, including the running
//! average target.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EMA_ALPHA: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Whether a batch-norm layer normalizes with mini-batch statistics or with
/// its (frozen) running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    FrozenEval,
}

/// A pair of per-channel statistics `(μ, σ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `Σ |Δμ| + |Δσ²|`
    pub fn l1_distance(&self, other: &RunningStats) -> Result<f64> {
        self.mean.ensure_same_shape(&other.mean, "running mean")?;
        self.var.ensure_same_shape(&other.var, "running variance")?;
        Ok(self.mean.l1_distance(&other.mean) + self.var.l1_distance(&other.var))
    }

    pub fn bitwise_eq(&self, other: &RunningStats) -> bool {
        self.mean.bitwise_eq(&other.mean) && self.var.bitwise_eq(&other.var)
    }
}

/// Channel layout of a normalization input.
#[derive(Debug, Clone, Copy)]
struct Layout {
    n: usize,
    c: usize,
    spatial: usize,
}

impl Layout {
    fn of(x: &Tensor, channels: usize) -> Result<Self> {
        if x.rank() < 2 || x.dim(1) != channels {
            return Err(Error::dim(format!(
                "normalization expects [N, {channels}, ...], got {:?}",
                x.shape()
            )));
        }
        Ok(Self {
            n: x.dim(0),
            c: channels,
            spatial: x.shape()[2..].iter().product(),
        })
    }

    #[inline]
    fn offset(&self, n: usize, c: usize) -> usize {
        (n * self.c + c) * self.spatial
    }
}

/// One batch-norm layer: learnable affine, running statistics and mode.
#[derive(Debug, Clone, PartialEq)]
pub struct NormLayerState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: RunningStats,
    /// Weight on the old running value in the exponential moving average.
    pub ema_alpha: f64,
    pub epsilon: f64,
    mode: NormMode,
    generation: u64,
}

/// Values saved by [`NormLayerState::forward_train`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BnForwardCache {
    pub batch_mean: Tensor,
    pub batch_var: Tensor,
    /// Normalized activations `(x − μ_B)/sqrt(σ²_B + ε)`, same shape as `x`.
    pub normalized: Tensor,
    /// Elements per channel: batch size times spatial size.
    pub count: usize,
    generation: u64,
}

impl BnForwardCache {
    pub fn batch_stats(&self) -> RunningStats {
        RunningStats {
            mean: self.batch_mean.clone(),
            var: self.batch_var.clone(),
        }
    }
}

/// Gradients of a normalization layer.
#[derive(Debug, Clone)]
pub struct NormGrads {
    pub dx: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
}

impl NormLayerState {
    /// γ = 1, β = 0, μ = 0, σ² = 1, in training mode.
    pub fn new(channels: usize, ema_alpha: f64, epsilon: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ema_alpha) {
            return Err(Error::InvalidArgument(format!(
                "ema_alpha {ema_alpha} must lie in [0, 1)"
            )));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be >= 0")));
        }
        Ok(Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running: RunningStats::new(channels),
            ema_alpha,
            epsilon,
            mode: NormMode::Train,
            generation: 0,
        })
    }

    /// Reassembles a layer from stored parts (model files).
    pub fn from_parts(
        gamma: Tensor,
        beta: Tensor,
        running: RunningStats,
        ema_alpha: f64,
        epsilon: f64,
        mode: NormMode,
    ) -> Result<Self> {
        let mut layer = Self::new(gamma.len(), ema_alpha, epsilon)?;
        let c = gamma.len();
        for (name, t) in [
            ("beta", &beta),
            ("running mean", &running.mean),
            ("running var", &running.var),
        ] {
            if t.shape() != [c] {
                return Err(Error::dim(format!("{name} shape {:?}, expected [{c}]", t.shape())));
            }
        }
        if gamma.rank() != 1 {
            return Err(Error::dim(format!("gamma shape {:?}", gamma.shape())));
        }
        if running.var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("negative running variance".into()));
        }
        layer.gamma = gamma;
        layer.beta = beta;
        layer.running = running;
        layer.mode = mode;
        Ok(layer)
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn is_frozen(&self) -> bool {
        self.mode == NormMode::FrozenEval
    }

    /// Training-mode forward: normalize with mini-batch statistics, then fold
    /// them into the running statistics with the moving average.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, BnForwardCache)> {
        if self.is_frozen() {
            return Err(Error::Mode("training-mode forward on a frozen batch-norm layer".into()));
        }
        let l = Layout::of(x, self.channels())?;
        let count = l.n * l.spatial;
        let xd = x.data();
        let mut mean = vec![0.0; l.c];
        let mut var = vec![0.0; l.c];
        for c in 0..l.c {
            let mut sum = 0.0;
            for n in 0..l.n {
                let o = l.offset(n, c);
                sum += xd[o..o + l.spatial].iter().sum::<f64>();
            }
            mean[c] = sum / count as f64;
            let mut sq = 0.0;
            for n in 0..l.n {
                let o = l.offset(n, c);
                sq += xd[o..o + l.spatial].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
            var[c] = sq / count as f64;
            if count < 2 || var[c] + self.epsilon <= 0.0 {
                return Err(Error::DegenerateVariance {
                    channel: c,
                    count,
                    epsilon: self.epsilon,
                });
            }
        }

        let (g, b) = (self.gamma.data(), self.beta.data());
        let mut normalized = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for n in 0..l.n {
            for c in 0..l.c {
                let inv_std = 1.0 / (var[c] + self.epsilon).sqrt();
                let o = l.offset(n, c);
                for i in o..o + l.spatial {
                    normalized[i] = (xd[i] - mean[c]) * inv_std;
                    y[i] = g[c] * normalized[i] + b[c];
                }
            }
        }

        let a = self.ema_alpha;
        for (r, m) in self.running.mean.data_mut().iter_mut().zip(&mean) {
            *r = a * *r + (1.0 - a) * m;
        }
        for (r, v) in self.running.var.data_mut().iter_mut().zip(&var) {
            *r = a * *r + (1.0 - a) * v;
        }
        self.generation += 1;

        let cache = BnForwardCache {
            batch_mean: Tensor::from_parts(vec![l.c], mean),
            batch_var: Tensor::from_parts(vec![l.c], var),
            normalized: Tensor::from_parts(x.shape().to_vec(), normalized),
            count,
            generation: self.generation,
        };
        Ok((Tensor::from_parts(x.shape().to_vec(), y), cache))
    }

    /// Normalize with the running statistics; never mutates the layer.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let l = Layout::of(x, self.channels())?;
        let (g, b) = (self.gamma.data(), self.beta.data());
        let (mu, var) = (self.running.mean.data(), self.running.var.data());
        let xd = x.data();
        let mut y = vec![0.0; xd.len()];
        for n in 0..l.n {
            for c in 0..l.c {
                let inv_std = 1.0 / (var[c] + self.epsilon).sqrt();
                let o = l.offset(n, c);
                for i in o..o + l.spatial {
                    y[i] = g[c] * (xd[i] - mu[c]) * inv_std + b[c];
                }
            }
        }
        Ok(Tensor::from_parts(x.shape().to_vec(), y))
    }

    /// Backward through [`forward_train`](Self::forward_train):
    ///
    /// `dx_i = (|B|·dx̃_i − Σ_j dx̃_j − x̃_i·Σ_j dx̃_j·x̃_j) / (|B|·sqrt(σ²_B + ε))`
    /// with `dx̃ = γ·dy`, sums running over batch and spatial positions.
    pub fn backward_train(&self, cache: &BnForwardCache, dy: &Tensor) -> Result<NormGrads> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache(format!(
                "cache from forward #{}, layer is at #{}",
                cache.generation, self.generation
            )));
        }
        cache.normalized.ensure_same_shape(dy, "batch-norm dy")?;
        let l = Layout::of(dy, self.channels())?;
        let count = l.n * l.spatial;
        if count != cache.count {
            return Err(Error::StaleCache(format!(
                "cache counts {} elements per channel, dy has {count}",
                cache.count
            )));
        }
        let (xh, gd, gamma) = (cache.normalized.data(), dy.data(), self.gamma.data());
        let var = cache.batch_var.data();
        let mut dx = vec![0.0; gd.len()];
        let mut dgamma = vec![0.0; l.c];
        let mut dbeta = vec![0.0; l.c];
        let m = count as f64;
        for c in 0..l.c {
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            for n in 0..l.n {
                let o = l.offset(n, c);
                for i in o..o + l.spatial {
                    let dxh = gamma[c] * gd[i];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh[i];
                    dgamma[c] += gd[i] * xh[i];
                    dbeta[c] += gd[i];
                }
            }
            let denom = m * (var[c] + self.epsilon).sqrt();
            for n in 0..l.n {
                let o = l.offset(n, c);
                for i in o..o + l.spatial {
                    let dxh = gamma[c] * gd[i];
                    dx[i] = (m * dxh - sum_dxh - xh[i] * sum_dxh_xh) / denom;
                }
            }
        }
        Ok(NormGrads {
            dx: Tensor::from_parts(dy.shape().to_vec(), dx),
            dgamma: Tensor::from_parts(vec![l.c], dgamma),
            dbeta: Tensor::from_parts(vec![l.c], dbeta),
        })
    }

    /// Backward through [`forward_eval`](Self::forward_eval):
    /// `dx = γ·dy / sqrt(σ² + ε)`, independent of the other samples.
    pub fn backward_eval(&self, x: &Tensor, dy: &Tensor) -> Result<NormGrads> {
        x.ensure_same_shape(dy, "batch-norm dy")?;
        let l = Layout::of(x, self.channels())?;
        let (g, mu, var) = (self.gamma.data(), self.running.mean.data(), self.running.var.data());
        let (xd, gd) = (x.data(), dy.data());
        let mut dx = vec![0.0; gd.len()];
        let mut dgamma = vec![0.0; l.c];
        let mut dbeta = vec![0.0; l.c];
        for n in 0..l.n {
            for c in 0..l.c {
                let inv_std = 1.0 / (var[c] + self.epsilon).sqrt();
                let o = l.offset(n, c);
                for i in o..o + l.spatial {
                    dx[i] = g[c] * gd[i] * inv_std;
                    dgamma[c] += gd[i] * (xd[i] - mu[c]) * inv_std;
                    dbeta[c] += gd[i];
                }
            }
        }
        Ok(NormGrads {
            dx: Tensor::from_parts(dy.shape().to_vec(), dx),
            dgamma: Tensor::from_parts(vec![l.c], dgamma),
            dbeta: Tensor::from_parts(vec![l.c], dbeta),
        })
    }

    /// Overwrites the running statistics and switches to frozen evaluation
    /// mode for the rest of the run. Freezing twice is an error.
    pub fn freeze(&mut self, frozen: &RunningStats) -> Result<()> {
        if self.is_frozen() {
            return Err(Error::Mode("batch-norm layer is already frozen".into()));
        }
        let c = self.channels();
        if frozen.mean.shape() != [c] || frozen.var.shape() != [c] {
            return Err(Error::dim(format!(
                "frozen statistics have {} channels, layer has {c}",
                frozen.channels()
            )));
        }
        if frozen.var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("negative frozen variance".into()));
        }
        self.running = frozen.clone();
        self.mode = NormMode::FrozenEval;
        Ok(())
    }
}

/// Group normalization: per instance, per group of `C/G` adjacent channels.
///
/// `groups == 1` is layer norm, `groups == C` is instance norm.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub groups: usize,
    pub epsilon: f64,
}

#[derive(Debug, Clone)]
pub struct GnCache {
    pub normalized: Tensor,
    /// `1/sqrt(σ² + ε)` per `(instance, group)`.
    pub inv_std: Vec<f64>,
}

impl GroupNormLayer {
    pub fn new(channels: usize, groups: usize, epsilon: f64) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::InvalidArgument(format!(
                "{channels} channels cannot be split into {groups} groups"
            )));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be >= 0")));
        }
        Ok(Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            groups,
            epsilon,
        })
    }

    pub fn layer_norm(channels: usize, epsilon: f64) -> Result<Self> {
        Self::new(channels, 1, epsilon)
    }

    pub fn instance_norm(channels: usize, epsilon: f64) -> Result<Self> {
        Self::new(channels, channels, epsilon)
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn layout(&self, x: &Tensor) -> Result<(Layout, usize)> {
        let l = Layout::of(x, self.channels())?;
        if self.groups == 0 || l.c % self.groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} channels cannot be split into {} groups",
                l.c, self.groups
            )));
        }
        Ok((l, l.c / self.groups))
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, GnCache)> {
        let (l, per_group) = self.layout(x)?;
        let count = per_group * l.spatial;
        let xd = x.data();
        let (g, b) = (self.gamma.data(), self.beta.data());
        let mut normalized = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        let mut inv_std = Vec::with_capacity(l.n * self.groups);
        for n in 0..l.n {
            for grp in 0..self.groups {
                // Channels of one group are contiguous for a fixed instance.
                let start = l.offset(n, grp * per_group);
                let span = &xd[start..start + count];
                let mean = span.iter().sum::<f64>() / count as f64;
                let var = span.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
                if var + self.epsilon <= 0.0 {
                    return Err(Error::DegenerateVariance {
                        channel: grp * per_group,
                        count,
                        epsilon: self.epsilon,
                    });
                }
                let inv = 1.0 / (var + self.epsilon).sqrt();
                inv_std.push(inv);
                for k in 0..count {
                    let i = start + k;
                    let c = grp * per_group + k / l.spatial;
                    normalized[i] = (xd[i] - mean) * inv;
                    y[i] = g[c] * normalized[i] + b[c];
                }
            }
        }
        Ok((
            Tensor::from_parts(x.shape().to_vec(), y),
            GnCache {
                normalized: Tensor::from_parts(x.shape().to_vec(), normalized),
                inv_std,
            },
        ))
    }

    pub fn backward(&self, cache: &GnCache, dy: &Tensor) -> Result<NormGrads> {
        cache.normalized.ensure_same_shape(dy, "group-norm dy")?;
        let (l, per_group) = self.layout(dy)?;
        if cache.inv_std.len() != l.n * self.groups {
            return Err(Error::StaleCache("group-norm cache does not match dy".into()));
        }
        let count = per_group * l.spatial;
        let m = count as f64;
        let (xh, gd, gamma) = (cache.normalized.data(), dy.data(), self.gamma.data());
        let mut dx = vec![0.0; gd.len()];
        let mut dgamma = vec![0.0; l.c];
        let mut dbeta = vec![0.0; l.c];
        for n in 0..l.n {
            for grp in 0..self.groups {
                let start = l.offset(n, grp * per_group);
                let mut sum_dxh = 0.0;
                let mut sum_dxh_xh = 0.0;
                for k in 0..count {
                    let i = start + k;
                    let c = grp * per_group + k / l.spatial;
                    let dxh = gamma[c] * gd[i];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh[i];
                    dgamma[c] += gd[i] * xh[i];
                    dbeta[c] += gd[i];
                }
                let scale = cache.inv_std[n * self.groups + grp] / m;
                for k in 0..count {
                    let i = start + k;
                    let c = grp * per_group + k / l.spatial;
                    dx[i] = scale * (m * gamma[c] * gd[i] - sum_dxh - xh[i] * sum_dxh_xh);
                }
            }
        }
        Ok(NormGrads {
            dx: Tensor::from_parts(dy.shape().to_vec(), dx),
            dgamma: Tensor::from_parts(vec![l.c], dgamma),
            dbeta: Tensor::from_parts(vec![l.c], dbeta),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;

    fn col(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn train_forward_on_unit_batch_is_identity() {
        let mut bn = NormLayerState::new(1, 0.9, 0.0).unwrap();
        let (y, _) = bn.forward_train(&col(&[-1.0, 1.0])).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn constant_batch_maps_to_beta() {
        let mut bn = NormLayerState::new(1, 0.9, 1e-5).unwrap();
        bn.beta = Tensor::vector(vec![0.7]);
        let (y, _) = bn.forward_train(&col(&[3.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[0.7, 0.7]);
    }

    #[test]
    fn ema_update_of_running_mean() {
        let mut bn = NormLayerState::new(1, 0.5, 1e-5).unwrap();
        bn.forward_train(&col(&[1.0, 3.0])).unwrap();
        assert_eq!(bn.running.mean.data(), &[1.0]);
        // σ²_B = 1, σ² = 0.5·1 + 0.5·1
        assert_eq!(bn.running.var.data(), &[1.0]);
    }

    #[test]
    fn degenerate_batches_are_errors() {
        let mut bn = NormLayerState::new(1, 0.9, 0.0).unwrap();
        assert!(matches!(
            bn.forward_train(&col(&[2.0])),
            Err(Error::DegenerateVariance { .. })
        ));
        assert!(matches!(
            bn.forward_train(&col(&[2.0, 2.0])),
            Err(Error::DegenerateVariance { .. })
        ));
        let mut bn = NormLayerState::new(1, 0.9, 1e-5).unwrap();
        assert!(bn.forward_train(&col(&[2.0])).is_err());
    }

    #[test]
    fn eval_forward_examples() {
        let bn = NormLayerState::new(2, 0.9, 0.0).unwrap();
        let x = Tensor::new(vec![2, 2], vec![0.5, -3.0, 2.0, 7.0]).unwrap();
        assert_eq!(bn.forward_eval(&x).unwrap(), x);

        let mut bn = NormLayerState::new(2, 0.9, 1e-5).unwrap();
        bn.running.mean = Tensor::vector(vec![0.3, -1.2]);
        bn.running.var = Tensor::vector(vec![2.0, 0.5]);
        bn.beta = Tensor::vector(vec![0.25, -0.5]);
        bn.gamma = Tensor::vector(vec![3.0, 4.0]);
        let x = Tensor::new(vec![1, 2], vec![0.3, -1.2]).unwrap();
        assert_eq!(bn.forward_eval(&x).unwrap().data(), &[0.25, -0.5]);
    }

    #[test]
    fn constant_dy_gives_zero_dx() {
        let mut r = rng(5);
        let mut bn = NormLayerState::new(3, 0.9, 1e-5).unwrap();
        bn.gamma = Tensor::uniform(&[3], 0.5, 2.0, &mut r);
        let x = Tensor::uniform(&[6, 3], -2.0, 2.0, &mut r);
        let (_, cache) = bn.forward_train(&x).unwrap();
        let g = bn.backward_train(&cache, &Tensor::full(&[6, 3], 0.8)).unwrap();
        assert!(g.dx.data().iter().all(|v| v.abs() < 1e-12), "{:?}", g.dx);
        let g = bn.backward_train(&cache, &Tensor::zeros(&[6, 3])).unwrap();
        assert!(g
            .dx
            .data()
            .iter()
            .chain(g.dgamma.data())
            .chain(g.dbeta.data())
            .all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut bn = NormLayerState::new(1, 0.9, 1e-5).unwrap();
        let (_, old) = bn.forward_train(&col(&[1.0, 2.0])).unwrap();
        let (_, _new) = bn.forward_train(&col(&[1.0, 3.0])).unwrap();
        assert!(matches!(
            bn.backward_train(&old, &col(&[1.0, 1.0])),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn eval_backward_examples() {
        let bn = NormLayerState::new(2, 0.9, 0.0).unwrap();
        let x = Tensor::new(vec![2, 2], vec![0.5, -3.0, 2.0, 7.0]).unwrap();
        let dy = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(bn.backward_eval(&x, &dy).unwrap().dx, dy);
        let g = bn.backward_eval(&x, &Tensor::zeros(&[2, 2])).unwrap();
        assert!(g.dx.data().iter().chain(g.dgamma.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn freeze_semantics() {
        let mut bn = NormLayerState::new(2, 0.9, 1e-5).unwrap();
        let frozen = RunningStats {
            mean: Tensor::vector(vec![0.5, -0.5]),
            var: Tensor::vector(vec![2.0, 3.0]),
        };
        bn.freeze(&frozen).unwrap();
        assert_eq!(bn.running, frozen);
        assert!(matches!(bn.forward_train(&Tensor::zeros(&[2, 2])), Err(Error::Mode(_))));
        assert!(matches!(bn.freeze(&frozen), Err(Error::Mode(_))));

        let x = Tensor::new(vec![1, 2], vec![1.5, 1.0]).unwrap();
        let y = bn.forward_eval(&x).unwrap();
        assert_eq!(y.data()[0], 1.0 / (2.0f64 + 1e-5).sqrt());
    }

    #[test]
    fn group_norm_requires_divisible_channels() {
        assert!(GroupNormLayer::new(6, 4, 1e-5).is_err());
        assert!(GroupNormLayer::new(6, 0, 1e-5).is_err());
        let gn = GroupNormLayer::new(6, 3, 1e-5).unwrap();
        let mut other = gn.clone();
        other.groups = 4;
        assert!(other.forward(&Tensor::zeros(&[1, 6])).is_err());
    }

    #[test]
    fn group_norm_identity_on_standardized_instance() {
        let gn = GroupNormLayer::new(4, 1, 0.0).unwrap();
        let x = Tensor::new(vec![1, 4], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let (y, _) = gn.forward(&x).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn group_norm_shift_invariance_within_group() {
        let mut r = rng(9);
        let mut gn = GroupNormLayer::new(4, 2, 1e-5).unwrap();
        gn.gamma = Tensor::uniform(&[4], 0.5, 1.5, &mut r);
        gn.beta = Tensor::uniform(&[4], -1.0, 1.0, &mut r);
        let x = Tensor::uniform(&[3, 4, 2], -1.0, 1.0, &mut r);
        let mut shifted = x.clone();
        // Shift channels 2 and 3 (group 1) of every instance.
        for n in 0..3 {
            for i in (n * 8 + 4)..(n * 8 + 8) {
                shifted.data_mut()[i] += 5.0;
            }
        }
        let (a, _) = gn.forward(&x).unwrap();
        let (b, _) = gn.forward(&shifted).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
