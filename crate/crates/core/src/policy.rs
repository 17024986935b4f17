//! FixBN's two-stage schedule and the momentum regimes.

use std::collections::VecDeque;

use crate::diagnostics::windowed_variance;
use crate::error::{Error, Result};
use crate::fed::{ceil_fraction, sorted_with_weights, weighted_mean, ClientReport, GlobalState};
use crate::model::Model;
use crate::nn::MomentumBuffer;
use crate::partition::ClientShard;

pub const DEFAULT_WINDOW: usize = 20;
pub const DEFAULT_TAU: f64 = 1e-4;

/// When to switch batch norm from mini-batch statistics to frozen global ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FixBnKind {
    Off,
    /// Freeze for rounds `t > ceil(f·T)`.
    FixedFraction(f64),
    /// Freeze for rounds `t > r`.
    FixedRound(usize),
    /// Freeze once the population variance of the last `window` deviation
    /// signals drops below `tau`.
    SlidingWindow {
        window: usize,
        tau: f64,
    },
}

/// Server-side freeze trigger. Once triggered it stays triggered.
#[derive(Debug, Clone, PartialEq)]
pub struct FixBnPolicy {
    kind: FixBnKind,
    triggered: bool,
    history: VecDeque<f64>,
}

impl FixBnPolicy {
    pub fn new(kind: FixBnKind) -> Result<Self> {
        match kind {
            FixBnKind::FixedFraction(f) if !(f > 0.0 && f < 1.0) => {
                return Err(Error::InvalidArgument(format!("FixBN fraction {f} must lie in (0, 1)")))
            }
            FixBnKind::FixedRound(0) => return Err(Error::InvalidArgument("FixBN round must be >= 1".into())),
            FixBnKind::SlidingWindow { window, tau } if window < 2 || tau.is_nan() || tau <= 0.0 => {
                return Err(Error::InvalidArgument(format!(
                    "sliding window needs W >= 2 and tau > 0, got W={window}, tau={tau}"
                )))
            }
            _ => {}
        }
        Ok(Self {
            kind,
            triggered: false,
            history: VecDeque::new(),
        })
    }

    pub fn off() -> Self {
        Self::new(FixBnKind::Off).expect("off is valid")
    }

    pub fn kind(&self) -> FixBnKind {
        self.kind
    }

    pub fn triggered(&self) -> bool {
        self.triggered
    }

    /// Window length used for the windowed-variance diagnostic.
    pub fn window(&self) -> usize {
        match self.kind {
            FixBnKind::SlidingWindow { window, .. } => window,
            _ => DEFAULT_WINDOW,
        }
    }

    /// Decides whether round `t` of `total` runs in stage two.
    ///
    /// `signal` is the newest deviation signal (the previous round's), if any;
    /// the sliding-window rule records it before deciding and answers `false`
    /// until `W` signals exist.
    pub fn should_freeze(&mut self, t: usize, total: usize, signal: Option<f64>) -> Result<bool> {
        if t == 0 || t > total {
            return Err(Error::InvalidArgument(format!("round {t} outside [1, {total}]")));
        }
        let fire = match self.kind {
            FixBnKind::Off => false,
            FixBnKind::FixedFraction(f) => t > ceil_fraction(f, total),
            FixBnKind::FixedRound(r) => {
                if r > total {
                    return Err(Error::InvalidArgument(format!(
                        "FixBN round {r} exceeds total rounds {total}"
                    )));
                }
                t > r
            }
            FixBnKind::SlidingWindow { window, tau } => {
                if let Some(s) = signal {
                    self.history.push_back(s);
                    while self.history.len() > window {
                        self.history.pop_front();
                    }
                }
                let tail: Vec<f64> = self.history.iter().copied().collect();
                windowed_variance(&tail, window).is_some_and(|v| v < tau)
            }
        };
        self.triggered |= fire;
        Ok(self.triggered)
    }
}

/// Snapshots the global running statistics and freezes every batch-norm
/// layer of the global model with them. Every later broadcast, local
/// training step and evaluation normalizes with this snapshot.
pub fn enter_stage_two(global: &mut GlobalState) -> Result<()> {
    if global.frozen_stats.is_some() {
        return Err(Error::Mode("stage two already entered".into()));
    }
    let snapshot = global.model.running_stats();
    for (layer, stats) in global.model.bn_layers_mut().into_iter().zip(&snapshot) {
        layer.freeze(stats)?;
    }
    global.frozen_stats = Some(snapshot);
    Ok(())
}

/// How SGD velocity survives across rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentumMode {
    /// Zeroed at the start of every round.
    Reinit,
    /// Each client keeps its own velocity between its rounds.
    LocalMaintained,
    /// Velocities are uploaded, averaged like parameters, and broadcast back.
    GlobalMaintained,
}

/// Velocity a client starts its local round with.
///
/// With global momentum and no server buffer yet (round 1) the buffer is zero.
pub fn momentum_for_round(
    mode: MomentumMode,
    shard: &ClientShard,
    server_buffer: Option<&MomentumBuffer>,
    model: &Model,
) -> Result<MomentumBuffer> {
    let zeros = || MomentumBuffer::zeros_like(model.params());
    let buf = match mode {
        MomentumMode::Reinit => zeros(),
        MomentumMode::LocalMaintained => shard.momentum.clone().unwrap_or_else(zeros),
        MomentumMode::GlobalMaintained => server_buffer.cloned().unwrap_or_else(zeros),
    };
    let params = model.params();
    if buf.velocity.len() != params.len() || buf.velocity.iter().zip(&params).any(|(v, p)| !v.same_shape(p)) {
        return Err(Error::dim("momentum buffer does not match model parameters"));
    }
    Ok(buf)
}

/// Weighted element-wise mean of the uploaded velocities, with the same
/// `|D_m|/Σ|D_j|` weights and client-id summation order as the parameters.
pub fn aggregate_momentum(reports: &[ClientReport]) -> Result<MomentumBuffer> {
    let (sorted, weights) = sorted_with_weights(reports)?;
    let mut bufs = Vec::with_capacity(sorted.len());
    for r in &sorted {
        bufs.push(
            r.momentum
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("client {} uploaded no momentum buffer", r.client_id)))?,
        );
    }
    let slots = bufs[0].velocity.len();
    if bufs.iter().any(|b| b.velocity.len() != slots) {
        return Err(Error::dim("momentum buffers differ in length"));
    }
    let velocity = (0..slots)
        .map(|k| {
            let column: Vec<_> = bufs.iter().map(|b| &b.velocity[k]).collect();
            weighted_mean(&column, &weights)
        })
        .collect::<Result<_>>()?;
    Ok(MomentumBuffer { velocity })
}

/// Floats a client uploads per round: parameters, batch-norm running
/// statistics, and under global momentum one velocity per parameter.
pub fn upload_payload_len(mode: MomentumMode, model: &Model) -> usize {
    let base = model.parameter_count() + model.stat_count();
    match mode {
        MomentumMode::GlobalMaintained => base + model.parameter_count(),
        _ => base,
    }
}
