//! The FedAvg engine: participant sampling, local SGD, weighted aggregation
//! of parameters and batch-norm statistics, evaluation and the round loop.
//!
//! Mini-batches come from an endless per-client stream: epoch `e` is the
//! client's index list shuffled with a seed derived from `(client seed, e)`,
//! and local step `k` of round `t` reads positions
//! `[s·B, (s+1)·B)` of the concatenated epochs with `s = (t−1)·E + k`.
//! A client that holds the whole dataset therefore sees exactly the batches a
//! centralized run with the same seed would.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::diagnostics::{l1_drift, local_deviation, windowed_variance, RoundRecord};
use crate::error::{Error, Result};
use crate::model::{Model, ParamKind};
use crate::nn::{sgd_update, softmax_cross_entropy, MomentumBuffer};
use crate::norm::RunningStats;
use crate::partition::ClientShard;
use crate::policy::{enter_stage_two, momentum_for_round, FixBnPolicy, MomentumMode};
use crate::seed::{self, Purpose};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetMode {
    /// Run exactly `rounds` rounds.
    FixedRounds,
    /// Derive the round count from a budget of passes over the training set.
    FixedEpochs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub rounds: usize,
    /// Local SGD steps per round (E).
    pub local_steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Fractions of the total rounds at which the learning rate decays.
    pub lr_decay_points: Vec<f64>,
    pub lr_decay_factor: f64,
    pub participation_rate: f64,
    pub momentum_mode: MomentumMode,
    pub momentum_coef: f64,
    pub weight_decay: f64,
    pub budget_mode: BudgetMode,
    /// Passes over the training set under [`BudgetMode::FixedEpochs`].
    pub budget_epochs: f64,
    /// Keep γ and β of frozen batch-norm layers fixed during stage two.
    pub fix_affine: bool,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            local_steps: 1,
            batch_size: 20,
            base_lr: 0.02,
            lr_decay_points: vec![0.5, 0.75],
            lr_decay_factor: 0.1,
            participation_rate: 1.0,
            momentum_mode: MomentumMode::Reinit,
            momentum_coef: 0.9,
            weight_decay: 1e-4,
            budget_mode: BudgetMode::FixedRounds,
            budget_epochs: 128.0,
            fix_affine: false,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("fed.{field}"), msg));
        if self.local_steps == 0 {
            return bad("local_steps", "must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("lr", format!("must be positive, got {}", self.base_lr));
        }
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return bad(
                "participation",
                format!("must lie in (0, 1], got {}", self.participation_rate),
            );
        }
        let points = &self.lr_decay_points;
        if points.iter().any(|&p| !(p > 0.0 && p < 1.0)) || points.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_decay_points", "must be strictly increasing in (0, 1)".into());
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return bad("lr_decay_factor", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum_coef) {
            return bad("momentum", format!("must lie in [0, 1), got {}", self.momentum_coef));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be >= 0".into());
        }
        match self.budget_mode {
            BudgetMode::FixedEpochs if !(self.budget_epochs > 0.0 && self.budget_epochs.is_finite()) => {
                bad("budget_epochs", "must be positive".into())
            }
            _ => Ok(()),
        }
    }

    /// Total rounds T. Under a fixed-epoch budget,
    /// `T = floor(epochs·N / (E · batch · participants))`, at least 1.
    pub fn resolved_rounds(&self, total_examples: usize, clients: usize) -> usize {
        match self.budget_mode {
            BudgetMode::FixedRounds => self.rounds,
            BudgetMode::FixedEpochs => {
                let per_round =
                    self.local_steps * self.batch_size * participant_count(clients, self.participation_rate);
                let t = (self.budget_epochs * total_examples as f64 / per_round as f64 + 1e-9).floor();
                (t as usize).max(1)
            }
        }
    }
}

/// `ceil(fraction · total)`, treating products within 1e-9 of an integer as
/// that integer (`0.07 · 100` is not quite 7 in binary floating point).
pub fn ceil_fraction(fraction: f64, total: usize) -> usize {
    let exact = fraction * total as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        exact.ceil() as usize
    }
}

/// Learning rate for round `t` of `total`: `base · factor^k` where `k` counts
/// decay points `p` with `t ≥ ceil(p · total)`.
pub fn lr_at(t: usize, total: usize, cfg: &FedConfig) -> f64 {
    let passed = cfg
        .lr_decay_points
        .iter()
        .filter(|&&p| t >= ceil_fraction(p, total))
        .count();
    cfg.base_lr * cfg.lr_decay_factor.powi(passed as i32)
}

fn participant_count(clients: usize, rate: f64) -> usize {
    ((rate * clients as f64 + 1e-9).floor() as usize).clamp(1, clients.max(1))
}

/// `max(1, floor(rate · M))` distinct client ids, sorted, sampled without
/// replacement from a stream keyed by `round_seed`.
pub fn sample_participants(clients: usize, rate: f64, round_seed: u64) -> Result<Vec<usize>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "participation rate {rate} must lie in (0, 1]"
        )));
    }
    if clients == 0 {
        return Err(Error::InvalidArgument("no clients".into()));
    }
    let k = participant_count(clients, rate);
    if k == clients {
        return Ok((0..clients).collect());
    }
    let mut ids = rand::seq::index::sample(&mut seed::rng(round_seed), clients, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Endless shuffled-epoch stream over one shard.
pub struct BatchStream<'a> {
    shard: &'a ClientShard,
    batch_size: usize,
    epoch: Option<(u64, Vec<usize>)>,
}

impl<'a> BatchStream<'a> {
    pub fn new(shard: &'a ClientShard, batch_size: usize) -> Self {
        Self {
            shard,
            batch_size,
            epoch: None,
        }
    }

    /// Batch size actually used: the whole shard when it is smaller.
    pub fn effective_batch(&self) -> usize {
        self.batch_size.min(self.shard.len())
    }

    fn at(&mut self, position: u64) -> usize {
        let n = self.shard.len() as u64;
        let e = position / n;
        if self.epoch.as_ref().is_none_or(|(cached, _)| *cached != e) {
            let mut perm = self.shard.indices.clone();
            perm.shuffle(&mut seed::rng(seed::mix(self.shard.seed, e)));
            self.epoch = Some((e, perm));
        }
        self.epoch.as_ref().expect("just filled").1[(position % n) as usize]
    }

    /// Dataset rows of global step `step`.
    pub fn batch(&mut self, step: u64) -> Vec<usize> {
        let b = self.effective_batch() as u64;
        (step * b..(step + 1) * b).map(|p| self.at(p)).collect()
    }
}

/// Global step index of local step `k` in round `t`.
pub fn global_step(round: usize, local_steps: usize, k: usize) -> u64 {
    ((round - 1) * local_steps + k) as u64
}

/// What a client sends back after its local round.
#[derive(Debug, Clone)]
pub struct ClientReport {
    pub client_id: usize,
    pub model: Model,
    /// Loss of the last local mini-batch.
    pub final_loss: f64,
    /// Normalization statistics used by every batch-norm layer at every local step.
    pub stats_trace: Vec<Vec<RunningStats>>,
    /// Final velocity (absent under [`MomentumMode::Reinit`]).
    pub momentum: Option<MomentumBuffer>,
    pub example_count: usize,
}

impl ClientReport {
    /// Locally accumulated running statistics.
    pub fn local_stats(&self) -> Vec<RunningStats> {
        self.model.running_stats()
    }

    /// Statistics of the last local mini-batch.
    pub fn last_batch_stats(&self) -> &[RunningStats] {
        self.stats_trace.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Round-level inputs a client needs besides its shard.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext {
    pub round: usize,
    pub lr: f64,
    /// Stage two of FixBN: batch-norm layers arrive frozen.
    pub freeze_active: bool,
}

/// `E` local SGD steps on a copy of the global model.
pub fn client_update(
    global: &Model,
    shard: &ClientShard,
    data: &Dataset,
    cfg: &FedConfig,
    ctx: RoundContext,
    server_momentum: Option<&MomentumBuffer>,
) -> Result<ClientReport> {
    if shard.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "client {} has no data",
            shard.client_id
        )));
    }
    if ctx.lr.is_nan() || ctx.lr <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "learning rate {} must be positive",
            ctx.lr
        )));
    }
    if ctx.round == 0 {
        return Err(Error::InvalidArgument("rounds are numbered from 1".into()));
    }
    let bn = global.bn_layers();
    if bn.iter().any(|l| l.is_frozen() != ctx.freeze_active) {
        return Err(Error::Mode(format!(
            "client {}: batch-norm layers must {}be frozen in this round",
            shard.client_id,
            if ctx.freeze_active { "" } else { "not " }
        )));
    }

    let mut model = global.clone();
    let mut velocity = momentum_for_round(cfg.momentum_mode, shard, server_momentum, &model)?;
    let kinds = model.param_kinds();
    let hold_affine = ctx.freeze_active && cfg.fix_affine;
    let mut stream = BatchStream::new(shard, cfg.batch_size);
    let mut stats_trace = Vec::with_capacity(cfg.local_steps);
    let mut final_loss = f64::NAN;

    for k in 0..cfg.local_steps {
        let rows = stream.batch(global_step(ctx.round, cfg.local_steps, k));
        let (x, labels) = data.batch(&rows)?;
        let (logits, trace) = model.forward_train(&x)?;
        let loss = softmax_cross_entropy(&logits, &labels)?;
        if !loss.loss.is_finite() {
            return Err(Error::Divergence(format!(
                "client {}, round {}, local step {k}",
                shard.client_id, ctx.round
            )));
        }
        let (_, grads) = model.backward(&trace, &loss.grad)?;
        for (((p, g), v), kind) in model
            .params_mut()
            .into_iter()
            .zip(&grads)
            .zip(velocity.velocity.iter_mut())
            .zip(&kinds)
        {
            if hold_affine && *kind == ParamKind::BnAffine {
                continue;
            }
            sgd_update(p, g, v, ctx.lr, cfg.momentum_coef, cfg.weight_decay)?;
        }
        stats_trace.push(trace.norm_stats);
        final_loss = loss.loss;
    }
    if model.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::Divergence(format!(
            "client {}, round {}: non-finite parameters",
            shard.client_id, ctx.round
        )));
    }

    Ok(ClientReport {
        client_id: shard.client_id,
        model,
        final_loss,
        stats_trace,
        momentum: match cfg.momentum_mode {
            MomentumMode::Reinit => None,
            _ => Some(velocity),
        },
        example_count: shard.len(),
    })
}

/// Reports ordered by client id with their renormalized weights
/// `|D_m| / Σ_participants |D_j|`.
pub fn sorted_with_weights(reports: &[ClientReport]) -> Result<(Vec<&ClientReport>, Vec<f64>)> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("nothing to aggregate".into()));
    }
    let mut sorted: Vec<&ClientReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.client_id);
    let total: usize = sorted.iter().map(|r| r.example_count).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("reports carry no examples".into()));
    }
    let weights = sorted.iter().map(|r| r.example_count as f64 / total as f64).collect();
    Ok((sorted, weights))
}

/// `Σ_m w_m · t_m`, accumulated in the given order starting from `w_0 · t_0`.
pub fn weighted_mean(items: &[&Tensor], weights: &[f64]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty mean".into()))?;
    let mut out = (*first).clone();
    out.scale(weights[0]);
    for (t, &w) in items.iter().zip(weights).skip(1) {
        out.add_scaled(w, t)?;
    }
    Ok(out)
}

/// Weighted element-wise average of every learnable and every batch-norm
/// running statistic, summed in client-id order.
///
/// Frozen batch-norm statistics are not averaged: every participant must
/// carry the same frozen values and they are kept verbatim.
pub fn aggregate(reports: &[ClientReport]) -> Result<Model> {
    let (sorted, weights) = sorted_with_weights(reports)?;
    let first = &sorted[0].model;
    for r in &sorted[1..] {
        first.ensure_congruent(&r.model)?;
    }
    let mut out = first.clone();

    let per_client: Vec<Vec<&Tensor>> = sorted.iter().map(|r| r.model.params()).collect();
    for (slot, target) in out.params_mut().into_iter().enumerate() {
        let column: Vec<&Tensor> = per_client.iter().map(|p| p[slot]).collect();
        *target = weighted_mean(&column, &weights)?;
    }

    let per_client_bn: Vec<_> = sorted.iter().map(|r| r.model.bn_layers()).collect();
    for (l, target) in out.bn_layers_mut().into_iter().enumerate() {
        let layers: Vec<_> = per_client_bn.iter().map(|b| b[l]).collect();
        if layers.iter().any(|b| b.mode() != target.mode()) {
            return Err(Error::Mode(format!(
                "batch-norm layer {l} has mixed modes across clients"
            )));
        }
        if target.is_frozen() {
            if layers.iter().any(|b| !b.running.bitwise_eq(&target.running)) {
                return Err(Error::Mode(format!(
                    "frozen batch-norm layer {l} carries different statistics across clients"
                )));
            }
            continue;
        }
        let means: Vec<&Tensor> = layers.iter().map(|b| &b.running.mean).collect();
        let vars: Vec<&Tensor> = layers.iter().map(|b| &b.running.var).collect();
        target.running.mean = weighted_mean(&means, &weights)?;
        target.running.var = weighted_mean(&vars, &weights)?;
    }
    Ok(out)
}

/// Server state between rounds.
#[derive(Debug, Clone)]
pub struct GlobalState {
    pub model: Model,
    /// Last completed round (0 before training).
    pub round: usize,
    /// Aggregated velocity under [`MomentumMode::GlobalMaintained`].
    pub momentum: Option<MomentumBuffer>,
    /// Snapshot of `S̄` taken when FixBN entered stage two.
    pub frozen_stats: Option<Vec<RunningStats>>,
}

impl GlobalState {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            round: 0,
            momentum: None,
            frozen_stats: None,
        }
    }

    pub fn running_stats(&self) -> Vec<RunningStats> {
        self.model.running_stats()
    }
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy with inference-mode normalization.
pub fn evaluate(model: &Model, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let rows: Vec<usize> = (0..test.len()).collect();
    let mut correct = 0usize;
    for chunk in rows.chunks(512) {
        let (x, labels) = test.batch(chunk)?;
        let logits = model.forward_eval(&x)?;
        let k = logits.dim(1);
        for (row, &label) in logits.data().chunks(k).zip(&labels) {
            correct += usize::from(argmax(row) == label);
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Mean over participants and batch-norm layers of
/// `‖S_{m,B} − S̄^(t−1)‖₁ / (2·C)`: the per-statistic deviation fed to the
/// sliding-window freeze trigger.
pub fn deviation_signal(reports: &[ClientReport], global_stats: &[RunningStats]) -> Result<f64> {
    if global_stats.is_empty() || reports.is_empty() {
        return Ok(0.0);
    }
    let mut sorted: Vec<&ClientReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.client_id);
    let mut total = 0.0;
    let mut terms = 0usize;
    for r in sorted {
        let batch = r.last_batch_stats();
        if batch.len() != global_stats.len() {
            return Err(Error::dim("batch statistics do not match batch-norm layers"));
        }
        for (b, g) in batch.iter().zip(global_stats) {
            total += b.l1_distance(g)? / (2 * g.channels()) as f64;
            terms += 1;
        }
    }
    Ok(total / terms as f64)
}

/// Threading for [`run_training`]; results do not depend on it.
#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { threads: 1 }
    }
}

/// The FedAvg loop. Each round: sample participants, consult the FixBN
/// policy (entering stage two if it fires), run local updates, aggregate,
/// evaluate and record diagnostics.
pub fn run_training(
    model0: Model,
    shards: &mut [ClientShard],
    data: &Dataset,
    test: &Dataset,
    cfg: &FedConfig,
    fixbn: &mut FixBnPolicy,
    opts: RunOptions,
) -> Result<(GlobalState, Vec<RoundRecord>)> {
    cfg.validate()?;
    if shards.is_empty() {
        return Err(Error::InvalidArgument("no clients".into()));
    }
    if let Some((pos, s)) = shards.iter().enumerate().find(|(i, s)| s.client_id != *i) {
        return Err(Error::InvalidArgument(format!(
            "shard at position {pos} has client id {}",
            s.client_id
        )));
    }
    let total_examples: usize = shards.iter().map(ClientShard::len).sum();
    let total_rounds = cfg.resolved_rounds(total_examples, shards.len());
    let pool = if opts.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(opts.threads)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let mut global = GlobalState::new(model0);
    let mut records = Vec::with_capacity(total_rounds);
    let mut signals: Vec<f64> = Vec::with_capacity(total_rounds);
    let has_bn = global.model.has_batch_norm();

    for t in 1..=total_rounds {
        let lr = lr_at(t, total_rounds, cfg);
        let participants = sample_participants(
            shards.len(),
            cfg.participation_rate,
            seed::derive_seed(cfg.seed, Purpose::Participation, t as u64, 0),
        )?;
        let freeze = fixbn.should_freeze(t, total_rounds, signals.last().copied())?;
        if freeze && has_bn && global.frozen_stats.is_none() {
            enter_stage_two(&mut global)?;
        }
        let ctx = RoundContext {
            round: t,
            lr,
            freeze_active: global.frozen_stats.is_some(),
        };

        let shards_ro: &[ClientShard] = shards;
        let server_momentum = global.momentum.as_ref();
        let global_model = &global.model;
        let work = |&m: &usize| client_update(global_model, &shards_ro[m], data, cfg, ctx, server_momentum);
        let results: Vec<Result<ClientReport>> = match &pool {
            Some(pool) => pool.install(|| participants.par_iter().map(work).collect()),
            None => participants.iter().map(work).collect(),
        };
        let reports = results.into_iter().collect::<Result<Vec<_>>>()?;

        let prev_stats = global.model.running_stats();
        let next_model = aggregate(&reports)?;
        match cfg.momentum_mode {
            MomentumMode::GlobalMaintained => {
                global.momentum = Some(crate::policy::aggregate_momentum(&reports)?);
            }
            MomentumMode::LocalMaintained => {
                for r in &reports {
                    shards[r.client_id].momentum = r.momentum.clone();
                }
            }
            MomentumMode::Reinit => {}
        }

        let (sorted, weights) = sorted_with_weights(&reports)?;
        let avg_local_loss = sorted.iter().zip(&weights).map(|(r, w)| w * r.final_loss).sum();
        let mean_local_deviation = if has_bn {
            let mut acc = 0.0;
            for r in &sorted {
                acc += local_deviation(r.last_batch_stats(), &prev_stats)?;
            }
            acc / sorted.len() as f64
        } else {
            0.0
        };
        signals.push(deviation_signal(&reports, &prev_stats)?);

        global.model = next_model;
        global.round = t;
        let global_stat_drift = l1_drift(&prev_stats, &global.model.running_stats())?;
        let test_accuracy = evaluate(&global.model, test)?;
        records.push(RoundRecord {
            round: t,
            test_accuracy,
            avg_local_loss,
            global_stat_drift,
            mean_local_deviation,
            windowed_stat_variance: windowed_variance(&signals, fixbn.window()),
            lr,
            frozen: ctx.freeze_active,
            participants: participants.len(),
        });
    }
    Ok((global, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, Normalizer};

    fn cfg() -> FedConfig {
        FedConfig::default()
    }

    #[test]
    fn lr_schedule_examples() {
        let c = cfg();
        assert_eq!(lr_at(49, 100, &c), 0.02);
        assert!((lr_at(50, 100, &c) - 0.002).abs() < 1e-18);
        assert!((lr_at(74, 100, &c) - 0.002).abs() < 1e-18);
        assert!((lr_at(75, 100, &c) - 0.0002).abs() < 1e-19);
        assert_eq!(
            lr_at(
                1,
                100,
                &FedConfig {
                    lr_decay_points: vec![],
                    ..c.clone()
                }
            ),
            0.02
        );
        let c7 = FedConfig {
            lr_decay_points: vec![0.07],
            ..c
        };
        assert_eq!(lr_at(6, 100, &c7), 0.02);
        assert!(lr_at(7, 100, &c7) < 0.02);
    }

    #[test]
    fn participant_sampling() {
        assert_eq!(sample_participants(5, 1.0, 3).unwrap(), vec![0, 1, 2, 3, 4]);
        let ids = sample_participants(10, 0.2, 3).unwrap();
        assert_eq!(ids.len(), 2);
        assert_ne!(ids[0], ids[1]);
        assert_eq!(sample_participants(3, 0.1, 3).unwrap().len(), 1);
        assert!(sample_participants(3, 0.0, 3).is_err());
        assert!(sample_participants(3, 1.5, 3).is_err());
        assert_eq!(
            sample_participants(10, 0.3, 9).unwrap(),
            sample_participants(10, 0.3, 9).unwrap()
        );
    }

    #[test]
    fn batch_stream_cycles_epochs() {
        let shard = ClientShard::new(0, vec![10, 11, 12, 13, 14], 1);
        let mut s = BatchStream::new(&shard, 2);
        let mut seen: Vec<usize> = (0..5).flat_map(|k| s.batch(k)).collect();
        // Ten positions cover two full epochs.
        seen.sort();
        assert_eq!(seen, vec![10, 10, 11, 11, 12, 12, 13, 13, 14, 14]);
        let mut big = BatchStream::new(&shard, 50);
        let mut b = big.batch(3);
        b.sort();
        assert_eq!(b, vec![10, 11, 12, 13, 14]);
    }

    #[test]
    fn fixed_epoch_budget() {
        // 20 steps × 20 batch × 5 clients × 3200 rounds = 128 epochs of 50 000 examples.
        let c = FedConfig {
            local_steps: 20,
            batch_size: 20,
            budget_mode: BudgetMode::FixedEpochs,
            budget_epochs: 128.0,
            ..cfg()
        };
        assert_eq!(c.resolved_rounds(50_000, 5), 3200);
        assert_eq!(
            FedConfig {
                budget_mode: BudgetMode::FixedRounds,
                rounds: 7,
                ..c
            }
            .resolved_rounds(50_000, 5),
            7
        );
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(FedConfig {
            lr_decay_points: vec![0.75, 0.5],
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(FedConfig {
            local_steps: 0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(FedConfig {
            participation_rate: 0.0,
            ..cfg()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_rounds_returns_initial_model() {
        let data = crate::data::gen_synthetic(2, 2, 10, 3.0, 1).unwrap();
        let model = ModelSpec::mlp(2, vec![4], 2, Normalizer::Batch)
            .build(&mut seed::rng(1))
            .unwrap();
        let mut shards = vec![ClientShard::new(0, (0..20).collect(), 1)];
        let c = FedConfig { rounds: 0, ..cfg() };
        let (state, records) = run_training(
            model.clone(),
            &mut shards,
            &data,
            &data,
            &c,
            &mut FixBnPolicy::off(),
            RunOptions::default(),
        )
        .unwrap();
        assert!(records.is_empty());
        assert_eq!(state.round, 0);
        assert_eq!(state.model.flat_params(), model.flat_params());
    }

    #[test]
    fn evaluate_constant_predictor() {
        let data = crate::data::gen_synthetic(3, 2, 5, 3.0, 1).unwrap();
        let single: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == 2).collect();
        let (x, y) = data.batch(&single).unwrap();
        let test = Dataset::new(x, y, 3).unwrap();
        let mut model = ModelSpec::mlp(2, vec![], 3, Normalizer::None)
            .build(&mut seed::rng(1))
            .unwrap();
        if let crate::model::Layer::Dense(d) = &mut model.layers[0] {
            d.weight.fill(0.0);
            d.bias = Tensor::vector(vec![0.0, 0.0, 1.0]);
        }
        assert_eq!(evaluate(&model, &test).unwrap(), 1.0);
    }
}
