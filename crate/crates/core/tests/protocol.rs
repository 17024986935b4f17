//! Round protocol: client steps, momentum bookkeeping, aggregation order.

use fedbn_core::data::{gen_synthetic, Dataset};
use fedbn_core::fed::{
    aggregate, client_update, global_step, run_training, sample_participants, BatchStream, FedConfig, RoundContext,
    RunOptions,
};
use fedbn_core::model::{Model, ModelSpec, Normalizer};
use fedbn_core::nn::{sgd_step, softmax_cross_entropy, MomentumBuffer};
use fedbn_core::partition::{make_shards, ClientShard, PartitionSpec, Scheme};
use fedbn_core::policy::{FixBnPolicy, MomentumMode};
use fedbn_core::seed::{self, Purpose};

fn setup(normalizer: Normalizer) -> (Dataset, Model) {
    let data = gen_synthetic(3, 2, 40, 3.0, 21).unwrap();
    let model = ModelSpec::mlp(2, vec![6], 3, normalizer)
        .build(&mut seed::rng(22))
        .unwrap();
    (data, model)
}

fn bits(m: &Model) -> Vec<u64> {
    let stats = m.running_stats();
    m.flat_params()
        .into_iter()
        .chain(
            stats
                .iter()
                .flat_map(|s| s.mean.data().iter().chain(s.var.data()).copied()),
        )
        .map(f64::to_bits)
        .collect()
}

#[test]
fn three_local_steps_replay_sequentially() {
    let (data, model) = setup(Normalizer::Batch);
    let shard = ClientShard::new(0, (0..data.len()).step_by(2).collect(), 23);
    let cfg = FedConfig {
        rounds: 4,
        local_steps: 3,
        batch_size: 9,
        ..FedConfig::default()
    };
    let ctx = RoundContext {
        round: 3,
        lr: 0.07,
        freeze_active: false,
    };
    let report = client_update(&model, &shard, &data, &cfg, ctx, None).unwrap();

    let mut replay = model.clone();
    let mut velocity = MomentumBuffer::zeros_like(replay.params());
    let mut stream = BatchStream::new(&shard, cfg.batch_size);
    let mut last_loss = 0.0;
    for k in 0..3 {
        let (x, y) = data.batch(&stream.batch(global_step(3, 3, k))).unwrap();
        let (logits, trace) = replay.forward_train(&x).unwrap();
        let loss = softmax_cross_entropy(&logits, &y).unwrap();
        let (_, grads) = replay.backward(&trace, &loss.grad).unwrap();
        sgd_step(
            &mut replay.params_mut(),
            &grads,
            &mut velocity,
            0.07,
            cfg.momentum_coef,
            cfg.weight_decay,
        )
        .unwrap();
        assert_eq!(report.stats_trace[k].len(), trace.norm_stats.len());
        last_loss = loss.loss;
    }
    assert_eq!(bits(&report.model), bits(&replay));
    assert_eq!(report.final_loss.to_bits(), last_loss.to_bits());
    assert_eq!(report.stats_trace.len(), 3);
}

#[test]
fn round_boundary_velocity_follows_centralized_trajectory() {
    let (data, model) = setup(Normalizer::Group(2));
    let shard = ClientShard::new(0, (0..data.len()).collect(), 24);
    let cfg = FedConfig {
        rounds: 6,
        local_steps: 2,
        batch_size: 16,
        lr_decay_points: vec![],
        momentum_mode: MomentumMode::LocalMaintained,
        ..FedConfig::default()
    };
    let mut central = model.clone();
    let mut velocity = MomentumBuffer::zeros_like(central.params());
    let mut stream = BatchStream::new(&shard, cfg.batch_size);
    for rounds in 1..=cfg.rounds {
        for k in 0..cfg.local_steps {
            let (x, y) = data
                .batch(&stream.batch(global_step(rounds, cfg.local_steps, k)))
                .unwrap();
            let (logits, trace) = central.forward_train(&x).unwrap();
            let loss = softmax_cross_entropy(&logits, &y).unwrap();
            let (_, grads) = central.backward(&trace, &loss.grad).unwrap();
            sgd_step(
                &mut central.params_mut(),
                &grads,
                &mut velocity,
                cfg.base_lr,
                cfg.momentum_coef,
                cfg.weight_decay,
            )
            .unwrap();
        }
        let mut shards = vec![shard.clone()];
        let truncated = FedConfig { rounds, ..cfg.clone() };
        run_training(
            model.clone(),
            &mut shards,
            &data,
            &data,
            &truncated,
            &mut FixBnPolicy::off(),
            RunOptions::default(),
        )
        .unwrap();
        let kept = shards[0].momentum.as_ref().unwrap();
        for (a, b) in kept.velocity.iter().zip(&velocity.velocity) {
            assert!(a.bitwise_eq(b), "velocity differs after round {rounds}");
        }
    }
}

#[test]
fn global_and_local_momentum_coincide_for_one_client() {
    let (data, model) = setup(Normalizer::Batch);
    let run = |mode| {
        let mut shards = vec![ClientShard::new(0, (0..data.len()).collect(), 25)];
        let cfg = FedConfig {
            rounds: 8,
            local_steps: 3,
            batch_size: 10,
            momentum_mode: mode,
            ..FedConfig::default()
        };
        run_training(
            model.clone(),
            &mut shards,
            &data,
            &data,
            &cfg,
            &mut FixBnPolicy::off(),
            RunOptions::default(),
        )
        .unwrap()
        .0
    };
    let local = run(MomentumMode::LocalMaintained);
    let global = run(MomentumMode::GlobalMaintained);
    assert_eq!(bits(&local.model), bits(&global.model));
    assert!(global.momentum.is_some());
}

#[test]
fn absent_clients_keep_their_velocity() {
    let (data, model) = setup(Normalizer::Layer);
    let spec = PartitionSpec {
        scheme: Scheme::Iid,
        clients: 4,
        seed: 26,
    };
    let cfg = FedConfig {
        rounds: 5,
        local_steps: 2,
        batch_size: 8,
        participation_rate: 0.5,
        momentum_mode: MomentumMode::LocalMaintained,
        seed: 27,
        ..FedConfig::default()
    };
    let shards0 = make_shards(&data, &spec, cfg.seed).unwrap();
    let mut previous: Vec<Option<MomentumBuffer>> = vec![None; 4];
    for rounds in 1..=cfg.rounds {
        let mut shards = shards0.clone();
        let c = FedConfig {
            rounds,
            lr_decay_points: vec![],
            ..cfg.clone()
        };
        run_training(
            model.clone(),
            &mut shards,
            &data,
            &data,
            &c,
            &mut FixBnPolicy::off(),
            RunOptions::default(),
        )
        .unwrap();
        let present = sample_participants(
            4,
            0.5,
            seed::derive_seed(cfg.seed, Purpose::Participation, rounds as u64, 0),
        )
        .unwrap();
        for (m, shard) in shards.iter().enumerate() {
            let now = shard.momentum.as_ref();
            if present.contains(&m) {
                assert!(now.is_some());
            } else {
                match (&previous[m], now) {
                    (None, None) => {}
                    (Some(a), Some(b)) => assert!(a.velocity.iter().zip(&b.velocity).all(|(x, y)| x.bitwise_eq(y))),
                    _ => panic!("client {m} velocity appeared or vanished while absent"),
                }
            }
            previous[m] = now.cloned();
        }
    }
}

#[test]
fn aggregation_ignores_report_order() {
    let (data, model) = setup(Normalizer::Batch);
    let cfg = FedConfig {
        local_steps: 2,
        batch_size: 6,
        ..FedConfig::default()
    };
    let ctx = RoundContext {
        round: 1,
        lr: 0.1,
        freeze_active: false,
    };
    let shards: Vec<ClientShard> = (0..4)
        .map(|m| ClientShard::new(m, (0..data.len()).filter(|i| i % 4 == m || i % 7 == m).collect(), 28))
        .collect();
    let mut reports: Vec<_> = shards
        .iter()
        .map(|s| client_update(&model, s, &data, &cfg, ctx, None).unwrap())
        .collect();
    let reference = bits(&aggregate(&reports).unwrap());
    let mut rng = seed::rng(29);
    for _ in 0..10 {
        rand::seq::SliceRandom::shuffle(reports.as_mut_slice(), &mut rng);
        assert_eq!(bits(&aggregate(&reports).unwrap()), reference);
    }
}

#[test]
fn one_client_aggregate_is_that_client() {
    let (data, model) = setup(Normalizer::Batch);
    let shard = ClientShard::new(3, (0..data.len()).collect(), 30);
    let ctx = RoundContext {
        round: 1,
        lr: 0.1,
        freeze_active: false,
    };
    let report = client_update(&model, &shard, &data, &FedConfig::default(), ctx, None).unwrap();
    assert_eq!(
        bits(&aggregate(std::slice::from_ref(&report)).unwrap()),
        bits(&report.model)
    );
}
