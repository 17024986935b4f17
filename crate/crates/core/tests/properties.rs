//! Property-based checks: serialization round trips, diagnostics against
//! scalar loops, partition invariants, policy latching.

use proptest::prelude::*;

use fedbn_core::data::{parse_csv, write_csv, Dataset};
use fedbn_core::diagnostics::{l1_drift, read_records, windowed_variance, write_records, RoundRecord};
use fedbn_core::model::{ModelSpec, Normalizer};
use fedbn_core::model_io::{decode, encode, ModelFile};
use fedbn_core::norm::RunningStats;
use fedbn_core::partition::{partition, read_manifest, write_manifest, PartitionSpec, Scheme};
use fedbn_core::policy::{FixBnKind, FixBnPolicy};
use fedbn_core::seed;
use fedbn_core::Tensor;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6..1e6f64,
        -1.0..1.0f64,
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
        Just(1e300)
    ]
}

fn dataset() -> impl Strategy<Value = Dataset> {
    (1usize..12, 1usize..5).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(finite(), n * d),
            prop::collection::vec(0usize..6, n),
        )
            .prop_map(move |(f, labels)| {
                let k = labels.iter().max().unwrap() + 1;
                Dataset::new(Tensor::new(vec![n, d], f).unwrap(), labels, k).unwrap()
            })
    })
}

fn record() -> impl Strategy<Value = RoundRecord> {
    (
        1usize..10_000,
        0.0..=1.0f64,
        finite(),
        0.0..1e3f64,
        0.0..1e3f64,
        prop::option::of(0.0..1.0f64),
        0.0..1.0f64,
        any::<bool>(),
        1usize..100,
    )
        .prop_map(
            |(round, acc, loss, drift, dev, var, lr, frozen, participants)| RoundRecord {
                round,
                test_accuracy: acc,
                avg_local_loss: loss,
                global_stat_drift: drift,
                mean_local_deviation: dev,
                windowed_stat_variance: var,
                lr,
                frozen,
                participants,
            },
        )
}

fn normalizer() -> impl Strategy<Value = Normalizer> {
    prop_oneof![
        Just(Normalizer::None),
        Just(Normalizer::Batch),
        Just(Normalizer::Group(2)),
        Just(Normalizer::Layer),
        Just(Normalizer::Instance),
    ]
}

fn stats(layers: usize, channels: usize) -> impl Strategy<Value = Vec<RunningStats>> {
    prop::collection::vec(
        (
            prop::collection::vec(-5.0..5.0f64, channels),
            prop::collection::vec(0.0..5.0f64, channels),
        ),
        layers,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(m, s)| RunningStats {
                mean: Tensor::vector(m),
                var: Tensor::vector(s),
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn csv_round_trip(data in dataset()) {
        let mut buf = Vec::new();
        write_csv(&data, &mut buf).unwrap();
        let back = parse_csv(buf.as_slice(), "mem").unwrap();
        prop_assert!(back.features.bitwise_eq(&data.features));
        prop_assert_eq!(back.labels, data.labels);
        prop_assert_eq!(back.class_count, data.class_count);
    }

    #[test]
    fn records_round_trip(records in prop::collection::vec(record(), 0..20)) {
        let mut buf = Vec::new();
        write_records(&records, &mut buf).unwrap();
        let back = read_records(buf.as_slice(), "mem").unwrap();
        prop_assert_eq!(back.len(), records.len());
        for (a, b) in back.iter().zip(&records) {
            prop_assert_eq!(a.round, b.round);
            prop_assert_eq!(a.test_accuracy.to_bits(), b.test_accuracy.to_bits());
            prop_assert_eq!(a.avg_local_loss.to_bits(), b.avg_local_loss.to_bits());
            prop_assert_eq!(a.global_stat_drift.to_bits(), b.global_stat_drift.to_bits());
            prop_assert_eq!(a.mean_local_deviation.to_bits(), b.mean_local_deviation.to_bits());
            prop_assert_eq!(a.windowed_stat_variance.map(f64::to_bits), b.windowed_stat_variance.map(f64::to_bits));
            prop_assert_eq!(a.lr.to_bits(), b.lr.to_bits());
            prop_assert_eq!(a.frozen, b.frozen);
            prop_assert_eq!(a.participants, b.participants);
        }
    }

    #[test]
    fn manifest_round_trip(n in 1usize..200, m in 1usize..8, s in any::<u64>()) {
        let m = m.min(n);
        let labels = (0..n).map(|i| i % 3).collect();
        let data = Dataset::new(Tensor::zeros(&[n, 1]), labels, 3).unwrap();
        let spec = PartitionSpec { scheme: Scheme::Iid, clients: m, seed: s };
        let shards = partition(&data, &spec).unwrap();
        let mut buf = Vec::new();
        write_manifest(&shards, &mut buf).unwrap();
        prop_assert_eq!(read_manifest(buf.as_slice()).unwrap(), shards);
    }

    #[test]
    fn model_round_trip(norm in normalizer(), hidden in prop::collection::vec(1usize..5, 0..3), s in any::<u64>()) {
        let hidden: Vec<usize> = hidden.into_iter().map(|h| 2 * h).collect();
        let model = ModelSpec::mlp(3, hidden, 2, norm).build(&mut seed::rng(s)).unwrap();
        let file = ModelFile { input_shape: vec![3], model };
        let bytes = encode(&file);
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(&back.input_shape, &file.input_shape);
        prop_assert_eq!(encode(&back), bytes);
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5);
        prop_assert!(back.model.forward_eval(&x).unwrap().bitwise_eq(&file.model.forward_eval(&x).unwrap()));
    }

    #[test]
    fn windowed_variance_matches_moments(history in prop::collection::vec(-10.0..10.0f64, 0..40), w in 1usize..10) {
        match windowed_variance(&history, w) {
            None => prop_assert!(history.len() < w),
            Some(v) => {
                let tail = &history[history.len() - w..];
                let n = w as f64;
                let mean = tail.iter().sum::<f64>() / n;
                let second = tail.iter().map(|x| x * x).sum::<f64>() / n;
                prop_assert!(v >= 0.0);
                prop_assert!((v - (second - mean * mean)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn l1_drift_matches_scalar_loop((a, b) in (1usize..4, 1usize..5).prop_flat_map(|(l, c)| (stats(l, c), stats(l, c)))) {
        let mut want = 0.0;
        for (x, y) in a.iter().zip(&b) {
            for i in 0..x.mean.len() {
                want += (x.mean.data()[i] - y.mean.data()[i]).abs();
                want += (x.var.data()[i] - y.var.data()[i]).abs();
            }
        }
        let got = l1_drift(&a, &b).unwrap();
        prop_assert!((got - want).abs() <= 1e-12 * want.max(1.0));
        prop_assert_eq!(l1_drift(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn partitions_cover_disjointly(
        k in 2usize..8,
        m in 1usize..6,
        per_class in 1usize..15,
        choice in 0usize..3,
        alpha in 0.05..5.0f64,
        s in any::<u64>(),
    ) {
        let n = k * per_class;
        prop_assume!(m <= n && (choice != 2 || per_class >= m));
        let labels = (0..n).map(|i| i % k).collect();
        let data = Dataset::new(Tensor::zeros(&[n, 1]), labels, k).unwrap();
        let scheme = match choice {
            0 => Scheme::Iid,
            1 => Scheme::Dirichlet { alpha },
            _ => Scheme::Shards { class_fraction: 1.0 },
        };
        let spec = PartitionSpec { scheme, clients: m, seed: s };
        let shards = partition(&data, &spec).unwrap();
        prop_assert_eq!(shards.len(), m);
        prop_assert!(shards.iter().all(|s| !s.is_empty()));
        let mut all: Vec<usize> = shards.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn freezing_latches(
        kind in 0usize..4,
        total in 1usize..60,
        signals in prop::collection::vec(0.0..1.0f64, 60),
        f in 0.0..=1.0f64,
        w in 2usize..6,
        tau in 1e-6..0.2f64,
    ) {
        let kind = match kind {
            0 => FixBnKind::Off,
            1 => FixBnKind::FixedFraction(f),
            2 => FixBnKind::FixedRound((total / 2).max(1)),
            _ => FixBnKind::SlidingWindow { window: w, tau },
        };
        let mut policy = FixBnPolicy::new(kind).unwrap();
        let mut seen = false;
        for t in 1..=total {
            let signal = (t > 1).then(|| signals[t - 2]);
            let now = policy.should_freeze(t, total, signal).unwrap();
            prop_assert!(!seen || now);
            seen = now;
        }
        if matches!(kind, FixBnKind::Off) {
            prop_assert!(!seen);
        }
    }
}
