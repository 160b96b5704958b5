use std::collections::BTreeSet;

use proptest::prelude::*;
use superfed::data::{
    self, apply_noise, build_transition, LabeledDataset, NoiseKind, PartitionScheme,
    PartitionSpec,
};
use superfed::nn::Matrix;
use superfed::rng::{stream, Purpose};

fn labelled(labels: Vec<usize>, classes: usize) -> LabeledDataset {
    let n = labels.len();
    let features = Matrix::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
    LabeledDataset::new(features, labels, classes).unwrap()
}

fn balanced(classes: usize, per_class: usize) -> LabeledDataset {
    labelled((0..classes * per_class).map(|i| i % classes).collect(), classes)
}

#[test]
fn pathological_fifty_clients_get_960_and_two_labels() {
    let ds = balanced(10, 4800);
    let spec = PartitionSpec {
        scheme: PartitionScheme::Pathological { shards_per_client: 2 },
        client_count: 50,
    };
    let p = data::partition(&ds, &spec, &mut stream(0, Purpose::Partition, 0, 0)).unwrap();
    assert!(p.dropped.is_empty());
    for (i, c) in p.clients.iter().enumerate() {
        assert_eq!(c.len(), 960, "client {i}");
        let labels: BTreeSet<usize> = c.iter().map(|&j| ds.labels()[j]).collect();
        assert!(labels.len() <= 2, "client {i} has labels {labels:?}");
    }
}

#[test]
fn dirichlet_with_huge_alpha_is_near_uniform() {
    let ds = balanced(10, 1000);
    let spec = PartitionSpec {
        scheme: PartitionScheme::Dirichlet { alpha: 1e6 },
        client_count: 10,
    };
    let p = data::partition(&ds, &spec, &mut stream(0, Purpose::Partition, 0, 0)).unwrap();
    for (i, c) in p.clients.iter().enumerate() {
        let mut hist = [0usize; 10];
        for &j in c {
            hist[ds.labels()[j]] += 1;
        }
        for (k, &h) in hist.iter().enumerate() {
            let share = h as f64 / c.len() as f64;
            assert!((share - 0.1).abs() <= 0.05, "client {i} class {k}: {share}");
        }
    }
}

#[test]
fn dirichlet_with_tiny_alpha_concentrates() {
    let ds = balanced(10, 1000);
    let spec = PartitionSpec {
        scheme: PartitionScheme::Dirichlet { alpha: 0.01 },
        client_count: 10,
    };
    let p = data::partition(&ds, &spec, &mut stream(3, Purpose::Partition, 0, 0)).unwrap();
    // the first client draws from full pools, so its mass sits on few classes
    let mut hist = [0usize; 10];
    for &j in &p.clients[0] {
        hist[ds.labels()[j]] += 1;
    }
    assert!(*hist.iter().max().unwrap() as f64 / p.clients[0].len() as f64 > 0.5);
}

#[test]
fn dirichlet_draws_live_on_the_simplex() {
    let mut rng = stream(1, Purpose::Partition, 0, 0);
    for &alpha in &[1e-3, 0.1, 1.0, 10.0, 1e6] {
        for _ in 0..50 {
            let p = data::sample_dirichlet(alpha, 7, &mut rng).unwrap();
            assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn dirichlet_mean_matches_monte_carlo() {
    // each coordinate has mean 1/k whatever alpha is
    let mut rng = stream(2, Purpose::Partition, 0, 0);
    let k = 5;
    let mut acc = vec![0.0; k];
    let draws = 20_000;
    for _ in 0..draws {
        for (a, p) in acc.iter_mut().zip(data::sample_dirichlet(0.5, k, &mut rng).unwrap()) {
            *a += p;
        }
    }
    for a in acc {
        assert!((a / draws as f64 - 0.2).abs() < 0.01);
    }
}

#[test]
fn transition_rows_are_stochastic_across_grid() {
    for kind in [NoiseKind::None, NoiseKind::Pair, NoiseKind::Symmetric] {
        for &eps in &[0.0, 0.1, 0.2, 0.4, 0.6, 0.9, 0.999] {
            for n in [2, 3, 5, 10, 100] {
                let t = build_transition(kind, eps, n).unwrap();
                for i in 0..n {
                    let s: f64 = t.row(i).iter().sum();
                    assert!((s - 1.0).abs() <= 1e-12, "{kind:?} eps={eps} n={n} row {i}: {s}");
                    assert!(t.row(i).iter().all(|&p| p >= 0.0));
                }
            }
        }
    }
}

#[test]
fn transition_shapes_for_pair_and_symmetric() {
    let pair = build_transition(NoiseKind::Pair, 0.1, 10).unwrap();
    let sym = build_transition(NoiseKind::Symmetric, 0.6, 10).unwrap();
    for i in 0..10 {
        for j in 0..10 {
            let p = if i == j {
                0.9
            } else if j == (i + 1) % 10 {
                0.1
            } else {
                0.0
            };
            assert_eq!(pair.get(i, j), p);
            let s = if i == j { 1.0 - 0.6 } else { 0.6 / 9.0 };
            assert_eq!(sym.get(i, j), s);
        }
    }
}

#[test]
fn empirical_flip_rate_matches_ratio() {
    let labels: Vec<usize> = (0..100_000).map(|i| i % 10).collect();
    for (kind, eps) in [(NoiseKind::Pair, 0.1), (NoiseKind::Pair, 0.4), (NoiseKind::Symmetric, 0.2), (NoiseKind::Symmetric, 0.6)] {
        let t = build_transition(kind, eps, 10).unwrap();
        let noisy = apply_noise(&labels, &t, &mut stream(4, Purpose::LabelNoise, 0, 0)).unwrap();
        let rate = labels.iter().zip(&noisy).filter(|(a, b)| a != b).count() as f64 / labels.len() as f64;
        assert!((rate - eps).abs() <= 0.01, "{kind:?} {eps}: {rate}");
    }
}

#[test]
fn symmetric_flips_spread_evenly() {
    let labels = vec![3usize; 90_000];
    let t = build_transition(NoiseKind::Symmetric, 0.6, 10).unwrap();
    let noisy = apply_noise(&labels, &t, &mut stream(5, Purpose::LabelNoise, 0, 0)).unwrap();
    let mut hist = [0usize; 10];
    for y in noisy {
        hist[y] += 1;
    }
    for (j, &h) in hist.iter().enumerate() {
        let want = if j == 3 { 0.4 } else { 0.6 / 9.0 };
        assert!((h as f64 / 90_000.0 - want).abs() < 0.01, "class {j}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pathological_is_disjoint_and_exact(
        classes in 2usize..8,
        k in 1usize..12,
        shards in 1usize..4,
        extra in 0usize..40,
        seed in any::<u64>()
    ) {
        let n = classes * k * shards * 3 + extra;
        let ds = labelled((0..n).map(|i| (i * 7) % classes).collect(), classes);
        let spec = PartitionSpec { scheme: PartitionScheme::Pathological { shards_per_client: shards }, client_count: k };
        let p = data::partition(&ds, &spec, &mut stream(seed, Purpose::Partition, 0, 0)).unwrap();
        let shard = n / (k * shards);
        let mut seen = BTreeSet::new();
        for c in &p.clients {
            prop_assert_eq!(c.len(), shard * shards);
            prop_assert!(c.windows(2).all(|w| w[0] < w[1]));
            for &i in c {
                prop_assert!(seen.insert(i));
            }
        }
        for &i in &p.dropped {
            prop_assert!(seen.insert(i));
        }
        prop_assert_eq!(seen.len(), n);
    }

    #[test]
    fn dirichlet_is_disjoint_and_fills_quota(
        classes in 2usize..6,
        k in 1usize..10,
        n in 20usize..300,
        alpha in 0.05f64..50.0,
        seed in any::<u64>()
    ) {
        prop_assume!(n >= k);
        let ds = labelled((0..n).map(|i| (i * 5 + i / 3) % classes).collect(), classes);
        let spec = PartitionSpec { scheme: PartitionScheme::Dirichlet { alpha }, client_count: k };
        let p = data::partition(&ds, &spec, &mut stream(seed, Purpose::Partition, 0, 0)).unwrap();
        let mut seen = BTreeSet::new();
        for c in &p.clients {
            prop_assert_eq!(c.len(), n / k);
            for &i in c {
                prop_assert!(seen.insert(i));
            }
        }
        for &i in &p.dropped {
            prop_assert!(seen.insert(i));
        }
        prop_assert_eq!(seen.len(), n);
    }

    #[test]
    fn split_is_disjoint_and_sized(n in 2usize..400, f in 0.01f64..0.99, seed in any::<u64>()) {
        let idx: Vec<usize> = (100..100 + n).collect();
        let (train, test) = data::split_indices(&idx, f, &mut stream(seed, Purpose::TrainTestSplit, 0, 0)).unwrap();
        let want = ((f * n as f64).ceil() as usize).clamp(1, n - 1);
        prop_assert_eq!(test.len(), want);
        prop_assert_eq!(train.len() + test.len(), n);
        let all: BTreeSet<usize> = train.iter().chain(&test).copied().collect();
        prop_assert_eq!(all, idx.iter().copied().collect::<BTreeSet<_>>());
    }

    #[test]
    fn zero_noise_never_flips(labels in prop::collection::vec(0usize..6, 1..200), seed in any::<u64>()) {
        for kind in [NoiseKind::Pair, NoiseKind::Symmetric] {
            let t = build_transition(kind, 0.0, 6).unwrap();
            let out = apply_noise(&labels, &t, &mut stream(seed, Purpose::LabelNoise, 0, 0)).unwrap();
            prop_assert_eq!(&out, &labels);
        }
    }
}
