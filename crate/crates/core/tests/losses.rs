mod common;

use amde::diffcore::{grad_check, Tensor};
use amde::losses::{
    adaptive_k, class_entropy, hardest_neighbours, pairwise_sqdist, softmax, AnnConfig,
    BatchEmbeddings, MetricLoss, Rounding,
};
use common::{
    ann_oracle, batch, contrastive_oracle, entropy_oracle, pk_labels, rng, rows, sqdist, uniform,
    xent_oracle, K_TABLE,
};
use proptest::prelude::*;

#[test]
fn pairwise_distances() {
    let d = pairwise_sqdist(&Tensor::new(vec![3, 2], vec![0.0, 0.0, 3.0, 4.0, 0.0, 0.0]).unwrap())
        .unwrap();
    assert_eq!(d.get(0, 1), 25.0);
    assert_eq!(d.get(0, 2), 0.0);
    let mut r = rng(40);
    let x = uniform(&mut r, 15, -2.0, 2.0);
    let d = pairwise_sqdist(&Tensor::new(vec![5, 3], x.clone()).unwrap()).unwrap();
    let pts = rows(&x, 5);
    for i in 0..5 {
        for j in 0..5 {
            assert!((d.get(i, j) - sqdist(&pts[i], &pts[j])).abs() <= 1e-12);
        }
    }
}

// Hand values to four places.
#[allow(clippy::approx_constant)]
#[test]
fn entropy_and_k_reference_values() {
    let cfg = AnnConfig::default();
    assert_eq!(class_entropy(&[0.0, 1.0, 0.0, 0.0]).unwrap(), 0.0);
    assert!((class_entropy(&[0.25; 4]).unwrap() - 1.3863).abs() < 1e-4);
    assert!((class_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - 0.6931).abs() < 1e-4);
    assert_eq!(adaptive_k(0.0, &cfg).unwrap(), 1);
    assert_eq!(adaptive_k(1.3863, &cfg).unwrap(), 2);
    assert_eq!(adaptive_k(0.4, &cfg).unwrap(), 1);
}

#[test]
fn k_table_under_both_roundings() {
    for (h, k0, ceil, floor) in K_TABLE {
        let c = AnnConfig {
            k0,
            ..AnnConfig::default()
        };
        let f = AnnConfig {
            k0,
            rounding: Rounding::Floor,
            ..AnnConfig::default()
        };
        assert_eq!(adaptive_k(h, &c).unwrap(), ceil, "ceil H={h} K0={k0}");
        assert_eq!(adaptive_k(h, &f).unwrap(), floor, "floor H={h} K0={k0}");
    }
}

#[test]
fn ann_degenerate_geometries() {
    let cfg = AnnConfig::default();
    let b = BatchEmbeddings {
        embeddings: Tensor::full(vec![6, 3], 0.7),
        logits: Tensor::zeros(vec![6, 2]),
        labels: pk_labels(2, 3),
    };
    assert!((b.ann_loss(&cfg).unwrap() - 6.0 * cfg.margin).abs() < 1e-15);
    assert!((b.batch_hard_triplet(cfg.margin).unwrap() - 6.0 * cfg.margin).abs() < 1e-15);

    let mut emb = Vec::new();
    for i in 0..6 {
        let x = if i < 3 { 0.0 } else { 10.0 };
        emb.extend([x + 0.01 * i as f64, 0.0]);
    }
    let b = BatchEmbeddings {
        embeddings: Tensor::new(vec![6, 2], emb).unwrap(),
        logits: Tensor::zeros(vec![6, 2]),
        labels: pk_labels(2, 3),
    };
    assert_eq!(b.ann_loss(&cfg).unwrap(), 0.0);
}

#[test]
fn ann_matches_enumeration_oracle() {
    let cfg = AnnConfig::default();
    for seed in 0..50 {
        let b = batch(seed, 2, 3, 4, 2, 3.0);
        let ks: Vec<usize> = (0..6)
            .map(|a| (entropy_oracle(b.logits.row(a)).ceil() as usize).max(cfg.k0))
            .collect();
        let want = ann_oracle(&rows(b.embeddings.data(), 6), &b.labels, &ks, cfg.margin);
        assert!(
            (b.ann_loss(&cfg).unwrap() - want).abs() <= 1e-12,
            "seed {seed}"
        );
    }
    // Larger batches with more classes exercise K > 1 and clamping.
    for seed in 0..50 {
        let b = batch(100 + seed, 4, 4, 5, 8, 0.5);
        let floor = AnnConfig {
            rounding: Rounding::Floor,
            ..cfg.clone()
        };
        for c in [&cfg, &floor] {
            let ks: Vec<usize> = (0..16)
                .map(|a| {
                    let h = entropy_oracle(b.logits.row(a));
                    let r = if c.rounding == Rounding::Ceil {
                        h.ceil()
                    } else {
                        h.floor()
                    };
                    (r as usize).max(c.k0)
                })
                .collect();
            let want = ann_oracle(&rows(b.embeddings.data(), 16), &b.labels, &ks, c.margin);
            assert!((b.ann_loss(c).unwrap() - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn triplet_and_contrastive_match_oracles() {
    for seed in 0..50 {
        let b = batch(200 + seed, 4, 2, 3, 4, 1.0);
        let pts = rows(b.embeddings.data(), 8);
        let want = ann_oracle(&pts, &b.labels, &[1; 8], 0.3);
        assert!((b.batch_hard_triplet(0.3).unwrap() - want).abs() <= 1e-12);

        let b = batch(300 + seed, 2, 2, 3, 2, 1.0);
        let pts = rows(b.embeddings.data(), 4);
        let want = contrastive_oracle(&pts, &b.labels, 1.5);
        assert!((b.contrastive_loss(1.5).unwrap() - want).abs() <= 1e-12);
    }
}

#[test]
fn contrastive_pair_cases() {
    let same = BatchEmbeddings {
        embeddings: Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap(),
        logits: Tensor::zeros(vec![2, 2]),
        labels: vec![0, 0],
    };
    let far = BatchEmbeddings {
        embeddings: Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, 0.0]).unwrap(),
        logits: Tensor::zeros(vec![2, 2]),
        labels: vec![0, 1],
    };
    assert_eq!(same.contrastive_loss(1.0).unwrap(), 0.0);
    assert_eq!(far.contrastive_loss(1.0).unwrap(), 0.0);
}

#[test]
fn cross_entropy_cases() {
    let uniform_logits = BatchEmbeddings {
        embeddings: Tensor::zeros(vec![2, 1]),
        logits: Tensor::full(vec![2, 5], 0.3),
        labels: vec![1, 4],
    };
    assert!((uniform_logits.softmax_xent().unwrap() - 5f64.ln()).abs() < 1e-14);
    let confident = BatchEmbeddings {
        embeddings: Tensor::zeros(vec![1, 1]),
        logits: Tensor::new(vec![1, 3], vec![0.0, 30.0, 0.0]).unwrap(),
        labels: vec![1],
    };
    assert!(confident.softmax_xent().unwrap() < 1e-9);
    for seed in 0..20 {
        let b = batch(400 + seed, 2, 2, 2, 5, 3.0);
        let want = xent_oracle(&rows(b.logits.data(), 4), &b.labels);
        assert!((b.softmax_xent().unwrap() - want).abs() <= 1e-12);
    }
}

#[test]
fn joint_loss_in_lambda() {
    let b = batch(500, 4, 2, 3, 4, 1.0);
    let at = |lambda: f64| {
        let cfg = AnnConfig {
            lambda,
            ..AnnConfig::default()
        };
        b.joint_loss(MetricLoss::Ann, &cfg).unwrap()
    };
    let xent = b.softmax_xent().unwrap();
    let ann = b.ann_loss(&AnnConfig::default()).unwrap();
    assert_eq!(at(0.0).to_bits(), xent.to_bits());
    assert!((at(1.0) - (xent + ann)).abs() <= 1e-12);
    assert!(((at(2.5) - at(0.5)) - 2.0 * ann).abs() <= 1e-12);
}

#[test]
fn loss_gradients_pass_checker() {
    for seed in 0..10 {
        let b = batch(600 + seed, 3, 2, 4, 3, 2.0);
        let labels = b.labels.clone();
        let logits = b.logits.clone();
        let cfg = AnnConfig {
            margin: 1.0,
            ..AnnConfig::default()
        };
        let err = grad_check(
            |t, e| {
                let l = t.constant(logits.clone());
                amde::losses::ann_loss(t, e, l, &labels, &cfg).map(|(v, _)| v)
            },
            &b.embeddings,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "ann seed {seed}: {err}");
        let err = grad_check(
            |t, e| amde::losses::contrastive_loss(t, e, &labels, 1.5),
            &b.embeddings,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "contrastive seed {seed}: {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ann_with_unit_k_is_batch_hard_triplet(seed in 0u64..1_000_000, margin in 0.05f64..2.0) {
        let b = batch(seed, 4, 3, 3, 4, 2.0);
        let cfg = AnnConfig { margin, fixed_k: Some(1), ..AnnConfig::default() };
        prop_assert_eq!(b.ann_loss(&cfg).unwrap().to_bits(), b.batch_hard_triplet(margin).unwrap().to_bits());
    }

    #[test]
    fn ann_is_nonnegative(seed in 0u64..1_000_000) {
        let b = batch(seed, 3, 3, 2, 5, 4.0);
        prop_assert!(b.ann_loss(&AnnConfig::default()).unwrap() >= 0.0);
    }

    #[test]
    fn entropy_and_k_stay_in_range(logits in proptest::collection::vec(-20.0f64..20.0, 2..12)) {
        let n = logits.len();
        let h = class_entropy(&softmax(&logits)).unwrap();
        prop_assert!(h >= 0.0 && h <= (n as f64).ln() + 1e-12);
        let cfg = AnnConfig::default();
        let k = adaptive_k(h, &cfg).unwrap();
        prop_assert!(k >= cfg.k0 && k <= ((n as f64).ln().ceil() as usize).max(cfg.k0));
    }

    #[test]
    fn hardest_sets_are_nested(seed in 0u64..1_000_000, anchor in 0usize..12) {
        let b = batch(seed, 3, 4, 3, 3, 1.0);
        let d = pairwise_sqdist(&b.embeddings).unwrap();
        for k in 1..3 {
            let (p1, n1) = hardest_neighbours(&d, &b.labels, anchor, k).unwrap();
            let (p2, n2) = hardest_neighbours(&d, &b.labels, anchor, k + 1).unwrap();
            prop_assert!(p1.iter().all(|i| p2.contains(i)));
            prop_assert!(n1.iter().all(|i| n2.contains(i)));
        }
    }

    #[test]
    fn distances_are_a_translation_invariant_metric(seed in 0u64..1_000_000, shift in -5.0f64..5.0) {
        let b = batch(seed, 3, 2, 4, 3, 1.0);
        let d = pairwise_sqdist(&b.embeddings).unwrap();
        let moved: Vec<f64> = b.embeddings.data().iter().map(|v| v + shift).collect();
        let dm = pairwise_sqdist(&Tensor::new(vec![6, 4], moved).unwrap()).unwrap();
        for i in 0..6 {
            prop_assert_eq!(d.get(i, i), 0.0);
            for j in 0..6 {
                prop_assert!(d.get(i, j) >= 0.0);
                prop_assert_eq!(d.get(i, j), d.get(j, i));
                prop_assert!((d.get(i, j) - dm.get(i, j)).abs() <= 1e-9);
            }
        }
    }
}
