mod common;

use std::fs;

use approx::assert_abs_diff_eq;
use eqpool::data::SynthConfig;
use eqpool::losses::KernelConfig;
use eqpool::metrics::*;
use eqpool::nn::{Activation, ModelBundle, ModelDims};
use eqpool::{Error, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn fast_adversary() -> AdversaryConfig {
    AdversaryConfig {
        epochs: 30,
        ..AdversaryConfig::default()
    }
}

#[test]
fn minmax_examples() {
    assert_eq!(minmax_normalize(&[2.0, 4.0, 6.0]).unwrap(), [0.0, 0.5, 1.0]);
    assert_eq!(minmax_normalize(&[-1.0, 1.0]).unwrap(), [0.0, 1.0]);
    assert!(matches!(minmax_normalize(&[5.0; 3]), Err(Error::Contract(_))));
    let t = Tensor::from_rows(&[vec![1.0, 7.0], vec![3.0, 7.0]]).unwrap();
    assert_eq!(minmax_columns(&t).data(), &[0.0, 0.0, 1.0, 0.0]);
}

proptest! {
    #[test]
    fn minmax_is_idempotent(v in prop::collection::vec(-1e3f64..1e3, 2..40)) {
        prop_assume!(v.iter().any(|x| *x != v[0]));
        let once = minmax_normalize(&v).unwrap();
        let twice = minmax_normalize(&once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!(once.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn delta_eq_ignores_row_order(n in 2usize..12, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let tau = common::randn(&mut rng, n, 4);
        let cov: Vec<f64> = common::randn(&mut rng, n, 1).into_data();
        let ids: Vec<usize> = (0..n).map(|i| 10 * i).collect();
        let a = delta_eq(&ids, &cov, &tau, PAIR_BUDGET, 0).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pick = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let pids: Vec<usize> = perm.iter().map(|&i| ids[i]).collect();
        let b = delta_eq(&pids, &pick(&cov), &tau.select_rows(&perm), PAIR_BUDGET, 0).unwrap();
        prop_assert!((a.mean - b.mean).abs() < 1e-12);
        prop_assert!(a.mean >= 0.0);
    }
}

#[test]
fn delta_eq_vanishes_for_equal_covariates() {
    let mut rng = common::rng(1);
    let tau = common::randn(&mut rng, 6, 9);
    let d = delta_eq(&[0, 1, 2, 3, 4, 5], &[0.4; 6], &tau, PAIR_BUDGET, 0).unwrap();
    assert_eq!(d.mean, 0.0);
    assert_eq!(d.pairs, 15);
}

#[test]
fn delta_eq_two_samples_by_hand() {
    // After min–max, column 1 is constant (zeros) and columns 0 and 2 map
    // to {0, 1}: ‖u − v‖² = 2, weighted by |0.2 − 0.7|.
    let tau = Tensor::from_rows(&[vec![0.0, 1.0, 5.0], vec![1.0, 1.0, 2.0]]).unwrap();
    let d = delta_eq(&[0, 1], &[0.2, 0.7], &tau, PAIR_BUDGET, 0).unwrap();
    assert_abs_diff_eq!(d.mean, 1.0, epsilon = 1e-15);
    assert_abs_diff_eq!(d.sum, 1.0, epsilon = 1e-15);
}

#[test]
fn delta_eq_subsamples_beyond_the_budget() {
    let mut rng = common::rng(2);
    let tau = common::randn(&mut rng, 300, 4);
    let cov = common::randn(&mut rng, 300, 1).into_data();
    let ids: Vec<usize> = (0..300).collect();
    let full = delta_eq(&ids, &cov, &tau, usize::MAX, 0).unwrap();
    let sub = delta_eq(&ids, &cov, &tau, 20_000, 7).unwrap();
    assert_eq!(full.pairs, 300 * 299 / 2);
    assert_eq!(sub.pairs, 20_000);
    assert_eq!(sub, delta_eq(&ids, &cov, &tau, 20_000, 7).unwrap());
    assert!((sub.mean - full.mean).abs() < 0.05 * full.mean);
    assert!(matches!(delta_eq(&[0], &[0.0], &Tensor::zeros(1, 4), 10, 0), Err(Error::Contract(_))));
}

#[test]
fn adversary_at_chance_on_shuffled_sites() {
    let mut rng = common::rng(3);
    let codes = common::randn(&mut rng, 800, 4);
    let sites: Vec<usize> = (0..800).map(|i| (i % 10 < 7) as usize).collect();
    let acc = adv_metric(
        &codes.select_rows(&(0..400).collect::<Vec<_>>()),
        &sites[..400],
        &codes.select_rows(&(400..800).collect::<Vec<_>>()),
        &sites[400..],
        AdvKind::Accuracy,
        &fast_adversary(),
    )
    .unwrap();
    assert!((acc - 0.7).abs() <= 0.05, "{acc}");
}

#[test]
fn adversary_reads_one_hot_sites() {
    let sites: Vec<usize> = (0..300).map(|i| i % 3).collect();
    let mut codes = Tensor::zeros(300, 3);
    for (i, &s) in sites.iter().enumerate() {
        codes.set(i, s, 1.0);
    }
    let acc = adv_metric(&codes, &sites, &codes, &sites, AdvKind::Accuracy, &fast_adversary()).unwrap();
    assert!(acc >= 0.99, "{acc}");
    let auc = adv_metric(&codes, &sites, &codes, &sites, AdvKind::RocAuc, &fast_adversary()).unwrap();
    assert!(auc >= 0.99, "{auc}");
}

#[test]
fn adversary_needs_two_sites() {
    let codes = Tensor::zeros(10, 2);
    let r = adv_metric(&codes, &[0; 10], &codes, &[0; 10], AdvKind::Accuracy, &fast_adversary());
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn test_mmd_of_identical_sites_is_zero() {
    let mut rng = common::rng(4);
    let half = common::randn(&mut rng, 20, 3);
    let mut data = half.data().to_vec();
    data.extend_from_slice(half.data());
    let codes = Tensor::from_vec(40, 3, data).unwrap();
    let sites: Vec<usize> = (0..40).map(|i| i / 20).collect();
    let v = mmd_test_metric(&codes, &sites, &KernelConfig::default()).unwrap();
    assert_abs_diff_eq!(v.raw, 0.0, epsilon = 1e-14);
    assert_eq!(v.x100, 100.0 * v.raw);
    let lonely = [0, 0, 0, 1];
    assert!(matches!(
        mmd_test_metric(&Tensor::zeros(4, 3), &lonely, &KernelConfig::default()),
        Err(Error::Contract(_))
    ));
}

#[test]
fn accuracy_thresholds_at_one_half() {
    assert_eq!(acc_metric(&[0.9, 0.1, 0.7], &[1.0, 0.0, 1.0]).unwrap(), 1.0);
    assert_eq!(acc_metric(&[0.5, 0.51], &[0.0, 1.0]).unwrap(), 1.0);
    assert_eq!(acc_metric(&[1.2, -0.3, 0.2, 0.8], &[0.0, 1.0, 0.0, 1.0]).unwrap(), 0.5);
    assert!(acc_metric(&[], &[]).is_err());
    assert!(matches!(acc_metric(&[0.1], &[0.0, 1.0]), Err(Error::Dimension { .. })));
}

#[test]
fn roc_auc_examples() {
    assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap(), 0.0);
    assert_eq!(roc_auc(&[0.3; 6], &[true, false, true, false, true, false]).unwrap(), 0.5);
    assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
}

#[test]
fn stat_uses_the_sample_deviation() {
    let s = Stat::of(&[1.0, 2.0, 3.0]);
    assert_eq!((s.mean, s.std), (2.0, 1.0));
    assert_eq!(Stat::of(&[4.0]).std, 0.0);
}

#[test]
fn export_writes_one_row_per_sample() {
    let cfg = SynthConfig {
        n_samples: 120,
        ..SynthConfig::default()
    };
    let splits = common::synthetic_splits(&cfg);
    let model = ModelBundle::build(
        ModelDims {
            d: splits.test.d(),
            n: 3,
            hidden: 8,
            activation: Activation::Relu,
        },
        0,
    )
    .unwrap();
    let emb = embed(&model, &splits.test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("sub/b.csv"));
    export_embeddings(&a, &splits.test, &emb).unwrap();
    export_embeddings(&b, &splits.test, &emb).unwrap();
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), splits.test.len() + 1);
    // id, site, covariate, label, 3 Φ coordinates and 9 τ entries.
    assert!(lines.iter().all(|l| l.split(',').count() == 4 + 3 + 9));
    assert!(lines[0].starts_with("id,site,covariate,label,phi_0"));
}

#[test]
fn embed_rejects_a_width_mismatch() {
    let model = ModelBundle::build(
        ModelDims {
            d: 5,
            n: 3,
            hidden: 8,
            activation: Activation::Relu,
        },
        0,
    )
    .unwrap();
    let splits = common::synthetic_splits(&SynthConfig {
        n_samples: 60,
        ..SynthConfig::default()
    });
    assert!(matches!(embed(&model, &splits.test), Err(Error::Dimension { .. })));
}
