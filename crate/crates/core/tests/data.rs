mod common;

use std::fs;

use approx::assert_abs_diff_eq;
use eqpool::data::*;
use eqpool::Error;

fn write_dir(schema: &str, csv: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("schema.json"), schema).unwrap();
    fs::write(dir.path().join("train.csv"), csv).unwrap();
    dir
}

const TINY_SCHEMA: &str = r#"{"label_col": "y", "site_col": "s", "covariate_col": "age",
    "positive_label": "1", "categorical_cols": ["color"]}"#;

#[test]
fn german_loads_every_row() {
    let d = load_dataset_dir(&common::data_dir("german"), 0).unwrap();
    assert_eq!(d.train.len() + d.val.len() + d.test.len(), 1000);
    assert_eq!(d.train.n_sites(), 2);
    assert_eq!(d.dropped, 0);
    assert!(d.train.covariates.iter().all(|c| (0.0..=1.0).contains(c)));
}

#[test]
fn adult_uses_its_test_partition() {
    let dir = common::data_dir("adult");
    let schema = Schema::read(&dir.join("schema.json")).unwrap();
    let test_rows = RawTable::read(&dir.join("test.csv"), &schema).unwrap().len();
    let d = load_dataset_dir(&dir, 0).unwrap();
    assert_eq!(d.test.len(), test_rows);
    assert!(d.dropped > 0, "rows with '?' are dropped");
    assert_eq!(d.train.d(), d.test.d());
}

#[test]
fn loading_twice_is_identical() {
    let a = load_dataset_dir(&common::data_dir("german"), 3).unwrap();
    let b = load_dataset_dir(&common::data_dir("german"), 3).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.val, b.val);
    assert_eq!(a.test, b.test);
}

fn cells(n: usize) -> (Vec<f64>, Vec<usize>) {
    let labels = (0..n).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let sites = (0..n).map(|i| (i / 7) % 2).collect();
    (labels, sites)
}

#[test]
fn all_train_split() {
    let (y, s) = cells(50);
    let sp = make_splits(&y, &s, &SplitSpec::new(1.0, 0.0, 0.0, 0)).unwrap();
    assert_eq!(sp.train, (0..50).collect::<Vec<_>>());
    assert!(sp.val.is_empty() && sp.test.is_empty());
}

#[test]
fn splits_are_stratified_and_reproducible() {
    let (y, s) = cells(3000);
    let spec = SplitSpec::new(0.7, 0.15, 0.15, 11);
    let sp = make_splits(&y, &s, &spec).unwrap();
    assert_eq!(sp, make_splits(&y, &s, &spec).unwrap());
    assert_ne!(sp, make_splits(&y, &s, &SplitSpec::new(0.7, 0.15, 0.15, 12)).unwrap());
    let rate = |idx: &[usize]| idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
    let site_rate = |idx: &[usize]| idx.iter().filter(|&&i| s[i] == 1).count() as f64 / idx.len() as f64;
    for part in [&sp.train, &sp.val, &sp.test] {
        assert!((rate(part) - rate(&sp.train)).abs() < 0.02);
        assert!((site_rate(part) - site_rate(&sp.train)).abs() < 0.02);
    }
    let mut all: Vec<usize> = sp.train.iter().chain(&sp.val).chain(&sp.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..3000).collect::<Vec<_>>());
    assert_abs_diff_eq!(sp.train.len() as f64 / 3000.0, 0.7, epsilon = 0.01);
}

#[test]
fn bad_fractions_are_config_errors() {
    let (y, s) = cells(10);
    for spec in [SplitSpec::new(0.5, 0.4, 0.0, 0), SplitSpec::new(1.2, -0.2, 0.0, 0)] {
        assert!(matches!(make_splits(&y, &s, &spec), Err(Error::Config(_))));
    }
}

#[test]
fn degenerate_generator_is_the_mixing_map() {
    let cfg = SynthConfig {
        n_samples: 40,
        kappa: 0.0,
        site_bias: 0.0,
        noise: 0.0,
        ..SynthConfig::default()
    };
    let s = gen_synthetic(&cfg).unwrap();
    let want = s.truth.base.matmul_t(&s.truth.mixing).unwrap();
    assert!(s.dataset.features.max_abs_diff(&want) < 1e-14);
    assert!(s.truth.latents.max_abs_diff(&s.truth.base) < 1e-15);
}

#[test]
fn generator_latents_follow_the_covariate_rotation() {
    let cfg = SynthConfig {
        n_samples: 30,
        kappa: 1.7,
        ..SynthConfig::default()
    };
    let s = gen_synthetic(&cfg).unwrap();
    let a0 = eqpool::lie_group::generator(cfg.n);
    for i in 0..30 {
        let r = common::series_exp(&a0.scale(cfg.kappa * s.dataset.covariates[i]), 40);
        let z0 = eqpool::Tensor::from_vec(cfg.n, 1, s.truth.base.row_slice(i).to_vec()).unwrap();
        let want = r.matmul(&z0).unwrap();
        let got = eqpool::Tensor::from_vec(cfg.n, 1, s.truth.latents.row_slice(i).to_vec()).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-10);
    }
}

#[test]
fn zero_overlap_gives_disjoint_site_ranges() {
    let cfg = SynthConfig {
        n_samples: 600,
        n_sites: 3,
        overlap: 0.0,
        ..SynthConfig::default()
    };
    let s = gen_synthetic(&cfg).unwrap();
    let ds = &s.dataset;
    let by_site = ds.indices_by_site();
    for a in 0..3 {
        for b in a + 1..3 {
            let hi_a = by_site[a].iter().map(|&i| ds.covariates[i]).fold(f64::MIN, f64::max);
            let lo_b = by_site[b].iter().map(|&i| ds.covariates[i]).fold(f64::MAX, f64::min);
            assert!(hi_a <= lo_b, "sites {a} and {b} overlap");
        }
    }
}

#[test]
fn generator_labels_are_balanced() {
    let s = gen_synthetic(&SynthConfig {
        n_samples: 4000,
        ..SynthConfig::default()
    })
    .unwrap();
    let rate = s.dataset.labels.iter().sum::<f64>() / 4000.0;
    assert!((rate - 0.5).abs() < 0.03, "{rate}");
}

#[test]
fn generator_rejects_bad_fields_by_name() {
    let err = gen_synthetic(&SynthConfig {
        overlap: 1.5,
        ..SynthConfig::default()
    })
    .unwrap_err();
    assert!(err.to_string().contains("overlap"), "{err}");
}

#[test]
fn synthetic_round_trips_through_csv() {
    let cfg = SynthConfig {
        n_samples: 200,
        seed: 4,
        ..SynthConfig::default()
    };
    let d = common::synthetic_splits(&cfg);
    assert_eq!(d.train.len() + d.val.len() + d.test.len(), 200);
    assert_eq!(d.train.d(), cfg.d + 1);
}

#[test]
fn missing_column_is_named() {
    let dir = write_dir(TINY_SCHEMA, "age,color,s\n30,red,a\n");
    let err = load_dataset_dir(dir.path(), 0).unwrap_err();
    assert!(matches!(&err, Error::Schema(m) if m.contains("'y'")), "{err}");
}

#[test]
fn parse_errors_carry_the_line() {
    let csv = "age,color,s,y\n30,red,a,1\n41,blue,b,0\nold,red,a,0\n";
    let dir = write_dir(TINY_SCHEMA, csv);
    let schema = Schema::read(&dir.path().join("schema.json")).unwrap();
    let err = load_tabular(&dir.path().join("train.csv"), &schema).unwrap_err();
    match err {
        Error::Parse { line, msg, .. } => {
            assert_eq!(line, 4);
            assert!(msg.contains("age"));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn unseen_categories_encode_as_zeros() {
    let csv = "age,color,s,y\n30,red,a,1\n40,blue,a,0\n50,green,b,1\n";
    let dir = write_dir(TINY_SCHEMA, csv);
    let schema = Schema::read(&dir.path().join("schema.json")).unwrap();
    let table = RawTable::read(&dir.path().join("train.csv"), &schema).unwrap();
    let pre = Preprocessor::fit(&table, &[0, 1]).unwrap();
    let names = pre.feature_names();
    assert_eq!(names, ["age", "color=blue", "color=red"]);
    // "green" was not among the fitted rows, and site "b" is unknown too.
    assert!(matches!(pre.transform(&table, &[2]), Err(Error::Schema(_))));
    let pre = Preprocessor::fit(&table, &[0, 2]).unwrap();
    let ds = pre.transform(&table, &[1]).unwrap();
    assert_eq!(&ds.features.row_slice(0)[1..], &[0.0, 0.0]);
}

#[test]
fn preprocessing_is_fitted_on_training_rows_only() {
    let csv = "age,color,s,y\n20,red,a,1\n40,red,b,0\n100,red,a,0\n";
    let dir = write_dir(TINY_SCHEMA, csv);
    let schema = Schema::read(&dir.path().join("schema.json")).unwrap();
    let table = RawTable::read(&dir.path().join("train.csv"), &schema).unwrap();
    let pre = Preprocessor::fit(&table, &[0, 1]).unwrap();
    assert_eq!(pre.covariate_range(), [20.0, 40.0]);
    let ds = pre.transform(&table, &[0, 1, 2]).unwrap();
    // z-score uses the train mean 30 and std 10; covariate is clamped.
    assert_eq!(ds.features.get(2, 0), 7.0);
    assert_eq!(ds.covariates, [0.0, 1.0, 1.0]);
    assert_eq!(ds.raw_covariates[2], 100.0);
}

#[test]
fn missing_token_rows_are_dropped() {
    let schema = r#"{"label_col": "y", "site_col": "s", "covariate_col": "age",
        "positive_label": "1", "missing_token": "?"}"#;
    let dir = write_dir(schema, "age,s,y\n30,a,1\n?,b,0\n50,b,1\n");
    let s = Schema::read(&dir.path().join("schema.json")).unwrap();
    let t = RawTable::read(&dir.path().join("train.csv"), &s).unwrap();
    assert_eq!((t.len(), t.dropped), (2, 1));
    assert_eq!(t.lines, [2, 4]);
}
