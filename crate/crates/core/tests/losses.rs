mod common;

use approx::assert_abs_diff_eq;
use eqpool::autodiff::Graph;
use eqpool::lie_group::{expm_so, generator, orbit_tau, GroupLookup, GroupParam, LatentPoint};
use eqpool::losses::*;
use eqpool::nn::{Activation, AdamConfig, AdamState, ModelBundle, ModelDims};
use eqpool::{Error, Tensor};
use proptest::prelude::*;

fn model(seed: u64) -> ModelBundle {
    ModelBundle::build(
        ModelDims {
            d: 5,
            n: 3,
            hidden: 12,
            activation: Activation::Tanh,
        },
        seed,
    )
    .unwrap()
}

fn tau_rows(rots: &[Tensor]) -> Tensor {
    let n2 = rots[0].len();
    let data = rots.iter().flat_map(|r| r.data().to_vec()).collect();
    Tensor::from_vec(rots.len(), n2, data).unwrap()
}

fn stage1_value(ti: Tensor, tj: Tensor, ci: &[f64], cj: &[f64], lookup: &mut GroupLookup) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(ti);
    let b = g.constant(tj);
    let l = stage1_loss_from_tau(&mut g, a, b, ci, cj, lookup).unwrap();
    g.value(l).item()
}

#[test]
fn stage1_is_zero_for_an_identical_pair() {
    let m = model(1);
    let mut rng = common::rng(1);
    let x = common::randn(&mut rng, 4, 5);
    let pairs = PairBatch {
        xi: x.clone(),
        ci: vec![0.3; 4],
        xj: x,
        cj: vec![0.3; 4],
    };
    let mut lookup = GroupLookup::new(3, 1.0, GroupParam::Expm).unwrap();
    let mut g = Graph::new();
    let l = stage1_loss(&mut g, &pairs, &m.encoder, &m.tau, &mut lookup).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn stage1_vanishes_on_the_orbit_oracle() {
    let kappa = 0.7;
    let mut rng = common::rng(2);
    for n in [2, 3, 4] {
        let l0 = LatentPoint::normalize(common::randn(&mut rng, 1, n).data().to_vec()).unwrap();
        let c: Vec<f64> = (0..8).map(|k| k as f64 / 7.0).collect();
        let taus: Vec<Tensor> = c
            .iter()
            .map(|&ci| orbit_tau(&l0, -kappa * ci).unwrap().1.into_matrix())
            .collect();
        let (ci, cj): (Vec<f64>, Vec<f64>) = (c[..4].to_vec(), c[4..].to_vec());
        let mut lookup = GroupLookup::new(n, kappa, GroupParam::Expm).unwrap();
        let v = stage1_value(tau_rows(&taus[..4]), tau_rows(&taus[4..]), &ci, &cj, &mut lookup);
        assert!(v < 1e-18, "n = {n}: {v:e}");
    }
}

#[test]
fn stage1_vanishes_on_the_generator_oracle() {
    // τ*(c) = exp(−κcA₀) satisfies 𝒢(i,j)τ*(cᵢ) = τ*(cⱼ) exactly.
    let (n, kappa) = (4, 1.3);
    let c = [0.0, 0.1, 0.55, 0.9, 1.0, 0.25];
    let taus: Vec<Tensor> = c
        .iter()
        .map(|&ci| expm_so(&generator(n).scale(-kappa * ci)).unwrap().into_matrix())
        .collect();
    let mut lookup = GroupLookup::new(n, kappa, GroupParam::Expm).unwrap();
    let v = stage1_value(tau_rows(&taus[..3]), tau_rows(&taus[3..]), &c[..3], &c[3..], &mut lookup);
    assert!(v < 1e-20, "{v:e}");
}

#[test]
fn stage1_is_positive_at_random_init() {
    let m = model(3);
    let mut rng = common::rng(3);
    let pairs = PairBatch {
        xi: common::randn(&mut rng, 6, 5),
        ci: vec![0.0; 6],
        xj: common::randn(&mut rng, 6, 5),
        cj: vec![1.0; 6],
    };
    let mut lookup = GroupLookup::new(3, 1.0, GroupParam::Cayley).unwrap();
    let mut g = Graph::new();
    let l = stage1_loss(&mut g, &pairs, &m.encoder, &m.tau, &mut lookup).unwrap();
    assert!(g.value(l).item() > 0.0);
}

#[test]
fn stage1_rejects_empty_and_mismatched_batches() {
    let m = model(4);
    let mut lookup = GroupLookup::new(3, 1.0, GroupParam::Expm).unwrap();
    let mut g = Graph::new();
    let empty = PairBatch {
        xi: Tensor::zeros(0, 5),
        ci: vec![],
        xj: Tensor::zeros(0, 5),
        cj: vec![],
    };
    assert!(matches!(
        stage1_loss(&mut g, &empty, &m.encoder, &m.tau, &mut lookup),
        Err(Error::Contract(_))
    ));
    let ragged = PairBatch {
        xi: Tensor::zeros(2, 5),
        ci: vec![0.0, 1.0],
        xj: Tensor::zeros(2, 5),
        cj: vec![0.0],
    };
    assert!(matches!(
        stage1_loss(&mut g, &ragged, &m.encoder, &m.tau, &mut lookup),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn zero_decoder_reconstruction_is_mean_squared_norm() {
    let mut m = model(5);
    let zeros = m.decoder.params().iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
    m.decoder.set_params(zeros).unwrap();
    let mut rng = common::rng(5);
    let x = common::randn(&mut rng, 7, 5);
    let want = x.data().iter().map(|v| v * v).sum::<f64>() / 7.0;
    let mut g = Graph::new();
    let xv = g.constant(x);
    let l = recon_x_loss(&mut g, xv, &m.encoder, &m.decoder, true).unwrap();
    assert_abs_diff_eq!(g.value(l).item(), want, epsilon = 1e-12);
}

#[test]
fn phi_with_identity_rotations_is_b() {
    let m = model(6);
    let mut rng = common::rng(6);
    let l = common::unit_rows(&mut rng, 5, 3);
    let eye = tau_rows(&vec![Tensor::identity(3); 5]);
    let mut g = Graph::new();
    let lv = g.constant(l.clone());
    let rv = g.constant(eye);
    let p = phi_with_rotations(&mut g, lv, rv, &m.b, false).unwrap();
    assert!(g.value(p).max_abs_diff(&m.b.eval(&l).unwrap()) < 1e-15);
}

#[test]
fn phi_with_zero_b_is_zero() {
    let mut m = model(7);
    let zeros = m.b.params().iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
    m.b.set_params(zeros).unwrap();
    let mut rng = common::rng(7);
    let l = common::unit_rows(&mut rng, 4, 3);
    assert_eq!(m.phi_rows(&l).unwrap().max_abs(), 0.0);
}

fn constant_head(m: &mut ModelBundle, value: f64) {
    let mut ps: Vec<Tensor> = m.head.params().iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
    let last = ps.len() - 1;
    ps[last] = Tensor::filled(1, 1, value);
    m.head.set_params(ps).unwrap();
}

#[test]
fn prediction_term_by_hand() {
    let mut m = model(8);
    let mut rng = common::rng(8);
    let l = common::unit_rows(&mut rng, 6, 3);
    let y = [0.0, 1.0, 1.0, 0.0, 1.0, 1.0];

    constant_head(&mut m, 0.5);
    let mut g = Graph::new();
    let lv = g.constant(l.clone());
    let t = stage2_terms(&mut g, lv, &y, &m.tau, &m.b, &m.psi, &m.head, false).unwrap();
    assert_abs_diff_eq!(g.value(t.pred).item(), 0.25, epsilon = 1e-15);

    constant_head(&mut m, 0.0);
    let mut g = Graph::new();
    let lv = g.constant(l);
    let t = stage2_terms(&mut g, lv, &y, &m.tau, &m.b, &m.psi, &m.head, false).unwrap();
    assert_abs_diff_eq!(g.value(t.pred).item(), 4.0 / 6.0, epsilon = 1e-15);
}

#[test]
fn stage2_label_count_must_match() {
    let m = model(9);
    let mut g = Graph::new();
    let lv = g.constant(Tensor::filled(3, 3, 0.5));
    assert!(matches!(
        stage2_loss(&mut g, lv, &[1.0], &m.tau, &m.b, &m.psi, &m.head),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn stage2_loss_decreases_under_adam() {
    let m = model(10);
    let mut rng = common::rng(10);
    let l = common::unit_rows(&mut rng, 32, 3);
    let y: Vec<f64> = (0..32).map(|r| (l.row_slice(r)[0] > 0.0) as u8 as f64).collect();
    let (mut b, mut psi, mut head) = (m.b.clone(), m.psi.clone(), m.head.clone());
    let mut opt = [
        AdamState::new(b.params(), AdamConfig::with_lr(1e-2)),
        AdamState::new(psi.params(), AdamConfig::with_lr(1e-2)),
        AdamState::new(head.params(), AdamConfig::with_lr(1e-2)),
    ];
    let mut losses = Vec::new();
    for _ in 0..200 {
        let mut g = Graph::new();
        let lv = g.constant(l.clone());
        let loss = stage2_loss(&mut g, lv, &y, &m.tau, &b, &psi, &head).unwrap();
        losses.push(g.value(loss).item());
        let grads = g.backward(loss).unwrap();
        let (gb, gp, gh) = (b.grads(&grads), psi.grads(&grads), head.grads(&grads));
        opt[0].update(b.params_mut(), &gb).unwrap();
        opt[1].update(psi.params_mut(), &gp).unwrap();
        opt[2].update(head.params_mut(), &gh).unwrap();
    }
    assert!(losses[199] < 0.5 * losses[0], "{} -> {}", losses[0], losses[199]);
}

fn brute_mmd2(x: &Tensor, y: &Tensor, sigma: f64, unbiased: bool) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
        (-d / (2.0 * sigma * sigma)).exp()
    };
    let within = |a: &Tensor| {
        let n = a.rows();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if !(unbiased && i == j) {
                    s += k(a.row_slice(i), a.row_slice(j));
                }
            }
        }
        if unbiased {
            s / (n * (n - 1)) as f64
        } else {
            s / (n * n) as f64
        }
    };
    let mut cross = 0.0;
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            cross += k(x.row_slice(i), y.row_slice(j));
        }
    }
    within(x) + within(y) - 2.0 * cross / (x.rows() * y.rows()) as f64
}

#[test]
fn two_site_multisite_equals_pairwise() {
    let mut rng = common::rng(11);
    let (a, b) = (common::randn(&mut rng, 6, 3), common::randn(&mut rng, 9, 3));
    let cfg = KernelConfig::default();
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let pair = mmd2(&mut g, av, bv, &cfg).unwrap();
    let multi = mmd_multisite(&mut g, &[av, bv], &cfg).unwrap();
    assert_eq!(g.value(pair).item(), g.value(multi).item());
    let value = mmd_multisite_value(&[a, b], &cfg).unwrap();
    assert_abs_diff_eq!(value, g.value(pair).item(), epsilon = 1e-13);
}

#[test]
fn identical_sites_have_zero_mmd() {
    let mut rng = common::rng(12);
    let a = common::randn(&mut rng, 5, 4);
    let v = mmd_multisite_value(&[a.clone(), a.clone(), a], &KernelConfig::fixed(1.0)).unwrap();
    assert_abs_diff_eq!(v, 0.0, epsilon = 1e-15);
}

#[test]
fn three_sites_average_the_pairs() {
    let mut rng = common::rng(13);
    let sites: Vec<Tensor> = [4, 6, 5].iter().map(|&r| common::randn(&mut rng, r, 2)).collect();
    let sigma = 0.9;
    for unbiased in [false, true] {
        let mut cfg = KernelConfig::fixed(sigma);
        if unbiased {
            cfg = cfg.unbiased();
        }
        let want = (brute_mmd2(&sites[0], &sites[1], sigma, unbiased)
            + brute_mmd2(&sites[0], &sites[2], sigma, unbiased)
            + brute_mmd2(&sites[1], &sites[2], sigma, unbiased))
            / 3.0;
        let mut g = Graph::new();
        let vars: Vec<_> = sites.iter().map(|s| g.constant(s.clone())).collect();
        let got = mmd_multisite(&mut g, &vars, &cfg).unwrap();
        assert_abs_diff_eq!(g.value(got).item(), want, epsilon = 1e-13);
    }
}

#[test]
fn mmd_contract_violations() {
    let one = Tensor::zeros(1, 2);
    let two = Tensor::filled(2, 2, 1.0);
    assert!(matches!(
        mmd2_value(&one, &two, 1.0, Estimator::Unbiased),
        Err(Error::Contract(_))
    ));
    assert!(mmd2_value(&one, &two, 1.0, Estimator::Biased).is_ok());
    assert!(matches!(
        mmd_multisite_value(std::slice::from_ref(&two), &KernelConfig::default()),
        Err(Error::Contract(_))
    ));
    assert!(matches!(KernelConfig::fixed(0.0).sigma(&[&two]), Err(Error::Config(_))));
    assert!(matches!(
        mmd2_value(&two, &Tensor::zeros(2, 3), 1.0, Estimator::Biased),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn median_heuristic_examples() {
    // Pairwise distances of {0, 1, 3} on a line are 1, 3, 2: median 2.
    let pts = Tensor::from_vec(3, 1, vec![0.0, 1.0, 3.0]).unwrap();
    assert_eq!(median_heuristic(&[&pts]), 2.0);
    assert_eq!(median_heuristic(&[&Tensor::filled(4, 2, 0.3)]), 1.0);
    assert_eq!(median_heuristic(&[&Tensor::zeros(1, 2)]), 1.0);
}

#[test]
fn separated_point_masses() {
    // {0} vs {1} in one dimension with σ = 1: 2 − 2e^{−1/2}.
    let a = Tensor::zeros(1, 1);
    let b = Tensor::filled(1, 1, 1.0);
    let v = mmd2_value(&a, &b, 1.0, Estimator::Biased).unwrap();
    assert_abs_diff_eq!(v, 2.0 - 2.0 * (-0.5f64).exp(), epsilon = 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn biased_mmd_is_nonnegative_and_symmetric(
        r1 in 1usize..8, r2 in 1usize..8, c in 1usize..4, sigma in 0.1f64..5.0, seed in any::<u64>()
    ) {
        let mut rng = common::rng(seed);
        let (x, y) = (common::randn(&mut rng, r1, c), common::randn(&mut rng, r2, c));
        let xy = mmd2_value(&x, &y, sigma, Estimator::Biased).unwrap();
        let yx = mmd2_value(&y, &x, sigma, Estimator::Biased).unwrap();
        prop_assert!(xy >= -1e-12);
        prop_assert!((xy - yx).abs() < 1e-12);
        prop_assert!((xy - brute_mmd2(&x, &y, sigma, false)).abs() < 1e-12);
    }
}
