mod common;

use approx::assert_abs_diff_eq;
use eqpool::autodiff::{gradcheck, gradcheck_with, Graph, GradcheckOptions, ParamKey};
use eqpool::{Error, Tensor};
use proptest::prelude::*;

#[test]
fn forward_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(vec![3.0, 4.0]));
    let y = g.l2_normalize(x).unwrap();
    assert_abs_diff_eq!(g.value(y).data()[0], 0.6, epsilon = 1e-15);
    assert_abs_diff_eq!(g.value(y).data()[1], 0.8, epsilon = 1e-15);

    let eye = g.constant(Tensor::identity(4));
    let inv = g.mat_inverse(eye).unwrap();
    assert_eq!(g.value(inv), &Tensor::identity(4));

    let m = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let f = g.frobenius_sq(m);
    assert_eq!(g.value(f).item(), 30.0);
}

#[test]
fn gradient_of_a_sum_is_all_ones() {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(5, 1, vec![0.1, -2.0, 3.0, 0.0, 7.5]).unwrap());
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[1.0; 5]);
}

#[test]
fn cayley_graph_matches_finite_differences() {
    // ‖(I − A)(I + A)⁻¹‖²_F assembled from primitive ops.
    let mut rng = common::rng(1);
    for n in [2, 3, 5] {
        let v = common::randn(&mut rng, 1, n * (n - 1) / 2).scale(0.8);
        let err = gradcheck(
            |g, x| {
                let a = g.skew_embed(x[0], n)?;
                let eye = g.constant(Tensor::identity(n));
                let plus = g.add(eye, a)?;
                let minus = g.sub(eye, a)?;
                let inv = g.mat_inverse(plus)?;
                let r = g.matmul(minus, inv)?;
                // ‖R‖² is constant (= n) for a rotation; weight it to get a
                // function with a non-trivial gradient.
                let w = g.constant(Tensor::from_vec(n, n, (0..n * n).map(|k| k as f64 * 0.3 - 1.0).collect())?);
                let rw = g.elementwise_mul(r, w)?;
                Ok(g.frobenius_sq(rw))
            },
            &[v],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "n = {n}: {err:e}");
    }
}

#[test]
fn quadratic_form_matches_closed_form() {
    let mut rng = common::rng(2);
    let w = common::randn(&mut rng, 4, 3);
    let x = common::randn(&mut rng, 3, 1);
    let mut g = Graph::new();
    let wv = g.constant(w.clone());
    let xv = g.input(x.clone());
    let y = g.matvec(wv, xv).unwrap();
    let f = g.frobenius_sq(y);
    let grads = g.backward(f).unwrap();
    // ∇ₓ‖Wx‖² = 2WᵀWx.
    let want = w.t_matmul(&w.matmul(&x).unwrap()).unwrap().scale(2.0);
    assert!(grads.wrt(xv).unwrap().max_abs_diff(&want) < 1e-12);
    let err = gradcheck(
        |g, v| {
            let wv = g.constant(w.clone());
            let y = g.matvec(wv, v[0])?;
            Ok(g.frobenius_sq(y))
        },
        &[x],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-8, "{err:e}");
}

#[test]
fn small_compositions_match_finite_differences() {
    let mut rng = common::rng(3);
    let (x, w1, w2) = (common::randn(&mut rng, 4, 3), common::randn(&mut rng, 3, 5), common::randn(&mut rng, 5, 2));
    let err = gradcheck(
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.tanh(h);
            let o = g.matmul(h, v[2])?;
            let s = g.square(o);
            Ok(g.sum(s))
        },
        &[x.clone(), w1, w2],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "{err:e}");

    let (a, v) = (common::randn(&mut rng, 3, 3), common::randn(&mut rng, 3, 1));
    let w = common::randn(&mut rng, 1, 3);
    let err = gradcheck(
        move |g, x| {
            let y = g.matvec(x[0], x[1])?;
            let yt = g.transpose(y);
            let n = g.l2_normalize(yt)?;
            let wv = g.constant(w.clone());
            let p = g.elementwise_mul(n, wv)?;
            Ok(g.sum(p))
        },
        &[a, v],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "{err:e}");
}

#[test]
fn parameter_gradients_accumulate_over_uses() {
    let key = ParamKey { owner: 9, index: 0 };
    let w = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap();
    let mut g = Graph::new();
    let a = g.param(key, &w);
    let b = g.param(key, &w);
    let prod = g.matmul(a, b).unwrap();
    let s = g.sum(prod);
    let grads = g.backward(s).unwrap();
    let total = grads.wrt(a).unwrap().add(grads.wrt(b).unwrap()).unwrap();
    assert!(grads.param(key).unwrap().max_abs_diff(&total) < 1e-15);
}

#[test]
fn bound_parameters_route_gradients_to_the_bound_node() {
    let key = ParamKey { owner: 1, index: 3 };
    let w = Tensor::from_rows(&[vec![2.0, -1.0]]).unwrap();
    let mut g = Graph::new();
    let x = g.input(w.clone());
    g.bind(key, x);
    let p = g.param(key, &w);
    assert_eq!(p, x);
    let s = g.frobenius_sq(p);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[4.0, -2.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::scalar(2.0));
    let x = g.input(Tensor::scalar(3.0));
    let y = g.elementwise_mul(c, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert!(grads.wrt(c).is_none());
    assert_eq!(grads.wrt(x).unwrap().item(), 2.0);
}

#[test]
fn contract_and_shape_errors() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(2, 3));
    let b = g.input(Tensor::zeros(3, 2));
    assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    assert!(matches!(g.matmul(a, a), Err(Error::Dimension { .. })));
    assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    assert!(matches!(g.select_rows(a, &[2]), Err(Error::Dimension { .. })));
    assert!(matches!(g.skew_embed(a, 2), Err(Error::Dimension { .. })));
    let z = g.input(Tensor::zeros(2, 2));
    assert!(matches!(g.mat_inverse(z), Err(Error::Singular { .. })));
}

#[test]
fn gradcheck_rejects_bad_steps_and_catches_wrong_gradients() {
    let f = |g: &mut Graph, x: &[eqpool::autodiff::Var]| Ok(g.sum(x[0]));
    assert!(matches!(gradcheck(f, &[Tensor::scalar(1.0)], 1.0), Err(Error::Config(_))));
    // A "function" whose reverse pass is wrong: relu at its kink, where the
    // central difference sees slope 1/2 but the backward pass uses 0.
    let err = gradcheck(
        |g, x| {
            let r = g.relu(x[0]);
            Ok(g.sum(r))
        },
        &[Tensor::scalar(0.0)],
        1e-6,
    )
    .unwrap();
    assert!(err > 0.4, "{err}");
}

#[test]
fn gradcheck_samples_large_inputs() {
    let mut rng = common::rng(4);
    let x = common::randn(&mut rng, 40, 40);
    let opts = GradcheckOptions {
        max_coords_per_input: 10,
        seed: 1,
    };
    let err = gradcheck_with(
        |g, v| {
            let e = g.exp(v[0]);
            g.mean(e)
        },
        &[x],
        1e-6,
        opts,
    )
    .unwrap();
    assert!(err < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_chain_gradients(r in 1usize..5, k in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let (a, b) = (common::randn(&mut rng, r, k), common::randn(&mut rng, k, c));
        let err = gradcheck(
            |g, x| {
                let p = g.matmul(x[0], x[1])?;
                let s = g.sigmoid(p);
                g.mean(s)
            },
            &[a, b],
            1e-6,
        )
        .unwrap();
        prop_assert!(err < 1e-6);
    }

    #[test]
    fn batched_rotation_gradients(b in 1usize..5, n in 2usize..5, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let coords = common::randn(&mut rng, b, n * (n - 1) / 2);
        let v = common::randn(&mut rng, b, n);
        let err = gradcheck(
            move |g, x| {
                let r = g.cayley_rows(x[0], n)?;
                let rr = g.rows_matmul(r, r, n)?;
                let y = g.rows_matvec(rr, x[1], n, true)?;
                let q = g.row_sq_norms(y);
                let t = g.tanh(y);
                let s1 = g.sum(t);
                let s2 = g.sum(q);
                g.add(s1, s2)
            },
            &[coords, v],
            1e-6,
        )
        .unwrap();
        prop_assert!(err < 1e-5);
    }

    #[test]
    fn cayley_rows_are_rotations(b in 1usize..6, n in 2usize..6, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let mut g = Graph::new();
        let c = g.constant(common::randn(&mut rng, b, n * (n - 1) / 2).scale(2.0));
        let r = g.cayley_rows(c, n).unwrap();
        for row in 0..b {
            let m = Tensor::from_vec(n, n, g.value(r).row_slice(row).to_vec()).unwrap();
            let e = m.t_matmul(&m).unwrap().max_abs_diff(&Tensor::identity(n));
            prop_assert!(e < 1e-12);
        }
    }
}
