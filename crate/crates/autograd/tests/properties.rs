use galip_autograd::{grad, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Smooth scalar of a `[n, m]` input and a fixed `[m, m]` weight.
fn f(x: &Var, w: &Var) -> Var {
    x.matmul(w).tanh().square().sum().add(&x.scale(0.3).exp().mean())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradient_matches_directional_difference(seed in 0u64..10_000, n in 1usize..4, m in 1usize..5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(vec![n, m], 1.0, &mut r);
        let w = Var::constant(Tensor::randn(vec![m, m], 0.7, &mut r));
        let dir = Tensor::randn(vec![n, m], 1.0, &mut r);
        let xv = Var::leaf(x.clone());
        let g = grad(&f(&xv, &w), &[&xv], false).unwrap().remove(0).unwrap();
        let eps = 1e-6;
        let at = |s: f64| f(&Var::constant(x.add(&dir.scale(s))), &w).item();
        let numeric = (at(eps) - at(-eps)) / (2.0 * eps);
        let analytic = dot(g.value(), &dir);
        prop_assert!((numeric - analytic).abs() <= 1e-6 * (1.0 + analytic.abs()), "{numeric} vs {analytic}");
    }

    #[test]
    fn hessian_vector_product_matches_gradient_difference(seed in 0u64..10_000, n in 1usize..4, m in 1usize..5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(vec![n, m], 1.0, &mut r);
        let w = Var::constant(Tensor::randn(vec![m, m], 0.7, &mut r));
        let v = Tensor::randn(vec![n, m], 1.0, &mut r);
        let xv = Var::leaf(x.clone());
        let g = grad(&f(&xv, &w), &[&xv], true).unwrap().remove(0).unwrap();
        let hv = grad(&g.mul(&Var::constant(v.clone())).sum(), &[&xv], false).unwrap().remove(0).unwrap();
        let eps = 1e-5;
        let grad_at = |s: f64| {
            let p = Var::leaf(x.add(&v.scale(s)));
            grad(&f(&p, &w), &[&p], false).unwrap().remove(0).unwrap().value().clone()
        };
        let numeric = grad_at(eps).sub(&grad_at(-eps)).scale(1.0 / (2.0 * eps));
        let err = numeric.max_abs_diff(hv.value());
        prop_assert!(err <= 1e-5 * (1.0 + numeric.norm()), "error {err}");
    }

    #[test]
    fn gradient_is_linear_in_the_output(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Var::leaf(Tensor::randn(vec![2, 3], 1.0, &mut r));
        let w = Var::constant(Tensor::randn(vec![3, 3], 0.7, &mut r));
        let g1 = x.sigmoid().mul(&x).sum();
        let g2 = f(&x, &w);
        let both = grad(&g1.scale(a).add(&g2.scale(b)), &[&x], false).unwrap().remove(0).unwrap();
        let d1 = grad(&g1, &[&x], false).unwrap().remove(0).unwrap();
        let d2 = grad(&g2, &[&x], false).unwrap().remove(0).unwrap();
        let expected = d1.value().scale(a).add(&d2.value().scale(b));
        prop_assert!(both.value().max_abs_diff(&expected) <= 1e-12 * (1.0 + expected.norm()));
    }

    #[test]
    fn fold_is_the_adjoint_of_unfold(seed in 0u64..10_000, c in 1usize..3, h in 3usize..6, k in 1usize..4, pad in 0usize..2) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(vec![2, c, h, h + 1], 1.0, &mut r);
        let cols = x.unfold(k, pad);
        let y = Tensor::randn(cols.shape().to_vec(), 1.0, &mut r);
        let lhs = dot(&cols, &y);
        let rhs = dot(&x, &y.fold(c, h, h + 1, k, pad));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }
}
