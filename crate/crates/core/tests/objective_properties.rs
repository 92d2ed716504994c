use galip_autograd::nn::flatten_rows;
use galip_autograd::{grad, no_grad, Tensor, Var};
use galip_core::backbone::FeaturePyramid;
use galip_core::objectives::{clip_similarity, hinge_d_loss, magp, ObjectiveConfig};
use galip_core::{Backbone, BackboneConfig, Discriminator, DiscriminatorConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn constant_pyramid(batch: usize, seed: u64) -> FeaturePyramid {
    let mut r = rng(seed);
    FeaturePyramid {
        levels: vec![(1, Var::constant(Tensor::randn(vec![batch, 1, 1, 2], 1.0, &mut r)))],
        source_resolution: 1,
    }
}

/// logit = <w, features> + <v, text>, so the gradients are w and v at every sample.
fn linear_penalty(w: [f64; 2], v: [f64; 2], cfg: &ObjectiveConfig) -> f64 {
    let text = Var::constant(Tensor::randn(vec![3, 2], 1.0, &mut rng(7)));
    let (w, v) = (Var::constant(Tensor::new(vec![1, 2], w.to_vec())), Var::constant(Tensor::new(vec![1, 2], v.to_vec())));
    let out = magp(&constant_pyramid(3, 1), &text, cfg, |p, t| {
        let f = flatten_rows(&p.levels[0].1).mul(&w).sum_axis(1, false);
        Ok(f.add(&t.mul(&v).sum_axis(1, false)))
    })
    .unwrap();
    out.penalty.item()
}

#[test]
fn linear_assessor_matches_closed_form() {
    let cfg = ObjectiveConfig::default();
    // ‖w‖ = 0.3, ‖v‖ = 0.4.
    let got = linear_penalty([0.18, 0.24], [0.24, 0.32], &cfg);
    assert!((got - 2.0 * 0.7f64.powi(6)).abs() < 1e-6, "{got}");
    let got = linear_penalty([0.0, 1.0], [0.0, 0.0], &ObjectiveConfig { k: 0.5, p: 2.0, ..cfg });
    assert!((got - 0.5).abs() < 1e-12);
}

#[test]
fn penalty_scales_with_the_exponent() {
    let cfg = ObjectiveConfig::default();
    let base = linear_penalty([0.1, -0.2], [0.3, 0.05], &cfg);
    for s in [0.5, 2.0, 3.0] {
        let scaled = linear_penalty([0.1 * s, -0.2 * s], [0.3 * s, 0.05 * s], &cfg);
        assert!((scaled / base - s.powf(cfg.p)).abs() < 1e-9 * s.powf(cfg.p));
    }
}

fn tiny_backbone() -> Backbone {
    Backbone::load("tiny-random:3", BackboneConfig::tiny()).unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-12)
}

/// Central differences of `f` along the `count` largest entries of `analytic`.
fn check_against_differences(analytic: &Tensor, count: usize, mut f: impl FnMut(usize, f64) -> f64) {
    let mut order: Vec<usize> = (0..analytic.numel()).collect();
    order.sort_by(|&a, &b| analytic.data()[b].abs().total_cmp(&analytic.data()[a].abs()));
    let eps = 1e-5;
    for &i in order.iter().take(count) {
        let numeric = (f(i, eps) - f(i, -eps)) / (2.0 * eps);
        let a = analytic.data()[i];
        assert!(rel_err(a, numeric) <= 1e-3, "entry {i}: analytic {a}, numeric {numeric}");
    }
}

#[test]
fn magp_parameter_gradients_match_differences() {
    let bb = tiny_backbone();
    let d = Discriminator::new(DiscriminatorConfig::tiny(), bb.config(), 4).unwrap();
    let images = Var::constant(Tensor::uniform(vec![2, 3, 32, 32], -1.0, 1.0, &mut rng(5)));
    let text = Var::constant(Tensor::randn(vec![2, 32], 1.0, &mut rng(6)));
    let pyr = no_grad(|| d.features(&images, &bb)).unwrap();
    let cfg = ObjectiveConfig::default();
    let penalty = || magp(&pyr, &text, &cfg, |p, t| d.logits(p, t)).unwrap().penalty;

    for name in ["assessor.out.weight", "assessor.conv.weight", "proj.0.weight", "tail.conv2.weight"] {
        let p = d.params().get(name).unwrap_or_else(|| panic!("no parameter {name}")).clone();
        let g = grad(&penalty(), &[&p.var()], false).unwrap().remove(0).expect("penalty depends on the parameter");
        let base = p.value();
        check_against_differences(g.value(), 3, |i, h| {
            let mut data = base.to_vec();
            data[i] += h;
            p.set(Tensor::new(base.shape().to_vec(), data));
            let v = penalty().item();
            p.set(base.clone());
            v
        });
    }
}

#[test]
fn discriminate_gradients_match_differences() {
    let bb = tiny_backbone();
    let d = Discriminator::new(DiscriminatorConfig::tiny(), bb.config(), 8).unwrap();
    let images = Tensor::uniform(vec![2, 3, 32, 32], -1.0, 1.0, &mut rng(9));
    let text = Tensor::randn(vec![2, 32], 1.0, &mut rng(10));
    let score = |img: &Var, t: &Var| d.discriminate(img, t, &bb).unwrap().sum();

    let (xi, ti) = (Var::leaf(images.clone()), Var::leaf(text.clone()));
    let g = grad(&score(&xi, &ti), &[&xi, &ti], false).unwrap();
    let (gi, gt) = (g[0].as_ref().unwrap().value().clone(), g[1].as_ref().unwrap().value().clone());
    let eval = |img: Tensor, t: Tensor| no_grad(|| score(&Var::constant(img), &Var::constant(t)).item());
    check_against_differences(&gt, 6, |i, h| {
        let mut t = text.to_vec();
        t[i] += h;
        eval(images.clone(), Tensor::new(vec![2, 32], t))
    });
    check_against_differences(&gi, 6, |i, h| {
        let mut x = images.to_vec();
        x[i] += h;
        eval(Tensor::new(images.shape().to_vec(), x), text.clone())
    });
}

#[test]
fn similarity_gradient_matches_differences() {
    let bb = tiny_backbone();
    let images = Tensor::uniform(vec![2, 3, 32, 32], -1.0, 1.0, &mut rng(11));
    let text = Var::constant(Tensor::randn(vec![2, 32], 1.0, &mut rng(12)));
    let x = Var::leaf(images.clone());
    let g = grad(&clip_similarity(&x, &text, &bb).unwrap(), &[&x], false).unwrap().remove(0).unwrap();
    check_against_differences(g.value(), 6, |i, h| {
        let mut v = images.to_vec();
        v[i] += h;
        no_grad(|| clip_similarity(&Var::constant(Tensor::new(images.shape().to_vec(), v)), &text, &bb).unwrap().item())
    });
}

fn hinge(r: &[f64], f: &[f64], m: &[f64]) -> f64 {
    let v = |x: &[f64]| Var::constant(Tensor::new(vec![x.len()], x.to_vec()));
    hinge_d_loss(&v(r), &v(f), &v(m)).unwrap().item()
}

proptest! {
    #[test]
    fn hinge_is_monotone(
        r in prop::collection::vec(-3.0f64..3.0, 4),
        f in prop::collection::vec(-3.0f64..3.0, 4),
        m in prop::collection::vec(-3.0f64..3.0, 4),
        i in 0usize..4,
        d in 0.0f64..2.0,
    ) {
        let base = hinge(&r, &f, &m);
        prop_assert!(base >= 0.0);
        let bump = |x: &[f64]| { let mut y = x.to_vec(); y[i] += d; y };
        prop_assert!(hinge(&bump(&r), &f, &m) <= base + 1e-12);
        prop_assert!(hinge(&r, &bump(&f), &m) >= base - 1e-12);
        prop_assert!(hinge(&r, &f, &bump(&m)) >= base - 1e-12);
    }

    #[test]
    fn penalty_is_non_negative_and_zero_only_without_slope(
        w in prop::collection::vec(-1.0f64..1.0, 2),
        v in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let cfg = ObjectiveConfig::default();
        let got = linear_penalty([w[0], w[1]], [v[0], v[1]], &cfg);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt() + v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(got >= 0.0);
        prop_assert!((got - cfg.k * norm.powf(cfg.p)).abs() <= 1e-9 * (1.0 + got));
    }
}
