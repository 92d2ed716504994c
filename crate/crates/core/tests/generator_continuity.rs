use galip_autograd::{no_grad, Tensor, Var};
use galip_core::{Backbone, BackboneConfig, Generator, GeneratorConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn smaller_condition_steps_give_proportionally_smaller_changes() {
    let bb = Backbone::load("tiny-random:0", BackboneConfig::tiny()).unwrap();
    let g = Generator::new(GeneratorConfig::tiny(), bb.config(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = |z: &Tensor, e: &Tensor| {
        no_grad(|| g.generate(&Var::constant(z.clone()), &Var::constant(e.clone()), Some(&bb))).unwrap().value().clone()
    };
    let (mut big, mut small) = (0.0, 0.0);
    let delta = 0.05;
    for _ in 0..32 {
        let z = g.sample_noise(1, &mut rng);
        let e = Tensor::randn(vec![1, 32], 1.0, &mut rng);
        let u = Tensor::randn(vec![1, 32], 1.0, &mut rng);
        let u = u.scale(1.0 / u.norm());
        let base = out(&z, &e);
        big += (out(&z, &e.add(&u.scale(delta))).sub(&base)).norm();
        small += (out(&z, &e.add(&u.scale(delta / 10.0))).sub(&base)).norm();
    }
    assert!(big > 0.0);
    assert!(small <= 0.5 * big, "{small} vs {big}");
}
