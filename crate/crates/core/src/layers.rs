//! Learnable building blocks shared by the generator and discriminator.

use std::sync::Arc;

use galip_autograd::nn::{conv2d, linear};
use galip_autograd::{orthogonal, Param, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};

/// Slope of every leaky rectifier in the learnable blocks.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Registers parameters under a dotted name prefix, drawing initial values
/// from one seeded stream in construction order.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Builder) -> R) -> R {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let mut inner = Builder { store: &mut *self.store, rng: &mut *self.rng, prefix };
        f(&mut inner)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> Arc<Param> {
        let full = self.full_name(name);
        self.store.add(full, value)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    /// Orthogonal `[rows, cols]` matrix.
    pub fn orthogonal(&mut self, rows: usize, cols: usize) -> Tensor {
        orthogonal(rows, cols, 1.0, self.rng)
    }

    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize) -> Linear {
        let w = self.orthogonal(out_dim, in_dim);
        self.scope(name, |b| Linear {
            weight: b.param("weight", w),
            bias: Some(b.param("bias", Tensor::zeros(vec![out_dim]))),
        })
    }

    /// A linear layer whose weight and bias start at zero.
    pub fn linear_zero(&mut self, name: &str, in_dim: usize, out_dim: usize) -> Linear {
        self.scope(name, |b| Linear {
            weight: b.param("weight", Tensor::zeros(vec![out_dim, in_dim])),
            bias: Some(b.param("bias", Tensor::zeros(vec![out_dim]))),
        })
    }

    pub fn conv(&mut self, name: &str, in_ch: usize, out_ch: usize, k: usize, bias: bool) -> Conv {
        let w = self.orthogonal(out_ch, in_ch * k * k).reshape(vec![out_ch, in_ch, k, k]);
        self.scope(name, |b| Conv {
            weight: b.param("weight", w),
            bias: bias.then(|| b.param("bias", Tensor::zeros(vec![out_ch]))),
            pad: k / 2,
        })
    }

    /// A `k × k` convolution without padding.
    pub fn conv_valid(&mut self, name: &str, in_ch: usize, out_ch: usize, k: usize, bias: bool) -> Conv {
        let mut c = self.conv(name, in_ch, out_ch, k, bias);
        c.pad = 0;
        c
    }
}

pub struct Linear {
    pub weight: Arc<Param>,
    pub bias: Option<Arc<Param>>,
}

impl Linear {
    pub fn forward(&self, x: &Var) -> Var {
        let bias = self.bias.as_ref().map(|b| b.var());
        linear(x, &self.weight.var(), bias.as_ref())
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

pub struct Conv {
    pub weight: Arc<Param>,
    pub bias: Option<Arc<Param>>,
    pub pad: usize,
}

impl Conv {
    pub fn forward(&self, x: &Var) -> Var {
        let bias = self.bias.as_ref().map(|b| b.var());
        conv2d(x, &self.weight.var(), bias.as_ref(), self.pad)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Two-layer perceptron `cond -> C -> C` with a rectifier between.
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn forward(&self, cond: &Var) -> Var {
        self.out.forward(&self.hidden.forward(cond).relu())
    }
}

/// Channel-wise `x · (1 + γ(c)) + β(c)`. The output layers of both
/// perceptrons start at zero, so a fresh modulation is the identity.
pub struct Affine {
    pub gamma: Mlp,
    pub beta: Mlp,
    channels: usize,
}

impl Affine {
    pub fn new(b: &mut Builder, cond_dim: usize, channels: usize) -> Self {
        let mlp = |b: &mut Builder, name: &str| {
            b.scope(name, |b| Mlp {
                hidden: b.linear("fc1", cond_dim, channels),
                out: b.linear_zero("fc2", channels, channels),
            })
        };
        let gamma = mlp(b, "gamma");
        let beta = mlp(b, "beta");
        Self { gamma, beta, channels }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `x: [B, C, H, W]`, `cond: [B, D]`.
    pub fn forward(&self, x: &Var, cond: &Var) -> Result<Var> {
        let (b, c) = match x.shape() {
            [b, c, _, _] => (*b, *c),
            other => return Err(shape_err("affine_modulate", format!("expected [B, C, H, W], got {other:?}"))),
        };
        if c != self.channels {
            return Err(shape_err(
                "affine_modulate",
                format!("feature has {c} channels, modulation expects {}", self.channels),
            ));
        }
        let cond_dim = self.gamma.hidden.in_dim();
        if cond.shape() != [b, cond_dim] {
            return Err(shape_err(
                "affine_modulate",
                format!("condition {:?}, expected [{b}, {cond_dim}]", cond.shape()),
            ));
        }
        let gamma = self.gamma.forward(cond).reshape(&[b, c, 1, 1]);
        let beta = self.beta.forward(cond).reshape(&[b, c, 1, 1]);
        Ok(x.mul(&gamma.add_scalar(1.0)).add(&beta))
    }
}

/// Modulate, leaky-rectify, modulate, leaky-rectify, 3×3 convolution.
pub struct DfBlock {
    pub affine1: Affine,
    pub affine2: Affine,
    pub conv: Conv,
}

impl DfBlock {
    pub fn new(b: &mut Builder, cond_dim: usize, in_ch: usize, out_ch: usize) -> Self {
        Self {
            affine1: b.scope("affine1", |b| Affine::new(b, cond_dim, in_ch)),
            affine2: b.scope("affine2", |b| Affine::new(b, cond_dim, in_ch)),
            conv: b.conv("conv", in_ch, out_ch, 3, true),
        }
    }

    pub fn forward(&self, x: &Var, cond: &Var) -> Result<Var> {
        let h = self.affine1.forward(x, cond)?.leaky_relu(LEAKY_SLOPE);
        let h = self.affine2.forward(&h, cond)?.leaky_relu(LEAKY_SLOPE);
        Ok(self.conv.forward(&h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup() -> (ParamStore, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(0))
    }

    fn randn(shape: &[usize], seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Var::constant(Tensor::randn(shape.to_vec(), 1.0, &mut rng))
    }

    #[test]
    fn names_are_scoped() {
        let (mut store, mut rng) = setup();
        let mut b = Builder::new(&mut store, &mut rng);
        b.scope("g", |b| b.scope("blk0", |b| b.conv("conv", 2, 3, 3, true)));
        let names: Vec<_> = store.params().iter().map(|p| p.name().to_string()).collect();
        assert_eq!(names, vec!["g.blk0.conv.weight", "g.blk0.conv.bias"]);
    }

    #[test]
    fn fresh_affine_is_identity() {
        let (mut store, mut rng) = setup();
        let a = Affine::new(&mut Builder::new(&mut store, &mut rng), 5, 4);
        let x = randn(&[2, 4, 3, 3], 1);
        let y = a.forward(&x, &randn(&[2, 5], 2)).unwrap();
        assert!(y.value().bit_eq(x.value()));
    }

    #[test]
    fn zero_condition_scales_by_bias_terms() {
        let (mut store, mut rng) = setup();
        let a = Affine::new(&mut Builder::new(&mut store, &mut rng), 3, 2);
        let gb = Tensor::new(vec![2], vec![0.5, -0.25]);
        let bb = Tensor::new(vec![2], vec![0.1, 0.2]);
        a.gamma.out.bias.as_ref().unwrap().set(gb.clone());
        a.beta.out.bias.as_ref().unwrap().set(bb.clone());
        // Zero condition: hidden layers emit relu(0 + 0) = 0, so γ and β equal the output biases.
        let x = randn(&[1, 2, 2, 2], 3);
        let y = a.forward(&x, &Var::constant(Tensor::zeros(vec![1, 3]))).unwrap();
        for c in 0..2 {
            for i in 0..4 {
                let xi = x.value().data()[c * 4 + i];
                let expected = xi * (1.0 + gb.data()[c]) + bb.data()[c];
                assert!((y.value().data()[c * 4 + i] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn different_conditions_give_different_outputs() {
        let (mut store, mut rng) = setup();
        let a = Affine::new(&mut Builder::new(&mut store, &mut rng), 3, 2);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for p in store.params() {
            p.set(Tensor::randn(p.shape(), 0.5, &mut r));
        }
        let x = randn(&[1, 2, 2, 2], 3);
        let y1 = a.forward(&x, &randn(&[1, 3], 4)).unwrap();
        let y2 = a.forward(&x, &randn(&[1, 3], 5)).unwrap();
        assert!(y1.value().max_abs_diff(y2.value()) > 1e-6);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let (mut store, mut rng) = setup();
        let a = Affine::new(&mut Builder::new(&mut store, &mut rng), 3, 2);
        assert!(a.forward(&randn(&[1, 3, 2, 2], 0), &randn(&[1, 3], 1)).is_err());
    }

    #[test]
    fn zeroed_modulation_dfblock_is_rectify_then_conv() {
        let (mut store, mut rng) = setup();
        let blk = DfBlock::new(&mut Builder::new(&mut store, &mut rng), 3, 2, 2);
        let x = randn(&[1, 2, 4, 4], 3);
        let y = blk.forward(&x, &randn(&[1, 3], 4)).unwrap();
        let h = x.leaky_relu(LEAKY_SLOPE).leaky_relu(LEAKY_SLOPE);
        assert!(y.value().max_abs_diff(blk.conv.forward(&h).value()) < 1e-15);
    }
}
