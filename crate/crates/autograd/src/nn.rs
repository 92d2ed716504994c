//! Layer-level functions composed from differentiable primitives.

use crate::tensor::dims4;
use crate::var::Var;

/// `x @ weight^T + bias` over the last axis, with `weight` laid out `[out, in]`.
pub fn linear(x: &Var, weight: &Var, bias: Option<&Var>) -> Var {
    let in_dim = *x.shape().last().expect("linear on 0-d input");
    let out_dim = weight.shape()[0];
    let lead: Vec<usize> = x.shape()[..x.shape().len() - 1].to_vec();
    let rows: usize = lead.iter().product();
    let flat = x.reshape(&[rows, in_dim]);
    let mut y = flat.matmul_ex(weight, false, true);
    if let Some(b) = bias {
        y = y.add(b);
    }
    let mut shape = lead;
    shape.push(out_dim);
    y.reshape(&shape)
}

/// Stride-1 2-d convolution of `[B, C, H, W]` with a `[O, C, k, k]` kernel.
pub fn conv2d(x: &Var, weight: &Var, bias: Option<&Var>, pad: usize) -> Var {
    let [b, c, h, w] = dims4(x.shape(), "conv2d");
    let [o, wc, k, k2] = dims4(weight.shape(), "conv2d kernel");
    assert_eq!(c, wc, "conv2d: input has {c} channels, kernel expects {wc}");
    assert_eq!(k, k2, "conv2d: only square kernels are supported");
    let (ho, wo) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
    let cols = if k == 1 && pad == 0 {
        x.permute(&[0, 2, 3, 1]).reshape(&[b * h * w, c])
    } else {
        x.unfold(k, pad).reshape(&[b * ho * wo, c * k * k])
    };
    let mut y = cols.matmul_ex(&weight.reshape(&[o, c * k * k]), false, true);
    if let Some(bias) = bias {
        y = y.add(bias);
    }
    y.reshape(&[b, ho, wo, o]).permute(&[0, 3, 1, 2])
}

/// Nearest-neighbour 2× upsampling of `[B, C, H, W]`.
pub fn upsample_nearest2x(x: &Var) -> Var {
    let [b, c, h, w] = dims4(x.shape(), "upsample");
    x.reshape(&[b, c, h, 1, w, 1])
        .broadcast_to(&[b, c, h, 2, w, 2])
        .reshape(&[b, c, 2 * h, 2 * w])
}

/// Softmax along `axis`. The subtracted maximum is treated as a constant,
/// which leaves the gradient unchanged.
pub fn softmax(x: &Var, axis: usize) -> Var {
    let max = Var::constant(x.value().max_axis(axis, true));
    let e = x.sub(&max).exp();
    e.div(&e.sum_axis(axis, true))
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Var, weight: &Var, bias: &Var, eps: f64) -> Var {
    let axis = x.shape().len() - 1;
    let centered = x.sub(&x.mean_axis(axis, true));
    let var = centered.square().mean_axis(axis, true);
    let normed = centered.div(&var.add_scalar(eps).sqrt_safe());
    normed.mul(weight).add(bias)
}

/// `x * sigmoid(1.702 x)`, the activation of the original contrastive image/text models.
pub fn quick_gelu(x: &Var) -> Var {
    x.mul(&x.scale(1.702).sigmoid())
}

/// Per-row Euclidean norm of a `[N, D]` value, returned as `[N]`.
pub fn row_norms(x: &Var) -> Var {
    x.square().sum_axis(1, false).sqrt_safe()
}

/// Per-row cosine similarity of two `[N, D]` values, returned as `[N]`.
pub fn cosine_rows(a: &Var, b: &Var) -> Var {
    let dot = a.mul(b).sum_axis(1, false);
    dot.div(&row_norms(a).mul(&row_norms(b)).add_scalar(1e-12))
}

/// Flattens every axis after the first.
pub fn flatten_rows(x: &Var) -> Var {
    let n = x.shape()[0];
    let rest: usize = x.shape()[1..].iter().product();
    x.reshape(&[n, rest])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{grad, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Var::constant(Tensor::randn(vec![3, 5], 4.0, &mut rng));
        let s = softmax(&x, 1);
        for r in s.value().sum_axis(1, false).data() {
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Var::constant(Tensor::randn(vec![4, 16], 3.0, &mut rng));
        let y = layer_norm(&x, &Var::constant(Tensor::ones(vec![16])), &Var::constant(Tensor::zeros(vec![16])), 1e-5);
        let mean = y.value().sum_axis(1, false);
        for m in mean.data() {
            assert!(m.abs() < 1e-10);
        }
    }

    #[test]
    fn conv1x1_matches_general_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Var::constant(Tensor::randn(vec![2, 3, 4, 4], 1.0, &mut rng));
        let w = Var::constant(Tensor::randn(vec![5, 3, 1, 1], 1.0, &mut rng));
        let fast = conv2d(&x, &w, None, 0);
        let cols = x.unfold(1, 0).reshape(&[32, 3]);
        let slow = cols.matmul_ex(&w.reshape(&[5, 3]), false, true).reshape(&[2, 4, 4, 5]).permute(&[0, 3, 1, 2]);
        assert!(fast.value().max_abs_diff(slow.value()) < 1e-12);
    }

    #[test]
    fn upsample_gradient_sums_blocks() {
        let x = Var::leaf(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]));
        let y = upsample_nearest2x(&x);
        assert_eq!(y.value().data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let g = grad(&y.sum(), &[&x], false).unwrap()[0].clone().unwrap();
        assert_eq!(g.value().data(), &[4.0, 4.0]);
    }

    #[test]
    fn cosine_of_parallel_rows_is_one() {
        let a = Var::constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]));
        let b = a.scale(2.5);
        assert!((cosine_rows(&a, &b).item() - 1.0).abs() < 1e-12);
    }
}
