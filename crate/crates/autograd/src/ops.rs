//! Differentiable primitives. Each backward is expressed through other
//! primitives so gradients can be differentiated again.

use crate::tensor::{broadcast_shapes, Tensor};
use crate::var::Var;

fn unbroadcast(g: &Var, shape: &[usize]) -> Var {
    if g.shape() == shape {
        g.clone()
    } else {
        g.sum_to(shape)
    }
}

fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        let value = self.value().add(other.value());
        Var::from_op("add", value, vec![self.clone(), other.clone()], |ctx| {
            let [a, b] = ctx.parents else { unreachable!() };
            vec![
                ctx.needs(0).then(|| unbroadcast(ctx.grad, a.shape())),
                ctx.needs(1).then(|| unbroadcast(ctx.grad, b.shape())),
            ]
        })
    }

    pub fn sub(&self, other: &Var) -> Var {
        let value = self.value().sub(other.value());
        Var::from_op("sub", value, vec![self.clone(), other.clone()], |ctx| {
            let [a, b] = ctx.parents else { unreachable!() };
            vec![
                ctx.needs(0).then(|| unbroadcast(ctx.grad, a.shape())),
                ctx.needs(1).then(|| unbroadcast(&ctx.grad.neg(), b.shape())),
            ]
        })
    }

    pub fn mul(&self, other: &Var) -> Var {
        let value = self.value().mul(other.value());
        Var::from_op("mul", value, vec![self.clone(), other.clone()], |ctx| {
            let [a, b] = ctx.parents else { unreachable!() };
            vec![
                ctx.needs(0).then(|| unbroadcast(&ctx.grad.mul(b), a.shape())),
                ctx.needs(1).then(|| unbroadcast(&ctx.grad.mul(a), b.shape())),
            ]
        })
    }

    pub fn div(&self, other: &Var) -> Var {
        let value = self.value().zip_with(other.value(), |a, b| a / b);
        Var::from_op("div", value, vec![self.clone(), other.clone()], |ctx| {
            let [a, b] = ctx.parents else { unreachable!() };
            vec![
                ctx.needs(0).then(|| unbroadcast(&ctx.grad.div(b), a.shape())),
                ctx.needs(1).then(|| unbroadcast(&ctx.grad.mul(ctx.out).div(b).neg(), b.shape())),
            ]
        })
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var {
        Var::from_op("scale", self.value().scale(c), vec![self.clone()], move |ctx| {
            vec![Some(ctx.grad.scale(c))]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        Var::from_op("add_scalar", self.value().map(|v| v + c), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.clone())]
        })
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn exp(&self) -> Var {
        Var::from_op("exp", self.value().map(f64::exp), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.mul(ctx.out))]
        })
    }

    pub fn ln(&self) -> Var {
        Var::from_op("ln", self.value().map(f64::ln), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.div(&ctx.parents[0]))]
        })
    }

    pub fn tanh(&self) -> Var {
        Var::from_op("tanh", self.value().map(f64::tanh), vec![self.clone()], |ctx| {
            let one_minus = ctx.out.square().neg().add_scalar(1.0);
            vec![Some(ctx.grad.mul(&one_minus))]
        })
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.value().map(|v| 1.0 / (1.0 + (-v).exp()));
        Var::from_op("sigmoid", value, vec![self.clone()], |ctx| {
            let slope = ctx.out.mul(&ctx.out.neg().add_scalar(1.0));
            vec![Some(ctx.grad.mul(&slope))]
        })
    }

    pub fn powf(&self, p: f64) -> Var {
        Var::from_op("powf", self.value().map(|v| v.powf(p)), vec![self.clone()], move |ctx| {
            let x = &ctx.parents[0];
            let d = if p == 1.0 { ctx.grad.clone() } else { ctx.grad.mul(&x.powf(p - 1.0).scale(p)) };
            vec![Some(d)]
        })
    }

    /// Square root whose derivative at exactly zero is taken as zero.
    pub fn sqrt_safe(&self) -> Var {
        Var::from_op("sqrt_safe", self.value().map(f64::sqrt), vec![self.clone()], |ctx| {
            let zero_mask = ctx.out.value().map(|v| if v == 0.0 { 1.0 } else { 0.0 });
            let keep = Var::constant(zero_mask.map(|m| 1.0 - m));
            let denom = ctx.out.add(&Var::constant(zero_mask)).scale(2.0);
            vec![Some(ctx.grad.div(&denom).mul(&keep))]
        })
    }

    pub fn relu(&self) -> Var {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let value = self.value().map(|v| if v > 0.0 { v } else { slope * v });
        Var::from_op("leaky_relu", value, vec![self.clone()], move |ctx| {
            let mask = ctx.parents[0].value().map(|v| if v > 0.0 { 1.0 } else { slope });
            vec![Some(ctx.grad.mul(&Var::constant(mask)))]
        })
    }

    /// Sum of all elements as a 0-d value.
    pub fn sum(&self) -> Var {
        Var::from_op("sum", Tensor::scalar(self.value().sum()), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.broadcast_to(ctx.parents[0].shape()))]
        })
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Var {
        let value = self.value().sum_axis(axis, keepdim);
        Var::from_op("sum_axis", value, vec![self.clone()], move |ctx| {
            let shape = ctx.parents[0].shape();
            let mut kept = shape.to_vec();
            kept[axis] = 1;
            vec![Some(ctx.grad.reshape(&kept).broadcast_to(shape))]
        })
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Var {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis, keepdim).scale(1.0 / n)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        Var::from_op("broadcast_to", self.value().broadcast_to(shape), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.sum_to(ctx.parents[0].shape()))]
        })
    }

    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        Var::from_op("sum_to", self.value().sum_to(shape), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.broadcast_to(ctx.parents[0].shape()))]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        Var::from_op("reshape", self.value().reshape(shape.to_vec()), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.reshape(ctx.parents[0].shape()))]
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Var {
        let inv = inverse_permutation(axes);
        Var::from_op("permute", self.value().permute(axes), vec![self.clone()], move |ctx| {
            vec![Some(ctx.grad.permute(&inv))]
        })
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let full = self.shape()[axis];
        if start == 0 && len == full {
            return self.clone();
        }
        Var::from_op("narrow", self.value().narrow(axis, start, len), vec![self.clone()], move |ctx| {
            vec![Some(ctx.grad.pad_axis(axis, start, full - start - len))]
        })
    }

    pub fn pad_axis(&self, axis: usize, before: usize, after: usize) -> Var {
        let len = self.shape()[axis];
        Var::from_op("pad_axis", self.value().pad_axis(axis, before, after), vec![self.clone()], move |ctx| {
            vec![Some(ctx.grad.narrow(axis, before, len))]
        })
    }

    pub fn concat(parts: &[Var], axis: usize) -> Var {
        if parts.len() == 1 {
            return parts[0].clone();
        }
        let tensors: Vec<&Tensor> = parts.iter().map(Var::value).collect();
        let value = Tensor::concat(&tensors, axis);
        Var::from_op("concat", value, parts.to_vec(), move |ctx| {
            let mut start = 0;
            ctx.parents
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let len = p.shape()[axis];
                    let g = ctx.needs(i).then(|| ctx.grad.narrow(axis, start, len));
                    start += len;
                    g
                })
                .collect()
        })
    }

    /// `op(self) @ op(other)` with optional transposes of the last two axes.
    pub fn matmul_ex(&self, other: &Var, ta: bool, tb: bool) -> Var {
        let value = Tensor::matmul_ex(self.value(), other.value(), ta, tb);
        Var::from_op("matmul", value, vec![self.clone(), other.clone()], move |ctx| {
            let [a, b] = ctx.parents else { unreachable!() };
            let g = ctx.grad;
            let ga = ctx.needs(0).then(|| match (ta, tb) {
                (false, false) => g.matmul_ex(b, false, true),
                (false, true) => g.matmul_ex(b, false, false),
                (true, false) => b.matmul_ex(g, false, true),
                (true, true) => b.matmul_ex(g, true, true),
            });
            let gb = ctx.needs(1).then(|| match (ta, tb) {
                (false, false) => a.matmul_ex(g, true, false),
                (false, true) => g.matmul_ex(a, true, false),
                (true, false) => a.matmul_ex(g, false, false),
                (true, true) => g.matmul_ex(a, true, true),
            });
            vec![ga, gb]
        })
    }

    pub fn matmul(&self, other: &Var) -> Var {
        self.matmul_ex(other, false, false)
    }

    /// Stride-1 im2col, see [`Tensor::unfold`].
    pub fn unfold(&self, k: usize, pad: usize) -> Var {
        let [_, c, h, w] = crate::tensor::dims4(self.shape(), "unfold");
        Var::from_op("unfold", self.value().unfold(k, pad), vec![self.clone()], move |ctx| {
            vec![Some(ctx.grad.fold(c, h, w, k, pad))]
        })
    }

    pub fn fold(&self, c: usize, h: usize, w: usize, k: usize, pad: usize) -> Var {
        Var::from_op("fold", self.value().fold(c, h, w, k, pad), vec![self.clone()], move |ctx| {
            vec![Some(ctx.grad.unfold(k, pad))]
        })
    }
}

/// Shape of the broadcast result of two values, if compatible.
pub fn result_shape(a: &Var, b: &Var) -> Option<Vec<usize>> {
    broadcast_shapes(a.shape(), b.shape())
}
