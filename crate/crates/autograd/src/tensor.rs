//! Dense, contiguous, row-major `f64` tensors.
//!
//! Storage is reference counted, so cloning a tensor or reshaping it is
//! cheap. Every other operation allocates a fresh buffer. Shape errors are
//! programming errors at this level and panic with a message naming the
//! operation; modules built on top validate user-facing shapes first.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

/// Numpy-style broadcast of two shapes, aligned at the trailing axis.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` when viewed as broadcast into `target`; broadcast axes get stride 0.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = target.len() - shape.len();
    (0..target.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Walks every index of `shape` in row-major order, handing the flat output
/// index together with the two strided source offsets to `f`.
fn strided_walk(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let n = numel(shape);
    if n == 0 {
        return;
    }
    let last = shape[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut ia, mut ib, mut o) = (0usize, 0usize, 0usize);
    while o < n {
        for j in 0..last {
            f(o + j, ia + j * la, ib + j * lb);
        }
        o += last;
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            ia -= sa[d] * shape[d];
            ib -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        let shape = shape.into();
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self { shape, data: Arc::new(data) }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(Vec::new(), vec![v])
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::new(shape, vec![v; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape))
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::new(shape, data)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(|_| rng.gen_range(lo..hi)).collect();
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// True when both tensors share shape and have bit-identical values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Tensor {
        let shape = shape.into();
        assert_eq!(
            numel(&shape),
            self.numel(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        Tensor { shape, data: Arc::clone(&self.data) }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise binary operation with numpy broadcasting.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        if self.shape == other.shape {
            let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
            return Tensor::new(self.shape.clone(), data);
        }
        let out_shape = broadcast_shapes(&self.shape, &other.shape).unwrap_or_else(|| {
            panic!("shapes {:?} and {:?} do not broadcast", self.shape, other.shape)
        });
        if other.numel() == 1 && out_shape == self.shape {
            let b = other.data[0];
            return self.map(|a| f(a, b));
        }
        if self.numel() == 1 && out_shape == other.shape {
            let a = self.data[0];
            return other.map(|b| f(a, b));
        }
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let mut out = vec![0.0; numel(&out_shape)];
        let (da, db) = (self.data(), other.data());
        strided_walk(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
        Tensor::new(out_shape, out)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let check = broadcast_shapes(&self.shape, shape);
        assert!(
            check.as_deref() == Some(shape),
            "cannot broadcast {:?} to {:?}",
            self.shape,
            shape
        );
        let sa = broadcast_strides(&self.shape, shape);
        let zeros = vec![0; shape.len()];
        let mut out = vec![0.0; numel(shape)];
        let src = self.data();
        strided_walk(shape, &sa, &zeros, |o, ia, _| out[o] = src[ia]);
        Tensor::new(shape.to_vec(), out)
    }

    /// Sums away broadcast axes so the result has `shape`; the adjoint of `broadcast_to`.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let check = broadcast_shapes(shape, &self.shape);
        assert!(
            check.as_deref() == Some(self.shape.as_slice()),
            "cannot sum {:?} down to {:?}",
            self.shape,
            shape
        );
        let so = broadcast_strides(shape, &self.shape);
        let zeros = vec![0; self.shape.len()];
        let mut out = vec![0.0; numel(shape)];
        let src = self.data();
        strided_walk(&self.shape, &so, &zeros, |i, io, _| out[io] += src[i]);
        Tensor::new(shape.to_vec(), out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let (outer, len, inner) = outer_inner(&self.shape, axis);
        let mut out = vec![0.0; outer * inner];
        let src = self.data();
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Tensor::new(shape, out)
    }

    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let (outer, len, inner) = outer_inner(&self.shape, axis);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let src = self.data();
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    let v = src[base + i];
                    let d = &mut out[o * inner + i];
                    if v > *d {
                        *d = v;
                    }
                }
            }
        }
        let mut shape = self.shape.clone();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Tensor::new(shape, out)
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        assert_eq!(axes.len(), self.rank(), "permute axes {:?} for shape {:?}", axes, self.shape);
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return self.clone();
        }
        let own = contiguous_strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let sa: Vec<usize> = axes.iter().map(|&a| own[a]).collect();
        let zeros = vec![0; axes.len()];
        let mut out = vec![0.0; self.numel()];
        let src = self.data();
        strided_walk(&out_shape, &sa, &zeros, |o, ia, _| out[o] = src[ia]);
        Tensor::new(out_shape, out)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let (outer, full, inner) = outer_inner(&self.shape, axis);
        assert!(start + len <= full, "narrow {start}+{len} beyond axis of size {full}");
        let mut out = Vec::with_capacity(outer * len * inner);
        let src = self.data();
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(shape, out)
    }

    /// Zero-pad along `axis`; the adjoint of `narrow`.
    pub fn pad_axis(&self, axis: usize, before: usize, after: usize) -> Tensor {
        let (outer, len, inner) = outer_inner(&self.shape, axis);
        let full = before + len + after;
        let mut out = vec![0.0; outer * full * inner];
        let src = self.data();
        for o in 0..outer {
            let dst = (o * full + before) * inner;
            out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = full;
        Tensor::new(shape, out)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = parts[0].shape();
        for p in parts {
            assert_eq!(p.rank(), first.len(), "concat rank mismatch");
            for (i, (&a, &b)) in p.shape().iter().zip(first).enumerate() {
                assert!(i == axis || a == b, "concat shape mismatch {:?} vs {:?}", p.shape(), first);
            }
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = p.shape()[axis] * inner;
                out.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        Tensor::new(shape, out)
    }

    /// Rows of a `[rows, dim]` table selected by index.
    pub fn gather_rows(&self, ids: &[usize]) -> Tensor {
        assert_eq!(self.rank(), 2, "gather_rows expects a 2-d table");
        let dim = self.shape[1];
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            assert!(i < self.shape[0], "row {i} out of range for table of {} rows", self.shape[0]);
            out.extend_from_slice(&self.data[i * dim..(i + 1) * dim]);
        }
        Tensor::new(vec![ids.len(), dim], out)
    }

    /// `op(a) @ op(b)` for 2-d operands or 3-d operands sharing a batch axis.
    pub fn matmul_ex(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
        let (batch, ar, ac, br, bc) = match (a.shape(), b.shape()) {
            ([ar, ac], [br, bc]) => (None, *ar, *ac, *br, *bc),
            ([na, ar, ac], [nb, br, bc]) => {
                assert_eq!(na, nb, "batched matmul batch mismatch {:?} x {:?}", a.shape(), b.shape());
                (Some(*na), *ar, *ac, *br, *bc)
            }
            _ => panic!("matmul unsupported for shapes {:?} x {:?}", a.shape(), b.shape()),
        };
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner mismatch {:?}^{} x {:?}^{}", a.shape(), ta, b.shape(), tb);
        let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
        let nb = batch.unwrap_or(1);
        let mut out = vec![0.0; nb * m * n];
        for i in 0..nb {
            let pa = &a.data()[i * ar * ac..(i + 1) * ar * ac];
            let pb = &b.data()[i * br * bc..(i + 1) * br * bc];
            let pc = &mut out[i * m * n..(i + 1) * m * n];
            if m == 0 || n == 0 {
                continue;
            }
            // SAFETY: slices cover exactly the m×k, k×n and m×n extents the
            // strides describe, and `pc` is exclusively borrowed.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    pa.as_ptr(),
                    rsa,
                    csa,
                    pb.as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    pc.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        let shape = match batch {
            Some(nb) => vec![nb, m, n],
            None => vec![m, n],
        };
        Tensor::new(shape, out)
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        Tensor::matmul_ex(self, other, false, false)
    }

    /// im2col for stride-1 convolution: `[B, C, H, W]` to `[B, Ho*Wo, C*k*k]`
    /// with `Ho = H + 2*pad - k + 1`. Column order matches a `[O, C, k, k]` kernel.
    pub fn unfold(&self, k: usize, pad: usize) -> Tensor {
        let [b, c, h, w] = dims4(self.shape(), "unfold");
        let (ho, wo) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
        let row = c * k * k;
        let mut out = vec![0.0; b * ho * wo * row];
        let src = self.data();
        for bi in 0..b {
            for ci in 0..c {
                let plane = &src[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                for ki in 0..k {
                    for kj in 0..k {
                        let col = ci * k * k + ki * k + kj;
                        for oy in 0..ho {
                            let iy = oy + ki;
                            if iy < pad || iy >= h + pad {
                                continue;
                            }
                            let iy = iy - pad;
                            let obase = (bi * ho * wo + oy * wo) * row + col;
                            for ox in 0..wo {
                                let ix = ox + kj;
                                if ix < pad || ix >= w + pad {
                                    continue;
                                }
                                out[obase + ox * row] = plane[iy * w + ix - pad];
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![b, ho * wo, row], out)
    }

    /// col2im; the adjoint of [`Tensor::unfold`] for an `[B, C, h, w]` image.
    pub fn fold(&self, c: usize, h: usize, w: usize, k: usize, pad: usize) -> Tensor {
        let (ho, wo) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
        let row = c * k * k;
        let b = match self.shape() {
            [b, l, r] if *l == ho * wo && *r == row => *b,
            s => panic!("fold: columns of shape {s:?} do not match image [{c}, {h}, {w}] k={k}"),
        };
        let mut out = vec![0.0; b * c * h * w];
        let src = self.data();
        for bi in 0..b {
            for ci in 0..c {
                let plane = &mut out[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                for ki in 0..k {
                    for kj in 0..k {
                        let col = ci * k * k + ki * k + kj;
                        for oy in 0..ho {
                            let iy = oy + ki;
                            if iy < pad || iy >= h + pad {
                                continue;
                            }
                            let iy = iy - pad;
                            let sbase = (bi * ho * wo + oy * wo) * row + col;
                            for ox in 0..wo {
                                let ix = ox + kj;
                                if ix < pad || ix >= w + pad {
                                    continue;
                                }
                                plane[iy * w + ix - pad] += src[sbase + ox * row];
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![b, c, h, w], out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) fn dims4(shape: &[usize], op: &str) -> [usize; 4] {
    match shape {
        [a, b, c, d] => [*a, *b, *c, *d],
        s => panic!("{op} expects a 4-d tensor, got {s:?}"),
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOW: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.5}")?;
        }
        if self.numel() > SHOW {
            write!(f, ", …")?;
        }
        write!(f, "]")
    }
}
