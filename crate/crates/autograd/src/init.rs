//! Parameter initializers.

use rand::Rng;

use crate::tensor::Tensor;

/// A `rows × cols` matrix with orthonormal rows (when `rows <= cols`) or
/// orthonormal columns (otherwise), scaled by `gain`.
///
/// Orthonormalizes a Gaussian sample with two rounds of Cholesky QR, which
/// keeps the cost inside matrix products.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Tensor {
    let (short, long) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    // `a` is short × long with the vectors to orthonormalize as rows.
    let mut a = Tensor::randn(vec![short, long], 1.0, rng);
    for _ in 0..2 {
        let gram = Tensor::matmul_ex(&a, &a, false, true);
        let l = cholesky(gram.data(), short);
        let linv = lower_inverse(&l, short);
        a = Tensor::matmul_ex(&Tensor::new(vec![short, short], linv), &a, false, false);
    }
    let a = if rows <= cols { a } else { a.permute(&[1, 0]) };
    a.scale(gain)
}

fn cholesky(m: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = m[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                l[i * n + i] = s.max(f64::MIN_POSITIVE).sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    l
}

fn lower_inverse(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    for col in 0..n {
        for i in col..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                s -= l[i * n + k] * inv[k * n + col];
            }
            inv[i * n + col] = s / l[i * n + i];
        }
    }
    inv
}
