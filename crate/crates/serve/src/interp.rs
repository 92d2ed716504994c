use crate::error::{ServeError, ServeResult};

/// Bilinear blend of four corner embeddings, ordered `[e00, e10, e01, e11]`
/// where the first index follows `u` and the second `v`.
pub fn interp_embedding(corners: [&[f64]; 4], u: f64, v: f64) -> ServeResult<Vec<f64>> {
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
        return Err(ServeError::BadRequest(format!("blend coordinates ({u}, {v}) must lie in [0, 1]")));
    }
    let d = corners[0].len();
    if corners.iter().any(|c| c.len() != d) {
        return Err(ServeError::BadRequest("corner embeddings differ in length".into()));
    }
    let w = [(1.0 - u) * (1.0 - v), u * (1.0 - v), (1.0 - u) * v, u * v];
    // Exact corner weights keep corners bit-identical to their inputs.
    if let Some(i) = w.iter().position(|&x| x == 1.0) {
        return Ok(corners[i].to_vec());
    }
    Ok((0..d).map(|j| (0..4).map(|i| w[i] * corners[i][j]).sum()).collect())
}

/// Blend coordinate of index `i` among `n ≥ 2` evenly spaced points on `[0, 1]`.
pub fn axis_coord(i: usize, n: usize) -> f64 {
    i as f64 / (n - 1) as f64
}
