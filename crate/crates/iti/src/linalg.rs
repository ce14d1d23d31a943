//! Small dense vector helpers.
//!
//! Values are stored as `f32`; dot products accumulate in `f64` so the
//! hooked and baked intervention paths agree to tight tolerances.

/// Dot product with f64 accumulation.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc as f32
}

pub fn norm(a: &[f32]) -> f32 {
    let mut acc = 0.0f64;
    for x in a {
        acc += f64::from(*x) * f64::from(*x);
    }
    acc.sqrt() as f32
}

/// Unit-normalize; `None` if the norm is (near) zero.
pub fn normalize(a: &[f32]) -> Option<Vec<f32>> {
    let n = norm(a);
    if n <= 1e-12 {
        return None;
    }
    Some(a.iter().map(|x| x / n).collect())
}

/// y += alpha * x
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (xi, yi) in x.iter().zip(y.iter_mut()) {
        *yi += alpha * xi;
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let na = norm(a);
    let nb = norm(b);
    if na <= 1e-12 || nb <= 1e-12 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Coordinate-wise mean of equal-length rows.
pub fn mean_rows<'a>(rows: impl Iterator<Item = &'a [f32]>, dim: usize) -> Option<Vec<f32>> {
    let mut acc = vec![0.0f64; dim];
    let mut n = 0usize;
    for row in rows {
        debug_assert_eq!(row.len(), dim);
        for (a, x) in acc.iter_mut().zip(row) {
            *a += f64::from(*x);
        }
        n += 1;
    }
    if n == 0 {
        return None;
    }
    Some(acc.iter().map(|a| (*a / n as f64) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_rejects_zero() {
        assert!(normalize(&[0.0, 0.0]).is_none());
        let u = normalize(&[3.0, 4.0]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-6 && (u[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn cosine_of_orthogonal_is_zero() {
        assert!(cosine(&[1.0, 0.0], &[0.0, 2.0]).abs() < 1e-7);
    }
}
