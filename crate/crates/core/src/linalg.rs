//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

fn norm_one(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Inverse together with the 1-norm reciprocal condition number.
/// Returns `None` when LU factorisation finds an exactly singular matrix.
pub fn inverse_with_rcond(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    if m.nrows() == 0 {
        return Some((DMatrix::zeros(0, 0), 1.0));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let inv = m.clone().lu().try_inverse()?;
    let denom = norm_one(m) * norm_one(&inv);
    if !denom.is_finite() || denom == 0.0 {
        return None;
    }
    Some((inv, 1.0 / denom))
}

/// 1-norm reciprocal condition number; zero for singular input.
pub fn rcond(m: &DMatrix<f64>) -> f64 {
    inverse_with_rcond(m).map_or(0.0, |(_, r)| r)
}

/// Solves `m x = rhs` when `rcond(m) >= threshold`.
pub fn solve_conditioned(
    m: &DMatrix<f64>,
    rhs: &DVector<f64>,
    threshold: f64,
) -> Option<DVector<f64>> {
    let (inv, r) = inverse_with_rcond(m)?;
    (r >= threshold).then(|| inv * rhs)
}

/// `acc += scale * v v'`
#[inline]
pub fn add_outer(acc: &mut DMatrix<f64>, v: &DVector<f64>, scale: f64) {
    let n = v.len();
    for c in 0..n {
        let vc = v[c] * scale;
        for r in 0..n {
            acc[(r, c)] += v[r] * vc;
        }
    }
}

/// `acc += scale * a b'`
#[inline]
pub fn add_outer2(acc: &mut DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>, scale: f64) {
    for c in 0..b.len() {
        let bc = b[c] * scale;
        for r in 0..a.len() {
            acc[(r, c)] += a[r] * bc;
        }
    }
}

pub fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
