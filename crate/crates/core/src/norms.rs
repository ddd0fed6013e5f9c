use serde::Serialize;

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Matrices with both dimensions at most this size use a full SVD.
pub const SVD_MAX_DIM: usize = 512;
const POWER_MAX_ITERS: usize = 10_000;
const POWER_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Spectral,
    Frobenius,
    /// Maximum absolute column sum.
    One,
    /// Maximum absolute row sum.
    Inf,
    /// Largest absolute entry.
    Max,
}

pub fn norm(a: &Mat, kind: NormKind) -> Result<f64> {
    Ok(match kind {
        NormKind::Spectral => spectral(a)?,
        NormKind::Frobenius => a.frobenius(),
        NormKind::One => (0..a.cols())
            .map(|j| (0..a.rows()).map(|i| a[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max),
        NormKind::Inf => (0..a.rows())
            .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max),
        NormKind::Max => a.max_abs(),
    })
}

/// Largest singular value.
pub fn spectral(a: &Mat) -> Result<f64> {
    if a.is_empty() || a.max_abs() == 0.0 {
        return Ok(0.0);
    }
    if a.rows() <= SVD_MAX_DIM && a.cols() <= SVD_MAX_DIM {
        Ok(singular_values(a)?.into_iter().fold(0.0, f64::max))
    } else {
        spectral_power(a)
    }
}

pub fn singular_values(a: &Mat) -> Result<Vec<f64>> {
    if a.is_empty() {
        return Ok(Vec::new());
    }
    let svd = a
        .to_nalgebra()
        .try_svd(false, false, f64::EPSILON, POWER_MAX_ITERS)
        .ok_or(Error::ConvergenceFailure {
            iterations: POWER_MAX_ITERS,
        })?;
    Ok(svd.singular_values.iter().copied().collect())
}

/// Numerical rank: singular values above `1e-10·σ_max`.
pub fn numerical_rank(a: &Mat) -> Result<usize> {
    let s = singular_values(a)?;
    let smax = s.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&v| v > 1e-10 * smax).count())
}

/// Power iteration on the smaller Gram matrix. Deterministic start vector.
pub fn spectral_power(a: &Mat) -> Result<f64> {
    let gram = if a.cols() <= a.rows() {
        a.t().dot(a)
    } else {
        a.dot(&a.t())
    };
    let n = gram.rows();
    let mut v: Vec<f64> = (0..n)
        .map(|i| 1.0 + 0.1 * ((i + 1) as f64).sin())
        .collect();
    normalize(&mut v);
    let mut prev = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let mut w = vec![0.0; n];
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = gram.row(i).iter().zip(&v).map(|(g, x)| g * x).sum();
        }
        let rq: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        let nw = normalize(&mut w);
        if nw == 0.0 {
            return Ok(0.0);
        }
        v = w;
        if (rq - prev).abs() <= POWER_REL_TOL * rq.abs() {
            return Ok(rq.max(0.0).sqrt());
        }
        prev = rq;
    }
    Err(Error::ConvergenceFailure {
        iterations: POWER_MAX_ITERS,
    })
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

#[derive(Debug, Clone, Serialize)]
pub struct InequalityCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Every off-diagonal entry of the norm comparison table `‖A‖_X ≤ c·‖A‖_Y`
/// for `A ∈ R^{m×n}`, with `d = rank(A)`.
pub fn check_inequality_table(a: &Mat) -> Result<Vec<InequalityCheck>> {
    use NormKind::*;
    let (m, n) = (a.rows() as f64, a.cols() as f64);
    let d = numerical_rank(a)? as f64;
    let kinds = [Max, One, Inf, Spectral, Frobenius];
    let vals: Vec<f64> = kinds
        .iter()
        .map(|&k| norm(a, k))
        .collect::<Result<_>>()?;
    // rows X, columns Y; NaN marks the diagonal
    let c = [
        [f64::NAN, 1.0, 1.0, 1.0, 1.0],
        [m, f64::NAN, m, m.sqrt(), m.sqrt()],
        [n, n, f64::NAN, n.sqrt(), n.sqrt()],
        [(m * n).sqrt(), n.sqrt(), m.sqrt(), f64::NAN, 1.0],
        [(m * n).sqrt(), n.sqrt(), m.sqrt(), d.sqrt(), f64::NAN],
    ];
    let label = |k: NormKind| format!("{k:?}").to_lowercase();
    let mut out = Vec::with_capacity(20);
    for (x, kx) in kinds.iter().enumerate() {
        for (y, ky) in kinds.iter().enumerate() {
            if x == y {
                continue;
            }
            let lhs = vals[x];
            let rhs = c[x][y] * vals[y];
            out.push(InequalityCheck {
                name: format!("{}<={}*{}", label(*kx), c[x][y], label(*ky)),
                lhs,
                rhs,
                holds: lhs <= rhs * (1.0 + 1e-12) + 1e-300,
            });
        }
    }
    Ok(out)
}

/// `√(m_b·n_b)·max‖B_ij‖₂`, or `max‖B_ii‖₂` when the grid is block diagonal.
pub fn block_norm_bound(blocks: &[Vec<Mat>]) -> Result<f64> {
    let mb = blocks.len();
    let nb = blocks.first().map_or(0, |r| r.len());
    if blocks.iter().any(|r| r.len() != nb) {
        return Err(Error::ShapeMismatch {
            op: "block_norm_bound",
            left: (mb, nb),
            right: (mb, 0),
        });
    }
    let block_diag = mb == nb
        && blocks
            .iter()
            .enumerate()
            .all(|(i, r)| r.iter().enumerate().all(|(j, b)| i == j || b.max_abs() == 0.0));
    let mut best: f64 = 0.0;
    for (i, r) in blocks.iter().enumerate() {
        for (j, b) in r.iter().enumerate() {
            if !block_diag || i == j {
                best = best.max(spectral(b)?);
            }
        }
    }
    Ok(if block_diag {
        best
    } else {
        ((mb * nb) as f64).sqrt() * best
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcalc::diag_from_vec;

    #[test]
    fn examples() {
        assert!((spectral(&Mat::ones(4, 4)).unwrap() - 4.0).abs() < 1e-12);
        assert!((norm(&Mat::eye(3), NormKind::Frobenius).unwrap() - 3f64.sqrt()).abs() < 1e-15);
        let d = diag_from_vec(&Mat::col_vec(vec![3.0, -7.0]));
        assert!((spectral(&d).unwrap() - 7.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_table_holds_with_equality() {
        let t = check_inequality_table(&Mat::zeros(3, 4)).unwrap();
        assert_eq!(t.len(), 20);
        assert!(t.iter().all(|c| c.holds && c.lhs == 0.0));
    }

    #[test]
    fn rank_one_frobenius_equals_spectral() {
        let u = Mat::col_vec(vec![1.0, -2.0, 0.5]);
        let v = Mat::from_rows(&[&[0.3, 1.0, 2.0, -1.0]]);
        let a = u.dot(&v);
        let f = norm(&a, NormKind::Frobenius).unwrap();
        let s = spectral(&a).unwrap();
        assert!((f - s).abs() < 1e-12 * f);
        assert_eq!(numerical_rank(&a).unwrap(), 1);
    }

    #[test]
    fn block_norm_examples() {
        let b = Mat::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]);
        let one = block_norm_bound(&[vec![b.clone()]]).unwrap();
        assert!((one - spectral(&b).unwrap()).abs() < 1e-15);
        let d2 = Mat::from_rows(&[&[2.0]]);
        let d5 = Mat::from_rows(&[&[5.0]]);
        let z = Mat::zeros(1, 1);
        let grid = vec![vec![d2, z.clone()], vec![z, d5]];
        assert_eq!(block_norm_bound(&grid).unwrap(), 5.0);
    }

    #[test]
    fn power_iteration_on_tall_matrix() {
        let a = Mat::from_fn(600, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let p = spectral(&a).unwrap();
        let s = singular_values(&a).unwrap().into_iter().fold(0.0, f64::max);
        assert!((p - s).abs() <= 1e-8 * s);
    }
}
