//! Finite-difference ground truth for every analytic derivative in the crate.

use serde::Serialize;

use crate::error::{shape_check, Error, Result};
use crate::mat::Mat;
use crate::matcalc::vec_r;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Central,
    /// `(4·D(h/2) − D(h))/3`, fourth order.
    Richardson,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FdConfig {
    pub step: f64,
    pub scheme: Scheme,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl FdConfig {
    pub fn jacobian() -> FdConfig {
        FdConfig {
            step: 1e-5,
            scheme: Scheme::Central,
            rel_tol: 1e-6,
            abs_tol: 1e-12,
        }
    }

    pub fn hessian() -> FdConfig {
        FdConfig {
            step: 1e-4,
            scheme: Scheme::Central,
            rel_tol: 1e-4,
            abs_tol: 1e-12,
        }
    }

    pub fn with_step(mut self, step: f64) -> FdConfig {
        self.step = step;
        self
    }

    pub fn with_tol(mut self, rel_tol: f64) -> FdConfig {
        self.rel_tol = rel_tol;
        self
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> FdConfig {
        self.scheme = scheme;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.step > 0.0 && self.rel_tol > 0.0 && self.abs_tol > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("FdConfig step and tolerances must be > 0".into()))
        }
    }
}

fn central_column<F>(f: &F, x0: &Mat, k: usize, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&Mat) -> Result<Mat>,
{
    let mut xp = x0.clone();
    xp.data_mut()[k] += h;
    let mut xm = x0.clone();
    xm.data_mut()[k] -= h;
    let fp = f(&xp)?;
    let fm = f(&xm)?;
    if !fp.is_finite() || !fm.is_finite() {
        return Err(Error::NonFiniteOutput);
    }
    Ok(fp
        .data()
        .iter()
        .zip(fm.data())
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect())
}

/// Column `k` is the derivative of `vec_r f` along entry `k` of `vec_r X0`,
/// with step `h = step·(1+|x_k|)`.
pub fn fd_jacobian<F>(f: F, x0: &Mat, cfg: &FdConfig) -> Result<Mat>
where
    F: Fn(&Mat) -> Result<Mat>,
{
    cfg.validate()?;
    let out_len = f(x0)?.len();
    let n = x0.len();
    let mut jac = Mat::zeros(out_len, n);
    for k in 0..n {
        let h = cfg.step * (1.0 + x0.data()[k].abs());
        let col = match cfg.scheme {
            Scheme::Central => central_column(&f, x0, k, h)?,
            Scheme::Richardson => {
                let d1 = central_column(&f, x0, k, h)?;
                let d2 = central_column(&f, x0, k, h / 2.0)?;
                d1.iter().zip(&d2).map(|(a, b)| (4.0 * b - a) / 3.0).collect()
            }
        };
        for (i, v) in col.into_iter().enumerate() {
            jac[(i, k)] = v;
        }
    }
    Ok(jac)
}

/// Symmetrized four-point FD Hessian of a scalar function of a flat vector.
pub fn fd_hessian_of_scalar<G>(g: G, w0: &[f64], cfg: &FdConfig) -> Result<Mat>
where
    G: Fn(&[f64]) -> Result<f64>,
{
    cfg.validate()?;
    let n = w0.len();
    let h: Vec<f64> = w0.iter().map(|w| cfg.step * (1.0 + w.abs())).collect();
    let eval = |di: (usize, f64), dj: (usize, f64)| -> Result<f64> {
        let mut w = w0.to_vec();
        w[di.0] += di.1;
        w[dj.0] += dj.1;
        let v = g(&w)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteOutput)
        }
    };
    let mut hess = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let (hi, hj) = (h[i], h[j]);
            let v = (eval((i, hi), (j, hj))? - eval((i, hi), (j, -hj))?
                - eval((i, -hi), (j, hj))?
                + eval((i, -hi), (j, -hj))?)
                / (4.0 * hi * hj);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess)
}

/// FD of a vector-valued gradient, symmetrized.
pub fn fd_jacobian_of_gradient<G>(grad: G, w0: &[f64], cfg: &FdConfig) -> Result<Mat>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let x0 = Mat::col_vec(w0.to_vec());
    let j = fd_jacobian(|x: &Mat| Ok(Mat::col_vec(grad(x.data())?)), &x0, cfg)?;
    Ok((&j + &j.t()).scale(0.5))
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub max_abs_err: f64,
    pub rel_err: f64,
    pub rel_tol: f64,
    pub pass: bool,
}

/// Relative Frobenius error `‖A−N‖_F / max(‖N‖_F, abs_tol)`.
pub fn compare(analytic: &Mat, numeric: &Mat, cfg: &FdConfig) -> Result<ComparisonReport> {
    shape_check(
        analytic.shape() == numeric.shape(),
        "compare",
        analytic.shape(),
        numeric.shape(),
    )?;
    let diff = analytic - numeric;
    let rel_err = diff.frobenius() / numeric.frobenius().max(cfg.abs_tol);
    Ok(ComparisonReport {
        max_abs_err: diff.max_abs(),
        rel_err,
        rel_tol: cfg.rel_tol,
        pass: rel_err <= cfg.rel_tol,
    })
}

/// FD Jacobian of a map whose output is already flattened with `vec_r`.
pub fn fd_jacobian_vec<F>(f: F, x0: &Mat, cfg: &FdConfig) -> Result<Mat>
where
    F: Fn(&Mat) -> Result<Mat>,
{
    fd_jacobian(|x: &Mat| f(x).map(|m| vec_r(&m)), x0, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcalc::kron;

    #[test]
    fn identity_map() {
        let x = Mat::from_fn(2, 3, |i, j| i as f64 - j as f64 * 0.5);
        let j = fd_jacobian(|x: &Mat| Ok(x.clone()), &x, &FdConfig::jacobian()).unwrap();
        assert!((&j - &Mat::eye(6)).max_abs() < 1e-10);
    }

    #[test]
    fn linear_map_is_exact() {
        let a = Mat::from_fn(2, 2, |i, j| 1.0 + i as f64 - 2.0 * j as f64);
        let b = Mat::from_fn(2, 3, |i, j| 0.5 * (i + j) as f64 - 0.2);
        let x = Mat::from_fn(2, 2, |i, j| (i * 2 + j) as f64 * 0.3);
        let j = fd_jacobian(|x: &Mat| Ok(a.dot(x).dot(&b)), &x, &FdConfig::jacobian()).unwrap();
        assert!((&j - &kron(&a, &b.t())).max_abs() < 1e-10);
    }

    #[test]
    fn quadratic_and_constant_hessians() {
        let q = Mat::from_rows(&[&[1.0, 2.0], &[0.0, -3.0]]);
        let g = |w: &[f64]| {
            let v = Mat::col_vec(w.to_vec());
            Ok(v.t().dot(&q).dot(&v)[(0, 0)])
        };
        let h = fd_hessian_of_scalar(g, &[0.3, -0.7], &FdConfig::hessian()).unwrap();
        let expect = (&q + &q.t()).scale(1.0);
        assert!((&h - &expect).max_abs() < 1e-8);
        let h0 = fd_hessian_of_scalar(|_| Ok(4.0), &[1.0, 2.0], &FdConfig::hessian()).unwrap();
        assert_eq!(h0.max_abs(), 0.0);
    }

    #[test]
    fn compare_verdicts() {
        let a = Mat::from_fn(3, 3, |i, j| (i + j) as f64);
        let cfg = FdConfig::jacobian();
        let r = compare(&a, &a, &cfg).unwrap();
        assert!(r.pass && r.rel_err == 0.0);
        let b = a.map(|v| v + 1e-3);
        assert!(!compare(&b, &a, &cfg).unwrap().pass);
        assert!(compare(&a, &Mat::zeros(2, 2), &cfg).is_err());
    }

    #[test]
    fn nan_probe_is_reported() {
        let x = Mat::from_rows(&[&[1.0]]);
        let r = fd_jacobian(
            |x: &Mat| Ok(x.map(|v| if v > 1.0 { f64::NAN } else { v })),
            &x,
            &FdConfig::jacobian(),
        );
        assert_eq!(r.unwrap_err(), Error::NonFiniteOutput);
    }
}
