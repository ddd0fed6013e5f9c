//! Matrix calculus under row-wise vectorization.
//!
//! Every Jacobian here is `∂vec_r(N)/∂vec_r(W)ᵀ`: rows follow the row-major order of the
//! output, columns the row-major order of the input.

use crate::error::{shape_check, Error, Result};
use crate::mat::Mat;

/// Absolute threshold for diagonal inversion and pivot checks.
pub const EPS_SING: f64 = 1e-10;

/// Stack the rows of `a` into a column.
pub fn vec_r(a: &Mat) -> Mat {
    a.clone().reshape(a.len(), 1)
}

/// Inverse of [`vec_r`].
pub fn unvec_r(v: &Mat, rows: usize, cols: usize) -> Result<Mat> {
    shape_check(v.len() == rows * cols, "unvec_r", v.shape(), (rows, cols))?;
    Ok(v.clone().reshape(rows, cols))
}

/// Column-major vectorization. Only used to state commutation identities.
pub fn vec_c(a: &Mat) -> Mat {
    vec_r(&a.t())
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = Mat::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = s * b[(k, l)];
                }
            }
        }
    }
    out
}

/// `K_{m,n}` with `K·vec(A) = vec(Aᵀ)` for `A ∈ R^{m×n}`.
pub fn commutation(m: usize, n: usize) -> Mat {
    let mut k = Mat::zeros(m * n, m * n);
    for i in 0..m {
        for j in 0..n {
            k[(i * n + j, j * m + i)] = 1.0;
        }
    }
    k
}

/// Jacobian of `A ↦ Aᵀ` for `A ∈ R^{m×n}`, i.e. `K_{n,m}`.
pub fn transpose_jacobian(m: usize, n: usize) -> Mat {
    commutation(n, m)
}

/// Entrywise product.
pub fn hadamard(a: &Mat, b: &Mat) -> Result<Mat> {
    shape_check(a.shape() == b.shape(), "hadamard", a.shape(), b.shape())?;
    Ok(a.zip_map(b, |x, y| x * y))
}

/// Entrywise power. Non-integer exponents require strictly positive entries.
pub fn hadamard_pow(a: &Mat, alpha: f64) -> Result<Mat> {
    let integral = alpha.fract() == 0.0;
    if !integral {
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                if a[(i, j)] <= 0.0 {
                    return Err(Error::NonPositiveEntry { row: i, col: j });
                }
            }
        }
    }
    Ok(if integral && alpha.abs() < 64.0 {
        a.map(|v| v.powi(alpha as i32))
    } else {
        a.map(|v| v.powf(alpha))
    })
}

pub fn diag_from_vec(v: &Mat) -> Mat {
    let n = v.len();
    let mut d = Mat::zeros(n, n);
    for (i, &x) in v.data().iter().enumerate() {
        d[(i, i)] = x;
    }
    d
}

pub fn diag_inv_from_vec(v: &Mat) -> Result<Mat> {
    let n = v.len();
    let mut d = Mat::zeros(n, n);
    for (i, &x) in v.data().iter().enumerate() {
        if x.abs() <= EPS_SING {
            return Err(Error::SingularDiagonal { index: i });
        }
        d[(i, i)] = 1.0 / x;
    }
    Ok(d)
}

/// `(e₁⊗e₁ … e_L⊗e_L)`, the Jacobian of `v ↦ diag(v)`.
pub fn diag_map_jacobian(l: usize) -> Mat {
    let mut e = Mat::zeros(l * l, l);
    for i in 0..l {
        e[(i * l + i, i)] = 1.0;
    }
    e
}

/// `(A⊗I_q)·dB` for `A ∈ R^{p×r}` without forming the Kronecker factor.
fn kron_eye_right_mul(a: &Mat, q: usize, db: &Mat) -> Mat {
    let (p, r) = a.shape();
    let k = db.cols();
    let mut out = Mat::zeros(p * q, k);
    for i in 0..p {
        for t in 0..r {
            let s = a[(i, t)];
            if s == 0.0 {
                continue;
            }
            for u in 0..q {
                let src = db.row(t * q + u);
                let dst = &mut out.data_mut()[(i * q + u) * k..(i * q + u + 1) * k];
                for (d, x) in dst.iter_mut().zip(src) {
                    *d += s * x;
                }
            }
        }
    }
    out
}

/// `(I_p⊗Bᵀ)·dA` for `B ∈ R^{r×q}`.
fn eye_kron_t_mul(p: usize, b: &Mat, da: &Mat) -> Mat {
    let (r, q) = b.shape();
    let k = da.cols();
    let mut out = Mat::zeros(p * q, k);
    for i in 0..p {
        for t in 0..r {
            let src = da.row(i * r + t);
            for u in 0..q {
                let s = b[(t, u)];
                if s == 0.0 {
                    continue;
                }
                let dst = &mut out.data_mut()[(i * q + u) * k..(i * q + u + 1) * k];
                for (d, x) in dst.iter_mut().zip(src) {
                    *d += s * x;
                }
            }
        }
    }
    out
}

/// Jacobian of `A(X)·B(X)`: `(A⊗I_q)·dB + (I_p⊗Bᵀ)·dA`.
///
/// `p` and `q` are taken from the shapes of `A` (p×r) and `B` (r×q).
pub fn product_rule(a: &Mat, da: &Mat, b: &Mat, db: &Mat) -> Result<Mat> {
    let (p, r) = a.shape();
    let (r2, q) = b.shape();
    shape_check(r == r2, "product_rule", a.shape(), b.shape())?;
    shape_check(da.rows() == p * r, "product_rule dA", da.shape(), a.shape())?;
    shape_check(db.rows() == r * q, "product_rule dB", db.shape(), b.shape())?;
    shape_check(da.cols() == db.cols(), "product_rule vars", da.shape(), db.shape())?;
    let x = kron_eye_right_mul(a, q, db);
    let y = eye_kron_t_mul(p, b, da);
    Ok(&x + &y)
}

/// Jacobian of `A(X)⊗B(X)` for `A ∈ R^{n×q}`, `B ∈ R^{p×r}`:
/// `(I_n⊗K_{p,q}⊗I_r)·[(vec_r A⊗I_{pr})·dB + (I_{nq}⊗vec_r B)·dA]`.
pub fn kron_rule(a: &Mat, da: &Mat, b: &Mat, db: &Mat) -> Result<Mat> {
    let (n, q) = a.shape();
    let (p, r) = b.shape();
    shape_check(da.rows() == n * q, "kron_rule dA", da.shape(), a.shape())?;
    shape_check(db.rows() == p * r, "kron_rule dB", db.shape(), b.shape())?;
    shape_check(da.cols() == db.cols(), "kron_rule vars", da.shape(), db.shape())?;
    let k = da.cols();
    let mut out = Mat::zeros(n * p * q * r, k);
    let width = q * r;
    for i in 0..n {
        for s in 0..p {
            for j in 0..q {
                for u in 0..r {
                    let row = (i * p + s) * width + j * r + u;
                    let aij = a[(i, j)];
                    let bsu = b[(s, u)];
                    let da_row = da.row(i * q + j);
                    let db_row = db.row(s * r + u);
                    let dst = &mut out.data_mut()[row * k..(row + 1) * k];
                    for c in 0..k {
                        dst[c] = da_row[c] * bsu + aij * db_row[c];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of a square matrix by Gauss-Jordan with partial pivoting.
pub fn inverse(d: &Mat) -> Result<Mat> {
    let n = d.rows();
    shape_check(d.rows() == d.cols(), "inverse", d.shape(), d.shape())?;
    let mut a = d.clone();
    let mut inv = Mat::eye(n);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[(x, col)].abs().total_cmp(&a[(y, col)].abs()))
            .unwrap_or(col);
        if a[(piv, col)].abs() <= EPS_SING {
            return Err(Error::SingularMatrix);
        }
        if piv != col {
            for j in 0..n {
                let t = a[(col, j)];
                a[(col, j)] = a[(piv, j)];
                a[(piv, j)] = t;
                let t = inv[(col, j)];
                inv[(col, j)] = inv[(piv, j)];
                inv[(piv, j)] = t;
            }
        }
        let s = 1.0 / a[(col, col)];
        for j in 0..n {
            a[(col, j)] *= s;
            inv[(col, j)] *= s;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = a[(i, col)];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                a[(i, j)] -= f * a[(col, j)];
                inv[(i, j)] -= f * inv[(col, j)];
            }
        }
    }
    Ok(inv)
}

/// `∂vec_r(D⁻¹)/∂vec_r(D)ᵀ = −D⁻¹⊗D⁻ᵀ`.
pub fn inverse_jacobian(d: &Mat) -> Result<Mat> {
    let inv = inverse(d)?;
    Ok(kron(&inv, &inv.t()).scale(-1.0))
}

/// A matrix value together with its Jacobian with respect to a fixed set of
/// `nvars` scalar variables. `jac == None` means the value is constant.
///
/// Arithmetic applies the product and Kronecker rules above, so chaining these
/// gives exact second derivatives of expressions built from first-derivative
/// formulas.
#[derive(Clone, Debug)]
pub struct Dual {
    pub val: Mat,
    pub jac: Option<Mat>,
    nvars: usize,
}

impl Dual {
    pub fn constant(val: Mat, nvars: usize) -> Dual {
        Dual {
            val,
            jac: None,
            nvars,
        }
    }

    /// The independent variable itself: Jacobian is the identity.
    pub fn variable(val: Mat) -> Dual {
        let n = val.len();
        Dual {
            val,
            jac: Some(Mat::eye(n)),
            nvars: n,
        }
    }

    pub fn with_jac(val: Mat, jac: Mat) -> Dual {
        assert_eq!(jac.rows(), val.len(), "Dual jac rows");
        let nvars = jac.cols();
        Dual {
            val,
            jac: Some(jac),
            nvars,
        }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn jac_or_zero(&self) -> Mat {
        self.jac
            .clone()
            .unwrap_or_else(|| Mat::zeros(self.val.len(), self.nvars))
    }

    pub fn mul(&self, o: &Dual) -> Dual {
        let val = self.val.dot(&o.val);
        let (p, _) = self.val.shape();
        let q = o.val.cols();
        let jac = match (&self.jac, &o.jac) {
            (None, None) => None,
            (Some(da), None) => Some(eye_kron_t_mul(p, &o.val, da)),
            (None, Some(db)) => Some(kron_eye_right_mul(&self.val, q, db)),
            (Some(da), Some(db)) => Some(
                &kron_eye_right_mul(&self.val, q, db) + &eye_kron_t_mul(p, &o.val, da),
            ),
        };
        Dual {
            val,
            jac,
            nvars: self.nvars,
        }
    }

    pub fn kron(&self, o: &Dual) -> Dual {
        let val = kron(&self.val, &o.val);
        let jac = if self.jac.is_none() && o.jac.is_none() {
            None
        } else {
            Some(
                kron_rule(&self.val, &self.jac_or_zero(), &o.val, &o.jac_or_zero())
                    .expect("kron_rule shapes follow from values"),
            )
        };
        Dual {
            val,
            jac,
            nvars: self.nvars,
        }
    }

    pub fn add(&self, o: &Dual) -> Dual {
        let jac = match (&self.jac, &o.jac) {
            (None, None) => None,
            (Some(a), None) | (None, Some(a)) => Some(a.clone()),
            (Some(a), Some(b)) => Some(a + b),
        };
        Dual {
            val: &self.val + &o.val,
            jac,
            nvars: self.nvars,
        }
    }

    pub fn scale(&self, s: f64) -> Dual {
        Dual {
            val: self.val.scale(s),
            jac: self.jac.as_ref().map(|j| j.scale(s)),
            nvars: self.nvars,
        }
    }

    pub fn t(&self) -> Dual {
        let (m, n) = self.val.shape();
        Dual {
            val: self.val.t(),
            jac: self
                .jac
                .as_ref()
                .map(|j| transpose_jacobian(m, n).dot(j)),
            nvars: self.nvars,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vec_r_examples() {
        let a = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(vec_r(&a).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(vec_r(&Mat::eye(2)).data(), &[1.0, 0.0, 0.0, 1.0]);
        let r = Mat::from_rows(&[&[5.0, 6.0, 7.0]]);
        assert_eq!(vec_r(&r).shape(), (3, 1));
        assert_eq!(vec_c(&a).data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn kron_examples() {
        let b = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(kron(&Mat::eye(1), &b), b);
        let two = Mat::from_rows(&[&[2.0]]);
        assert_eq!(kron(&two, &Mat::eye(2)), Mat::from_rows(&[&[2.0, 0.0], &[0.0, 2.0]]));
    }

    #[test]
    fn commutation_small() {
        assert_eq!(commutation(1, 1), Mat::eye(1));
        let a = Mat::from_fn(2, 3, |i, j| (10 * i + j) as f64);
        let k = commutation(2, 3);
        assert_eq!(k.dot(&vec_c(&a)), vec_c(&a.t()));
    }

    #[test]
    fn hadamard_pow_examples() {
        let a = Mat::from_rows(&[&[4.0, 9.0]]);
        assert_eq!(hadamard_pow(&a, 0.5).unwrap(), Mat::from_rows(&[&[2.0, 3.0]]));
        let b = Mat::from_rows(&[&[2.0, 3.0], &[1.0, 5.0]]);
        assert_eq!(hadamard_pow(&b, 1.0).unwrap(), b);
        assert_eq!(
            hadamard_pow(&b, 2.0).unwrap(),
            Mat::from_rows(&[&[4.0, 9.0], &[1.0, 25.0]])
        );
        let c = Mat::from_rows(&[&[1.0, -1.0]]);
        assert_eq!(
            hadamard_pow(&c, 0.5),
            Err(Error::NonPositiveEntry { row: 0, col: 1 })
        );
        assert!(hadamard_pow(&c, 2.0).is_ok());
    }

    #[test]
    fn diag_examples() {
        let v = Mat::col_vec(vec![1.0, 2.0]);
        assert_eq!(diag_from_vec(&v), Mat::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]));
        let w = Mat::col_vec(vec![2.0, 4.0]);
        assert_eq!(
            diag_inv_from_vec(&w).unwrap(),
            Mat::from_rows(&[&[0.5, 0.0], &[0.0, 0.25]])
        );
        let z = Mat::col_vec(vec![1e-12, 1.0]);
        assert_eq!(
            diag_inv_from_vec(&z),
            Err(Error::SingularDiagonal { index: 0 })
        );
    }

    #[test]
    fn diag_map_small() {
        assert_eq!(diag_map_jacobian(1), Mat::eye(1));
        let e = diag_map_jacobian(2);
        assert_eq!(e.block(0, 0, 4, 1).data(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(e.block(0, 1, 4, 1).data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn fast_kron_products_match_explicit() {
        let a = Mat::from_fn(2, 3, |i, j| (i as f64 + 1.0) * (j as f64 - 0.5));
        let b = Mat::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.1 - 0.3);
        let db = Mat::from_fn(12, 5, |i, j| ((i * 5 + j) % 7) as f64 - 3.0);
        let da = Mat::from_fn(6, 5, |i, j| ((i + 2 * j) % 5) as f64);
        let lhs = kron_eye_right_mul(&a, 4, &db);
        assert_eq!(lhs, kron(&a, &Mat::eye(4)).dot(&db));
        let rhs = eye_kron_t_mul(2, &b, &da);
        assert_eq!(rhs, kron(&Mat::eye(2), &b.t()).dot(&da));
    }

    #[test]
    fn kron_rule_matches_literal_formula() {
        let a = Mat::from_fn(2, 3, |i, j| (i as f64) - 0.7 * j as f64);
        let b = Mat::from_fn(3, 2, |i, j| 0.3 * i as f64 + j as f64);
        let da = Mat::from_fn(6, 4, |i, j| ((i * 3 + j) % 5) as f64 - 2.0);
        let db = Mat::from_fn(6, 4, |i, j| ((i + j * 7) % 3) as f64);
        let (n, q) = a.shape();
        let (p, r) = b.shape();
        let lead = kron(&kron(&Mat::eye(n), &commutation(p, q)), &Mat::eye(r));
        let t1 = kron(&vec_r(&a), &Mat::eye(p * r)).dot(&db);
        let t2 = kron(&Mat::eye(n * q), &vec_r(&b)).dot(&da);
        let literal = lead.dot(&(&t1 + &t2));
        let fast = kron_rule(&a, &da, &b, &db).unwrap();
        assert!((&literal - &fast).max_abs() < 1e-14);
    }

    #[test]
    fn inverse_jacobian_examples() {
        assert_eq!(inverse_jacobian(&Mat::eye(2)).unwrap(), Mat::eye(4).scale(-1.0));
        let d = Mat::from_rows(&[&[2.0, 0.0], &[0.0, 4.0]]);
        let expect = diag_from_vec(&Mat::col_vec(vec![0.25, 0.125, 0.125, 0.0625])).scale(-1.0);
        assert_eq!(inverse_jacobian(&d).unwrap(), expect);
        let s = Mat::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert_eq!(inverse_jacobian(&s), Err(Error::SingularMatrix));
    }

    #[test]
    fn product_rule_shape_errors() {
        let a = Mat::zeros(2, 3);
        let b = Mat::zeros(2, 2);
        assert!(matches!(
            product_rule(&a, &Mat::zeros(6, 1), &b, &Mat::zeros(4, 1)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn product_rule_constant_factors() {
        let a = Mat::from_fn(2, 2, |i, j| (i + 2 * j) as f64 + 1.0);
        let b = Mat::from_fn(2, 2, |i, j| (3 * i + j) as f64 - 1.0);
        let da = Mat::from_fn(4, 3, |i, j| (i * j) as f64 + 0.5);
        let z = Mat::zeros(4, 3);
        let only_a = product_rule(&a, &da, &b, &z).unwrap();
        assert_eq!(only_a, kron(&Mat::eye(2), &b.t()).dot(&da));
        let only_b = product_rule(&a, &z, &b, &da).unwrap();
        assert_eq!(only_b, kron(&a, &Mat::eye(2)).dot(&da));
    }
}
