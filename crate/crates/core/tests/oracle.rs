use curvforge::matcalc::kron;
use curvforge::oracle::{compare, fd_hessian_of_scalar, fd_jacobian, fd_jacobian_of_gradient, FdConfig, Scheme};
use curvforge::sampling::{gaussian, rng};
use curvforge::{Error, Mat};

#[test]
fn linear_map_is_exact() {
    let a = gaussian(&mut rng(1), 3, 4, 1.0);
    let x = gaussian(&mut rng(2), 4, 2, 1.0);
    let j = fd_jacobian(|x: &Mat| Ok(curvforge::matcalc::vec_r(&a.dot(x))), &x, &FdConfig::jacobian()).unwrap();
    let want = kron(&a, &Mat::eye(2));
    assert!((&j - &want).max_abs() < 1e-9);
}

#[test]
fn richardson_beats_central_on_a_cubic() {
    let x = Mat::col_vec(vec![0.7]);
    let f = |x: &Mat| Ok(x.map(|v| v.powi(3) + v.sin()));
    let exact = 3.0 * 0.49 + 0.7f64.cos();
    let cfg = FdConfig::jacobian().with_step(1e-2);
    let c = fd_jacobian(f, &x, &cfg).unwrap()[(0, 0)];
    let r = fd_jacobian(f, &x, &cfg.with_scheme(Scheme::Richardson)).unwrap()[(0, 0)];
    assert!((r - exact).abs() < (c - exact).abs() / 100.0);
}

#[test]
fn quadratic_hessian() {
    let q = Mat::from_rows(&[&[2.0, 1.0], &[1.0, 4.0]]);
    let f = |w: &[f64]| {
        let v = Mat::col_vec(w.to_vec());
        Ok(0.5 * v.t().dot(&q).dot(&v)[(0, 0)])
    };
    let h = fd_hessian_of_scalar(f, &[0.3, -1.2], &FdConfig::hessian()).unwrap();
    assert!((&h - &q).max_abs() < 1e-6);
    let g = |w: &[f64]| Ok(q.dot(&Mat::col_vec(w.to_vec())).into_data());
    let h2 = fd_jacobian_of_gradient(g, &[0.3, -1.2], &FdConfig::hessian()).unwrap();
    assert!((&h2 - &q).max_abs() < 1e-9);
}

#[test]
fn non_finite_output_is_reported() {
    let x = Mat::col_vec(vec![0.0]);
    let r = fd_jacobian(|x: &Mat| Ok(x.map(|v| 1.0 / v.abs().min(1e-300) - 1e300 * 1e300)), &x, &FdConfig::jacobian());
    assert_eq!(r, Err(Error::NonFiniteOutput));
}

#[test]
fn invalid_config_is_rejected() {
    let x = Mat::col_vec(vec![1.0]);
    let r = fd_jacobian(|x: &Mat| Ok(x.clone()), &x, &FdConfig::jacobian().with_step(0.0));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn compare_reports_relative_error() {
    let a = Mat::from_rows(&[&[1.0, 0.0]]);
    let n = Mat::from_rows(&[&[1.0, 1e-3]]);
    let r = compare(&a, &n, &FdConfig::jacobian()).unwrap();
    assert!((r.max_abs_err - 1e-3).abs() < 1e-15);
    assert!(!r.pass);
    assert!(compare(&n, &n, &FdConfig::jacobian()).unwrap().pass);
    assert!(compare(&a, &Mat::zeros(2, 1), &FdConfig::jacobian()).is_err());
}
