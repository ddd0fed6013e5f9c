use curvforge::layernorm::{centering, g_matrix, ln_forward, ln_hessian, ln_jacobian, ln_p_jacobian, ln_state, SIGMA_FLOOR};
use curvforge::matcalc::vec_r;
use curvforge::oracle::{compare, fd_jacobian, fd_jacobian_vec, FdConfig};
use curvforge::sampling::{gaussian, rng};
use curvforge::{Error, Mat, Site};

fn input(seed: u64, m: usize, n: usize) -> Mat {
    gaussian(&mut rng(seed), m, n, 1.0)
}

#[test]
fn rows_are_centered_with_unit_variance() {
    for seed in 0..20 {
        let y = ln_forward(&input(seed, 3, 5)).unwrap();
        for i in 0..3 {
            let r = y.row(i);
            let mean = r.iter().sum::<f64>() / 5.0;
            let var = r.iter().map(|v| v * v).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn invariant_to_per_row_affine_maps() {
    let x = input(3, 4, 6);
    let y = ln_forward(&x).unwrap();
    let moved = Mat::from_fn(4, 6, |i, j| 2.5 * (i + 1) as f64 * x[(i, j)] - 7.0 + i as f64);
    assert!((&ln_forward(&moved).unwrap() - &y).max_abs() < 1e-12);
}

#[test]
fn jacobian_matches_fd() {
    let cfg = FdConfig::jacobian();
    for seed in 0..10 {
        let x = input(seed, 3, 4);
        let r = compare(&ln_jacobian(&x).unwrap(), &fd_jacobian_vec(ln_forward, &x, &cfg).unwrap(), &cfg).unwrap();
        assert!(r.pass, "seed {seed}: {}", r.rel_err);
    }
}

#[test]
fn p_jacobian_matches_fd() {
    let cfg = FdConfig::jacobian();
    let x = input(11, 3, 4);
    let fd = fd_jacobian_vec(|v: &Mat| Ok(ln_state(v)?.p), &x, &cfg).unwrap();
    assert!(compare(&ln_p_jacobian(&x).unwrap(), &fd, &cfg).unwrap().pass);
}

#[test]
fn hessian_matches_fd_and_is_symmetric_in_inputs() {
    let cfg = FdConfig::hessian();
    let x = input(4, 2, 3);
    let h = ln_hessian(&x).unwrap();
    let fd = fd_jacobian(|v: &Mat| Ok(vec_r(&ln_jacobian(v)?)), &x, &cfg).unwrap();
    assert!(compare(&h, &fd, &cfg).unwrap().pass);
    // ∂²y_a/∂x_b∂x_c = ∂²y_a/∂x_c∂x_b
    let n = x.len();
    for a in 0..n {
        let blk = h.block(a * n, 0, n, n);
        assert!((&blk - &blk.t()).max_abs() < 1e-10);
    }
}

#[test]
fn jacobian_annihilates_row_shifts() {
    let x = input(8, 3, 4);
    let j = ln_jacobian(&x).unwrap();
    let shift = vec_r(&Mat::from_fn(3, 4, |i, _| (i + 1) as f64));
    assert!(j.dot(&shift).max_abs() < 1e-12);
}

#[test]
fn centering_is_idempotent() {
    let c = centering(5);
    assert!((&c.dot(&c) - &c).max_abs() < 1e-15);
    assert_eq!(g_matrix(2, 5).shape(), (10, 10));
}

#[test]
fn constant_row_is_degenerate() {
    let x = Mat::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]]);
    assert_eq!(ln_forward(&x), Err(Error::DegenerateRow { site: Site::Standalone, row: 1 }));
    let near = Mat::from_rows(&[&[0.0, SIGMA_FLOOR * 0.5, 0.0]]);
    assert!(ln_forward(&near).is_err());
}

#[test]
fn single_column_is_degenerate() {
    assert!(matches!(ln_forward(&input(1, 3, 1)), Err(Error::DegenerateRow { .. })));
}
