use curvforge::attention::{
    attn_forward, g, phi, shuffle, softmax_hessian, softmax_hessian_block, softmax_jacobian, softmax_rows,
    swap_layout, z1, AttnParams,
};
use curvforge::matcalc::vec_r;
use curvforge::norms::spectral;
use curvforge::oracle::{compare, fd_jacobian, fd_jacobian_vec, FdConfig};
use curvforge::sampling::{gaussian, instance, rng};
use curvforge::{Dims, Mat, WeightTag};

fn setup(seed: u64) -> (Mat, AttnParams) {
    let inst = instance(Dims::small(), seed).unwrap();
    (inst.x, inst.params.attn)
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let t = Mat::from_rows(&[&[1000.0, 1000.0], &[-1e4, 0.0]]);
    let a = softmax_rows(&t);
    assert!(a.is_finite());
    assert_eq!(a.row(0), &[0.5, 0.5]);
    assert_eq!(a[(1, 1)], 1.0);
}

#[test]
fn softmax_jacobian_and_hessian_match_fd() {
    for seed in 0..5 {
        let t = gaussian(&mut rng(seed), 3, 3, 2.0);
        let jc = FdConfig::jacobian();
        let fdj = fd_jacobian_vec(|v: &Mat| Ok(softmax_rows(v)), &t, &jc).unwrap();
        assert!(compare(&softmax_jacobian(&softmax_rows(&t)), &fdj, &jc).unwrap().pass);
        let hc = FdConfig::hessian();
        let fdh = fd_jacobian(|v: &Mat| Ok(vec_r(&softmax_jacobian(&softmax_rows(v)))), &t, &hc).unwrap();
        assert!(compare(&softmax_hessian(&softmax_rows(&t)), &fdh, &hc).unwrap().pass);
    }
}

#[test]
fn softmax_jacobian_is_row_block_diagonal() {
    let a = softmax_rows(&gaussian(&mut rng(2), 3, 3, 1.0));
    let j = softmax_jacobian(&a);
    for r in 0..3 {
        for c in 0..3 {
            if r != c {
                assert_eq!(j.block(3 * r, 3 * c, 3, 3).max_abs(), 0.0);
            }
        }
    }
    // columns of each row block sum to zero: probabilities stay normalized
    assert!(Mat::ones(1, 9).dot(&j).max_abs() < 1e-15);
}

#[test]
fn softmax_hessian_blocks_are_symmetric_and_sum_to_zero() {
    // each row of A sums to one, so its second derivatives sum to zero
    let a = softmax_rows(&gaussian(&mut rng(4), 3, 3, 1.0));
    for i in 0..3 {
        let mut sum = Mat::zeros(3, 3);
        for j in 0..3 {
            let b = softmax_hessian_block(&a, i, j);
            assert!((&b - &b.t()).max_abs() < 1e-15);
            sum = &sum + &b;
        }
        assert!(sum.max_abs() < 1e-15);
    }
}

#[test]
fn weight_jacobians_match_fd() {
    let cfg = FdConfig::jacobian();
    for seed in 0..5 {
        let (x, p) = setup(seed);
        for tag in WeightTag::ATTN {
            let fd = fd_jacobian_vec(
                |w: &Mat| {
                    let mut q = p.clone();
                    *q.weight_mut(tag) = w.clone();
                    Ok(attn_forward(&x, &q)?.f)
                },
                p.weight(tag),
                &cfg,
            )
            .unwrap();
            assert!(compare(&g(&x, &p, tag).unwrap(), &fd, &cfg).unwrap().pass, "{tag:?}");
        }
    }
}

#[test]
fn value_jacobian_does_not_depend_on_w_v() {
    let (x, p) = setup(1);
    assert_eq!(phi(&x, &p, WeightTag::V, WeightTag::V).unwrap().max_abs(), 0.0);
    assert!(phi(&x, &p, WeightTag::Q, WeightTag::V).unwrap().max_abs() > 0.0);
}

#[test]
fn mixed_second_derivatives_agree_after_reordering() {
    // Φ_QK and Φ_KQ hold the same numbers in different stacked layouts
    let (x, p) = setup(3);
    let d = Dims::small();
    let n_out = d.l * d.d_v;
    let (nk, nq) = (WeightTag::K.size(&d), WeightTag::Q.size(&d));
    let qk = phi(&x, &p, WeightTag::Q, WeightTag::K).unwrap();
    let kq = phi(&x, &p, WeightTag::K, WeightTag::Q).unwrap();
    assert!((&swap_layout(&qk, n_out, nq, nk) - &kq).max_abs() < 1e-12);
}

#[test]
fn z1_is_the_logit_jacobian_core() {
    let (x, p) = setup(0);
    let d = Dims::small();
    assert_eq!(z1(&x, &p).unwrap().shape(), (d.l * d.d_v, d.d_v * d.d_v));
}

#[test]
fn shuffle_has_orthonormal_columns() {
    for d in 1..5 {
        let s = shuffle(d);
        assert_eq!(s.shape(), (d * d * d, d));
        assert!((&s.t().dot(&s) - &Mat::eye(d).scale(d as f64)).max_abs() < 1e-15);
        assert!((spectral(&s).unwrap() - (d as f64).sqrt()).abs() < 1e-12);
    }
}

#[test]
fn uniform_attention_at_zero_query() {
    let (x, mut p) = setup(5);
    p.wq = Mat::zeros(p.wq.rows(), p.wq.cols());
    let a = attn_forward(&x, &p).unwrap().a;
    assert!((&a - &Mat::ones(3, 3).scale(1.0 / 3.0)).max_abs() < 1e-15);
    assert!((spectral(&softmax_jacobian(&a)).unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn shape_mismatch_is_rejected() {
    let (_, p) = setup(0);
    assert!(attn_forward(&Mat::zeros(3, 5), &p).is_err());
}
