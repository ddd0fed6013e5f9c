use curvforge::block::Model;
use curvforge::bounds::{
    all_bounds, digest, intermediate_constants, ln_hess_formula, ln_jac_formula, ln_norm_bounds,
    ln_norm_bounds_with, m_tr, s_norm_formula, sa_hessian_bound, sa_m_formula, transformer_hessian_bound,
    BoundReport, SaInputs, SigmaReading, Variant, SLACK_TOL,
};
use curvforge::block::{block_forward, loss_hessian};
use curvforge::sampling::instance;
use curvforge::{Dims, Mat};

fn unit_inputs() -> SaInputs {
    SaInputs {
        l: 1,
        d_v: 1,
        d_k: 1,
        x: 1.0,
        wq: 1.0,
        wk: 1.0,
        wv: 1.0,
        target: 1.0,
        rank: 1,
    }
}

#[test]
fn sa_bound_constants_at_unit_norms() {
    // hand-evaluated with every norm and dimension equal to one
    assert_eq!(sa_m_formula(&unit_inputs(), Variant::Appendix), 78.0);
    assert_eq!(sa_m_formula(&unit_inputs(), Variant::Maintext), 120.0);
}

#[test]
fn layernorm_formulas_by_hand() {
    assert_eq!(ln_jac_formula(1.0, 1.0, 4), 1.5);
    assert_eq!(ln_hess_formula(1.0, 1.0, 1, 4), 2.75);
    assert_eq!(s_norm_formula(1, 4, 9, 2.0, 3.0), 2.0 * (1.0 + 6.0));
}

#[test]
fn slack_tolerance_is_relative() {
    let ok = BoundReport::new("x", 1.0 + 0.5 * SLACK_TOL, 1.0, "");
    let bad = BoundReport::new("x", 1.0 + 2.0 * SLACK_TOL, 1.0, "");
    assert!(ok.holds() && !bad.holds());
    assert!(!BoundReport::new("x", f64::NAN, 1.0, "").holds());
}

#[test]
fn digest_tracks_contents_and_shape() {
    let a = Mat::from_rows(&[&[1.0, 2.0]]);
    assert_eq!(digest(&[&a]), digest(&[&a.clone()]));
    assert_ne!(digest(&[&a]), digest(&[&a.t()]));
    assert_eq!(digest(&[&a]).len(), 16);
}

#[test]
fn layernorm_bounds_hold_on_instances() {
    for seed in 0..20 {
        let inst = instance(Dims::small(), seed).unwrap();
        let (j, h) = ln_norm_bounds(&inst.x).unwrap();
        assert!(j.holds() && h.holds(), "seed {seed}");
        // the row-norm reading gives a smaller right-hand side
        let (j2, _) = ln_norm_bounds_with(&inst.x, SigmaReading::RowNorm).unwrap();
        assert!(j2.rhs < j.rhs);
    }
}

#[test]
fn hessian_bounds_dominate_measured_norms() {
    for seed in 0..10 {
        let inst = instance(Dims::small(), seed).unwrap();
        let (x, t, p) = (&inst.x, &inst.target, &inst.params);
        for v in [Variant::Appendix, Variant::Maintext] {
            assert!(sa_hessian_bound(x, t, &p.attn, v).unwrap().holds(), "seed {seed} {v:?}");
        }
        let tb = transformer_hessian_bound(x, t, p).unwrap();
        assert_eq!(tb.blocks.len(), 25);
        assert_eq!(tb.split.len(), 25);
        assert!(tb.split.iter().all(BoundReport::holds), "seed {seed}");
        assert!(tb.m_tr.holds(), "seed {seed}");
        let st = block_forward(x, p).unwrap();
        assert_eq!(m_tr(&st, t).unwrap(), tb.m_tr.rhs);
        assert_eq!(loss_hessian(x, t, p).unwrap().full_norm, tb.m_tr.lhs);
    }
}

#[test]
fn uniform_attention_constants_hold() {
    for seed in 0..20 {
        let inst = instance(Dims::small(), seed).unwrap();
        let reps = intermediate_constants(&inst.x, &inst.target, &inst.params.attn).unwrap();
        for name in ["softmax_jacobian", "softmax_jacobian_uniform", "Z1_uniform", "ones_LxL", "shuffle"] {
            let r = reps.iter().find(|r| r.name == name).unwrap();
            assert!(r.holds(), "{name} seed {seed}: {} > {}", r.lhs, r.rhs);
        }
    }
}

#[test]
fn report_families_per_model() {
    let inst = instance(Dims::small(), 0).unwrap();
    let (x, t, p) = (&inst.x, &inst.target, &inst.params);
    let attn = all_bounds(x, t, p, Model::Attn, Variant::Maintext).unwrap();
    let block = all_bounds(x, t, p, Model::Block, Variant::Appendix).unwrap();
    assert!(attn.iter().any(|r| r.name == "sa_hessian_M[maintext]"));
    assert!(!attn.iter().any(|r| r.name.starts_with("tr_")));
    assert_eq!(block.iter().filter(|r| r.name.starts_with("tr_block_")).count(), 25);
    assert_eq!(block.len() - attn.len(), 2 + 51 - 1);
}
