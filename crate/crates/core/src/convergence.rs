//! Empirical loss over a sample stream, the averaged Hessian, the quadratic
//! surrogate around a minimizer, and the `|L_{k+1} − L_k|` envelope
//!
//! ```text
//! |L_{k+1}(w) − L_k(w)| ≤ 2L̄/(k+1) + M‖w − w*‖²/(k+1)
//! ```
//!
//! with `L̄` the running max per-sample loss and `M` the running max of the
//! per-sample Hessian bound at `w*`. Also sample generation and CSV I/O.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::attention::{softmax_rows, AttnParams};
use crate::block::{block_forward, loss_hessian, mse, sa_loss_hessian, BlockParams, Model};
use crate::bounds::{self, Variant};
use crate::error::{shape_check, Error, Result, Site};
use crate::ffn::relu;
use crate::layernorm::{ln_state_at, LnState};
use crate::mat::Mat;
use crate::sampling::{gaussian, random_params, rng, MAX_DRAWS};
use crate::Dims;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Mat,
    pub target: Mat,
}

impl Sample {
    fn check(&self, dims: &Dims) -> Result<()> {
        let want = (dims.l, dims.d_v);
        shape_check(self.x.shape() == want, "sample X", self.x.shape(), want)?;
        shape_check(self.target.shape() == want, "sample target", self.target.shape(), want)
    }
}

/// Number of scalar parameters of `model`.
pub fn param_count(dims: &Dims, model: Model) -> usize {
    model.tags().iter().map(|t| t.size(dims)).sum()
}

/// Concatenated `vec_r` of the model's weights in `model.tags()` order.
pub fn flatten(p: &BlockParams, model: Model) -> Vec<f64> {
    model
        .tags()
        .iter()
        .flat_map(|&t| p.weight(t).data().iter().copied())
        .collect()
}

/// Inverse of [`flatten`]; weights outside `model` are taken from `base`.
pub fn unflatten(base: &BlockParams, w: &[f64], model: Model) -> Result<BlockParams> {
    let d = base.dims();
    let n = param_count(&d, model);
    shape_check(w.len() == n, "unflatten", (w.len(), 1), (n, 1))?;
    let mut p = base.clone();
    let mut off = 0;
    for &t in model.tags() {
        let k = t.size(&d);
        p.weight_mut(t).data_mut().copy_from_slice(&w[off..off + k]);
        off += k;
    }
    Ok(p)
}

struct AttnFwd {
    xq: Mat,
    xk: Mat,
    a: Mat,
    ax: Mat,
    f: Mat,
}

fn attn_fwd(x: &Mat, p: &AttnParams) -> AttnFwd {
    let c = 1.0 / (p.dims.d_k as f64).sqrt();
    let xq = x.dot(&p.wq);
    let xk = x.dot(&p.wk);
    let a = softmax_rows(&xq.dot(&xk.t()).scale(c));
    let ax = a.dot(x);
    let f = ax.dot(&p.wv);
    AttnFwd { xq, xk, a, ax, f }
}

/// Gradients `[dW_K, dW_Q, dW_V]` given `dF`.
fn attn_back(x: &Mat, p: &AttnParams, fw: &AttnFwd, df: &Mat) -> [Mat; 3] {
    let c = 1.0 / (p.dims.d_k as f64).sqrt();
    let dwv = fw.ax.t().dot(df);
    let da = df.dot(&x.dot(&p.wv).t());
    let mut dt = Mat::zeros(da.rows(), da.cols());
    for i in 0..da.rows() {
        let s: f64 = (0..da.cols()).map(|k| da[(i, k)] * fw.a[(i, k)]).sum();
        for j in 0..da.cols() {
            dt[(i, j)] = fw.a[(i, j)] * (da[(i, j)] - s);
        }
    }
    let dwq = x.t().dot(&dt.dot(&fw.xk).scale(c));
    let dwk = x.t().dot(&dt.t().dot(&fw.xq).scale(c));
    [dwk, dwq, dwv]
}

/// Backward through row-wise LayerNorm given its output `y` and row stds.
fn ln_back(y: &Mat, sigma: &Mat, dy: &Mat) -> Mat {
    let n = y.cols() as f64;
    let mut dx = Mat::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let mean_dy = dy.row(i).iter().sum::<f64>() / n;
        let mean_dyy = dy.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum::<f64>() / n;
        for j in 0..y.cols() {
            dx[(i, j)] = (dy[(i, j)] - mean_dy - y[(i, j)] * mean_dyy) / sigma[(i, 0)];
        }
    }
    dx
}

/// Per-sample MSE loss.
pub fn sample_loss(s: &Sample, p: &BlockParams, model: Model) -> Result<f64> {
    s.check(&p.dims())?;
    let out = match model {
        Model::Attn => attn_fwd(&s.x, &p.attn).f,
        Model::Block => block_forward(&s.x, p)?.z,
    };
    Ok(mse(&out, &s.target))
}

/// Per-sample loss and its gradient over the flattened parameters, by
/// reverse-mode propagation.
pub fn loss_and_grad(s: &Sample, p: &BlockParams, model: Model) -> Result<(f64, Vec<f64>)> {
    loss_and_grad_floored(s, p, model, 0.0)
}

/// As [`loss_and_grad`], but fails with `DegenerateRow` when a LayerNorm input
/// row has standard deviation below `min_sigma`.
fn loss_and_grad_floored(
    s: &Sample,
    p: &BlockParams,
    model: Model,
    min_sigma: f64,
) -> Result<(f64, Vec<f64>)> {
    s.check(&p.dims())?;
    let x = &s.x;
    let fw = attn_fwd(x, &p.attn);
    let scale = 2.0 / x.len() as f64;
    match model {
        Model::Attn => {
            let resid = &fw.f - &s.target;
            let [dk, dq, dv] = attn_back(x, &p.attn, &fw, &resid.scale(scale));
            Ok((mse(&fw.f, &s.target), flat(&[dk, dq, dv])))
        }
        Model::Block => {
            let (w1, w2) = (&p.ffn.w1, &p.ffn.w2);
            let yl = ln_state_at(&(x + &fw.f), Site::Y)?;
            floor(&yl, Site::Y, min_sigma)?;
            let y = yl.output();
            let u = y.dot(w1);
            let r = relu(&u);
            let zl = ln_state_at(&(&r.dot(w2) + &y), Site::Z)?;
            floor(&zl, Site::Z, min_sigma)?;
            let z = zl.output();
            let resid = &z - &s.target;
            let ds = ln_back(&z, &zl.sigma, &resid.scale(scale));
            let dw2 = r.t().dot(&ds);
            let du = ds.dot(&w2.t()).zip_map(&u, |g, v| if v > 0.0 { g } else { 0.0 });
            let dw1 = y.t().dot(&du);
            let dy = &du.dot(&w1.t()) + &ds;
            let du0 = ln_back(&y, &yl.sigma, &dy);
            let [dk, dq, dv] = attn_back(x, &p.attn, &fw, &du0);
            Ok((mse(&z, &s.target), flat(&[dw1, dw2, dk, dq, dv])))
        }
    }
}

fn floor(ln: &LnState, site: Site, min_sigma: f64) -> Result<()> {
    match ln.sigma.data().iter().position(|&v| v < min_sigma) {
        Some(row) => Err(Error::DegenerateRow { site, row }),
        None => Ok(()),
    }
}

fn flat(ms: &[Mat]) -> Vec<f64> {
    ms.iter().flat_map(|m| m.data().iter().copied()).collect()
}

fn tag_err(index: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Sample {
        index,
        source: Box::new(e),
    }
}

/// `L_k(w) = (1/k) Σ l_i(w)`.
pub fn empirical_loss(samples: &[Sample], p: &BlockParams, model: Model) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let losses: Vec<f64> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| sample_loss(s, p, model).map_err(tag_err(i)))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len() as f64)
}

/// `L_k` and `∇L_k`; the reduction runs in sample order.
pub fn empirical_grad(samples: &[Sample], p: &BlockParams, model: Model) -> Result<(f64, Vec<f64>)> {
    empirical_grad_floored(samples, p, model, 0.0)
}

fn empirical_grad_floored(
    samples: &[Sample],
    p: &BlockParams,
    model: Model,
    min_sigma: f64,
) -> Result<(f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let parts: Vec<(f64, Vec<f64>)> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| loss_and_grad_floored(s, p, model, min_sigma).map_err(tag_err(i)))
        .collect::<Result<_>>()?;
    let k = samples.len() as f64;
    let mut g = vec![0.0; parts[0].1.len()];
    let mut loss = 0.0;
    for (l, gi) in &parts {
        loss += l;
        for (a, b) in g.iter_mut().zip(gi) {
            *a += b;
        }
    }
    g.iter_mut().for_each(|v| *v /= k);
    Ok((loss / k, g))
}

/// `H^(k) = (1/k) Σ ∇²l_i`, over the model's parameters.
pub fn averaged_hessian(samples: &[Sample], p: &BlockParams, model: Model) -> Result<Mat> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hs: Vec<Mat> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let rep = match model {
                Model::Attn => sa_loss_hessian(&s.x, &s.target, &p.attn),
                Model::Block => loss_hessian(&s.x, &s.target, p),
            };
            rep.map(|r| r.assembled).map_err(tag_err(i))
        })
        .collect::<Result<_>>()?;
    let mut acc = hs[0].clone();
    for h in &hs[1..] {
        acc = &acc + h;
    }
    Ok(acc.scale(1.0 / samples.len() as f64))
}

/// `L(w*) + ½(w − w*)ᵀ H (w − w*)`.
pub fn taylor_surrogate(w: &[f64], w_star: &[f64], l_star: f64, h: &Mat) -> Result<f64> {
    let n = w.len();
    shape_check(w_star.len() == n, "surrogate w*", (n, 1), (w_star.len(), 1))?;
    shape_check(h.shape() == (n, n), "surrogate H", h.shape(), (n, n))?;
    let d = Mat::col_vec(w.iter().zip(w_star).map(|(a, b)| a - b).collect());
    Ok(l_star + 0.5 * d.t().dot(h).dot(&d)[(0, 0)])
}

/// Per-sample spectral-norm bound on the loss Hessian.
pub fn sample_bound(s: &Sample, p: &BlockParams, model: Model, variant: Variant) -> Result<f64> {
    match model {
        Model::Attn => bounds::sa_m(&s.x, &s.target, &p.attn, variant),
        Model::Block => bounds::m_tr(&block_forward(&s.x, p)?, &s.target),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MinimizeConfig {
    /// Stop once `‖∇L‖₂` falls to this.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// L-BFGS history length.
    pub memory: usize,
    /// Cap on `‖Δw‖₂` per iteration.
    pub max_step: f64,
    /// Steps that bring any LayerNorm input row below this standard
    /// deviation are rejected by the line search. Zero leaves only the
    /// LayerNorm floor.
    pub min_sigma: f64,
    /// Stop after this many consecutive iterations without a relative loss
    /// decrease above `1e-12`.
    pub stall_iters: usize,
}

impl Default for MinimizeConfig {
    fn default() -> MinimizeConfig {
        MinimizeConfig {
            grad_tol: 1e-4,
            max_iter: 2_000,
            memory: 10,
            max_step: 0.5,
            min_sigma: 0.0,
            stall_iters: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Minimum {
    #[serde(skip)]
    pub w: Vec<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normv(a: &[f64]) -> f64 {
    dotv(a, a).sqrt()
}

/// L-BFGS with Armijo backtracking on `L_k` over `samples`; falls back to a
/// steepest-descent step whenever the quasi-Newton direction fails.
pub fn minimize(
    samples: &[Sample],
    base: &BlockParams,
    model: Model,
    w0: &[f64],
    cfg: &MinimizeConfig,
) -> Result<Minimum> {
    let eval = |w: &[f64]| -> Result<(f64, Vec<f64>)> {
        empirical_grad_floored(samples, &unflatten(base, w, model)?, model, cfg.min_sigma)
    };
    let mut w = w0.to_vec();
    let (mut f, mut g) = eval(&w)?;
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut it = 0;
    let mut stalled = 0;
    while it < cfg.max_iter && normv(&g) > cfg.grad_tol && stalled < cfg.stall_iters {
        it += 1;
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dotv(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = hist
            .last()
            .map(|(s, y, _)| dotv(s, y) / dotv(y, y))
            .unwrap_or(1.0 / normv(&g).max(1.0));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dotv(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        if dotv(&dir, &g) >= 0.0 {
            hist.clear();
            dir = g.iter().map(|v| -v / normv(&g).max(1.0)).collect();
        }
        let slope = dotv(&dir, &g);
        let mut step = (cfg.max_step / normv(&dir)).min(1.0);
        let mut accepted = None;
        for _ in 0..60 {
            let wn: Vec<f64> = w.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            if let Ok((fn_, gn)) = eval(&wn) {
                if fn_ <= f + 1e-4 * step * slope {
                    accepted = Some((wn, fn_, gn));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((wn, fn_, gn)) = accepted else {
            if hist.is_empty() {
                break;
            }
            hist.clear();
            stalled += 1;
            continue;
        };
        let s: Vec<f64> = wn.iter().zip(&w).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dotv(&s, &y);
        if sy > 1e-12 * normv(&s) * normv(&y) {
            if hist.len() == cfg.memory {
                hist.remove(0);
            }
            hist.push((s, y, 1.0 / sy));
        }
        if f - fn_ > 1e-12 * f.abs().max(1.0) {
            stalled = 0;
        } else {
            stalled += 1;
        }
        w = wn;
        f = fn_;
        g = gn;
    }
    let grad_norm = normv(&g);
    Ok(Minimum {
        w,
        loss: f,
        grad_norm,
        iterations: it,
        converged: grad_norm <= cfg.grad_tol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRecord {
    pub k: usize,
    /// `L_k(w)`
    pub loss: f64,
    /// `|L_{k+1}(w) − L_k(w)|`
    pub delta: f64,
    pub envelope: f64,
    /// `‖∇L_k(w*)‖₂`
    pub grad_norm: f64,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "L_bar")]
    pub l_bar: f64,
}

impl TraceRecord {
    pub fn holds(&self) -> bool {
        self.delta <= self.envelope
    }
}

/// EMA constant for the slope fit.
pub const EMA_ALPHA: f64 = 0.1;
/// Fit window for the log-log slope.
pub const SLOPE_WINDOW: (usize, usize) = (32, 512);
/// Accepted slope interval around the `1/k` trend.
pub const SLOPE_RANGE: (f64, f64) = (-1.3, -0.7);

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceTrace {
    pub model: Model,
    pub variant: Variant,
    /// `‖w − w*‖₂`
    pub radius: f64,
    pub records: Vec<TraceRecord>,
}

impl ConvergenceTrace {
    /// Indices `k` where `delta > envelope`.
    pub fn violations(&self) -> Vec<usize> {
        self.records.iter().filter(|r| !r.holds()).map(|r| r.k).collect()
    }

    /// Exponential moving average of `delta` in `k` order.
    pub fn ema(&self, alpha: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.records.len());
        let mut e = f64::NAN;
        for r in &self.records {
            e = if e.is_nan() { r.delta } else { alpha * r.delta + (1.0 - alpha) * e };
            out.push(e);
        }
        out
    }

    /// Least-squares slope of `ln EMA(delta)` against `ln k` for `k` in
    /// `[lo, hi]`. `None` with fewer than two usable points.
    pub fn slope(&self, alpha: f64, lo: usize, hi: usize) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .records
            .iter()
            .zip(self.ema(alpha))
            .filter(|(r, e)| r.k >= lo && r.k <= hi && *e > 0.0)
            .map(|(r, e)| ((r.k as f64).ln(), e.ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    }

    pub fn default_slope(&self) -> Option<f64> {
        self.slope(EMA_ALPHA, SLOPE_WINDOW.0, SLOPE_WINDOW.1)
    }

    pub fn slope_ok(&self) -> bool {
        self.default_slope()
            .is_some_and(|s| s >= SLOPE_RANGE.0 && s <= SLOPE_RANGE.1)
    }

    /// Plot-ready CSV: `#`-prefixed header lines from `meta`, then columns
    /// `k,loss,delta,envelope,grad_norm,M,L_bar`.
    pub fn write_csv(&self, out: &mut impl Write, meta: &[(&str, String)]) -> std::io::Result<()> {
        let variant = match self.variant {
            Variant::Appendix => "appendix",
            Variant::Maintext => "maintext",
        };
        let model = match self.model {
            Model::Attn => "attn",
            Model::Block => "block",
        };
        write!(out, "# model={model} variant={variant} radius={}", self.radius)?;
        for (k, v) in meta {
            write!(out, " {k}={v}")?;
        }
        writeln!(out)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "loss", "delta", "envelope", "grad_norm", "M", "L_bar"])?;
        for r in &self.records {
            w.write_record([
                r.k.to_string(),
                fmt17(r.loss),
                fmt17(r.delta),
                fmt17(r.envelope),
                fmt17(r.grad_norm),
                fmt17(r.m),
                fmt17(r.l_bar),
            ])?;
        }
        w.flush()
    }
}

/// Streams `samples` in order, recording one row per `k = 1..K−1`.
pub fn convergence_run(
    samples: &[Sample],
    base: &BlockParams,
    model: Model,
    w: &[f64],
    w_star: &[f64],
    variant: Variant,
) -> Result<ConvergenceTrace> {
    if samples.len() < 2 {
        return Err(Error::EmptyDataset);
    }
    let pw = unflatten(base, w, model)?;
    let ps = unflatten(base, w_star, model)?;
    let per: Vec<(f64, f64, Vec<f64>, f64)> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let one = || -> Result<_> {
                let lw = sample_loss(s, &pw, model)?;
                let (ls, gs) = loss_and_grad(s, &ps, model)?;
                Ok((lw, ls, gs, sample_bound(s, &ps, model, variant)?))
            };
            one().map_err(tag_err(i))
        })
        .collect::<Result<_>>()?;
    let r2: f64 = w.iter().zip(w_star).map(|(a, b)| (a - b).powi(2)).sum();
    let mut records = Vec::with_capacity(samples.len() - 1);
    let mut lk = per[0].0;
    let mut grad = per[0].2.clone();
    let mut l_bar = per[0].0.max(per[0].1);
    let mut m = per[0].3;
    for (k, &(lw, ls, ref gs, mk)) in per.iter().enumerate().skip(1) {
        let kf = k as f64;
        let grad_norm = normv(&grad) / kf;
        let next = (kf * lk + lw) / (kf + 1.0);
        l_bar = l_bar.max(lw).max(ls);
        m = m.max(mk);
        records.push(TraceRecord {
            k,
            loss: lk,
            delta: (next - lk).abs(),
            envelope: 2.0 * l_bar / (kf + 1.0) + m * r2 / (kf + 1.0),
            grad_norm,
            m,
            l_bar,
        });
        grad.iter_mut().zip(gs).for_each(|(a, b)| *a += b);
        lk = next;
    }
    Ok(ConvergenceTrace {
        model,
        variant,
        radius: r2.sqrt(),
        records,
    })
}

/// One synthetic convergence experiment.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Experiment {
    pub model: Model,
    pub variant: Variant,
    pub seed: u64,
    /// Probe offset `‖w − w*‖`.
    pub radius: f64,
    /// Samples used to locate `w*`; `None` means half the stream.
    pub k0: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub trace: ConvergenceTrace,
    pub minimum: Minimum,
    pub k0: usize,
}

/// Initial weights from `seed`, `w*` by [`minimize`] on the first `k0`
/// samples, probe `w = w* + r·u` for a seeded unit `u`, then the trace.
pub fn run_experiment(samples: &[Sample], dims: Dims, exp: &Experiment) -> Result<ExperimentResult> {
    if samples.len() < 2 {
        return Err(Error::EmptyDataset);
    }
    let k0 = exp.k0.unwrap_or(samples.len() / 2).clamp(1, samples.len());
    let mut r = rng(exp.seed ^ 0x005e_ed0f_3a7a);
    let base = random_params(dims, &mut r);
    let w0 = flatten(&base, exp.model);
    let minimum = minimize(&samples[..k0], &base, exp.model, &w0, &MinimizeConfig::default())?;
    let u: Vec<f64> = (0..w0.len())
        .map(|_| r.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let un = normv(&u);
    let w: Vec<f64> = minimum
        .w
        .iter()
        .zip(&u)
        .map(|(a, b)| a + exp.radius * b / un)
        .collect();
    let trace = convergence_run(samples, &base, exp.model, &w, &minimum.w, exp.variant)?;
    Ok(ExperimentResult { trace, minimum, k0 })
}

/// `count` samples with i.i.d. `N(0, scale²)` entries in `X` and `Target`.
pub fn generate_synthetic(dims: Dims, count: usize, seed: u64, scale: f64) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Config(format!("sample scale must be positive, got {scale}")));
    }
    let mut r = rng(seed);
    Ok((0..count)
        .map(|_| Sample {
            x: gaussian(&mut r, dims.l, dims.d_v, scale),
            target: gaussian(&mut r, dims.l, dims.d_v, scale),
        })
        .collect())
}

/// Inputs as in [`generate_synthetic`]; targets are the output of a seeded
/// random block plus `N(0, noise²)` entries, so a finite-weight minimizer
/// exists for the block model.
pub fn generate_teacher(
    dims: Dims,
    count: usize,
    seed: u64,
    scale: f64,
    noise: f64,
) -> Result<Vec<Sample>> {
    let mut samples = generate_synthetic(dims, count, seed, scale)?;
    let mut r = rng(seed ^ 0x07ea_c4e5);
    for _ in 0..MAX_DRAWS {
        let teacher = random_params(dims, &mut r);
        let outs: Result<Vec<Mat>> = samples.iter().map(|s| Ok(block_forward(&s.x, &teacher)?.z)).collect();
        if let Ok(outs) = outs {
            for (s, z) in samples.iter_mut().zip(outs) {
                s.target = &z + &gaussian(&mut r, dims.l, dims.d_v, noise);
            }
            return Ok(samples);
        }
    }
    Err(Error::Config(format!("no admissible teacher for seed {seed}")))
}

/// 17 significant digits.
fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn header_line(dims: &Dims) -> String {
    format!("# dims L={} dV={}", dims.l, dims.d_v)
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let bad = |msg: &str| Error::Parse {
        line: 1,
        msg: format!("{msg}; expected `# dims L=<L> dV=<d_V>`"),
    };
    let mut it = line.trim().strip_prefix('#').ok_or_else(|| bad("missing header"))?.split_whitespace();
    if it.next() != Some("dims") {
        return Err(bad("missing `dims`"));
    }
    let mut field = |key: &str| -> Result<usize> {
        it.next()
            .and_then(|t| t.strip_prefix(key))
            .and_then(|v| v.parse().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| bad(&format!("bad `{key}` field")))
    };
    let l = field("L=")?;
    let dv = field("dV=")?;
    if it.next().is_some() {
        return Err(bad("trailing tokens"));
    }
    Ok((l, dv))
}

/// Parses the sample CSV format. Line numbers in errors are 1-based and count
/// the header.
pub fn parse_csv(text: &str, dims: Dims) -> Result<Vec<Sample>> {
    let (head, body) = text.split_once('\n').unwrap_or((text, ""));
    let (l, dv) = parse_header(head.trim_end_matches('\r'))?;
    shape_check((l, dv) == (dims.l, dims.d_v), "csv dims", (l, dv), (dims.l, dims.d_v))?;
    let n = l * dv;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize + 1),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize + 1);
        if rec.len() != 2 * n {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", 2 * n, rec.len()),
            });
        }
        let vals: Vec<f64> = rec
            .iter()
            .enumerate()
            .map(|(c, f)| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line,
                        msg: format!("field {} is not a finite number: {f:?}", c + 1),
                    })
            })
            .collect::<Result<_>>()?;
        out.push(Sample {
            x: Mat::new(l, dv, vals[..n].to_vec())?,
            target: Mat::new(l, dv, vals[n..].to_vec())?,
        });
    }
    Ok(out)
}

pub fn to_csv(samples: &[Sample], dims: Dims) -> Result<String> {
    let mut s = header_line(&dims);
    s.push('\n');
    for (i, smp) in samples.iter().enumerate() {
        smp.check(&dims).map_err(tag_err(i))?;
        let fields: Vec<String> = smp.x.data().iter().chain(smp.target.data()).map(|&v| fmt17(v)).collect();
        s.push_str(&fields.join(","));
        s.push('\n');
    }
    Ok(s)
}

pub fn save_csv(path: &Path, samples: &[Sample], dims: Dims) -> Result<()> {
    std::fs::write(path, to_csv(samples, dims)?)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

pub fn load_csv(path: &Path, dims: Dims) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_csv(&text, dims)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    /// [`generate_synthetic`]
    Gaussian,
    /// [`generate_teacher`]
    Teacher { noise: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataKind {
    Synthetic {
        seed: u64,
        scale: f64,
        count: usize,
        distribution: Distribution,
    },
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSource {
    pub kind: DataKind,
    pub dims: Dims,
}

impl DatasetSource {
    /// `synthetic:<count>` or a CSV path.
    pub fn parse(spec: &str, dims: Dims, seed: u64) -> Result<DatasetSource> {
        let kind = match spec.strip_prefix("synthetic:") {
            Some(c) => {
                let count: usize = c
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad sample count in {spec:?}")))?;
                if count == 0 {
                    return Err(Error::Config("synthetic count must be at least 1".into()));
                }
                DataKind::Synthetic {
                    seed,
                    scale: 1.0,
                    count,
                    distribution: Distribution::Gaussian,
                }
            }
            None if spec.is_empty() => return Err(Error::Config("empty data source".into())),
            None => DataKind::Csv(PathBuf::from(spec)),
        };
        Ok(DatasetSource { kind, dims })
    }

    pub fn load(&self) -> Result<Vec<Sample>> {
        let v = match &self.kind {
            DataKind::Synthetic {
                seed,
                scale,
                count,
                distribution,
            } => match *distribution {
                Distribution::Gaussian => generate_synthetic(self.dims, *count, *seed, *scale)?,
                Distribution::Teacher { noise } => {
                    generate_teacher(self.dims, *count, *seed, *scale, noise)?
                }
            },
            DataKind::Csv(path) => load_csv(path, self.dims)?,
        };
        if v.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(v)
    }
}
