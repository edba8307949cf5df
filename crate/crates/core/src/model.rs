//! Log joint density of the multi-view factor model over a masked dataset.
//!
//! Per view `m`, feature `j`, factor `k`:
//!
//! ```text
//! y_ij ~ N(w_j · x_i, σ²_j)        x_ik ~ N(0, 1)
//! w_jk ~ N(0, v_jk),   1/v_jk = 1/γ²_jk + 1/(a(α_jk) c²_jk),   γ_jk = τ δ_k λ_jk
//! τ, δ_k, λ_jk ~ C⁺(0, 1)      c²_jk ~ IG(α_c, β_c)      σ²_j ~ IG(α_σ, β_σ)
//! ```
//!
//! where `a(α)` is `α²` (sd scaling) or `α` (variance scaling).

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::data::{MultiViewDataset, PriorScaleMatrix};
use crate::error::{MuviError, Result};
use crate::priors::{InverseGammaTerm, PriorConfig, HALF_CAUCHY_FLOOR, HALF_LN_2PI};

/// Per-view parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewParams {
    /// D_m × K loadings.
    pub w: Array2<f64>,
    /// D_m × K local scales.
    pub lambda: Array2<f64>,
    /// D_m × K squared slab widths.
    pub c2: Array2<f64>,
    /// K factor scales.
    pub delta: Array1<f64>,
    /// Global scale.
    pub tau: f64,
    /// D_m noise variances.
    pub sigma2: Array1<f64>,
}

/// One realization of every latent site.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// N × K factor scores.
    pub x: Array2<f64>,
    pub views: Vec<ViewParams>,
}

impl ModelParams {
    pub fn n_factors(&self) -> usize {
        self.x.ncols()
    }

    pub fn check_shapes(&self, dataset: &MultiViewDataset) -> Result<()> {
        let k = self.x.ncols();
        if self.x.nrows() != dataset.n_samples() {
            return Err(MuviError::Shape(format!(
                "X has {} rows, dataset has {} samples",
                self.x.nrows(),
                dataset.n_samples()
            )));
        }
        if self.views.len() != dataset.n_views() {
            return Err(MuviError::Shape(format!(
                "{} parameter views for {} data views",
                self.views.len(),
                dataset.n_views()
            )));
        }
        for (p, v) in self.views.iter().zip(&dataset.views) {
            let dk = (v.n_features(), k);
            if p.w.dim() != dk || p.lambda.dim() != dk || p.c2.dim() != dk {
                return Err(MuviError::Shape(format!(
                    "view {}: loading-site shapes do not match {dk:?}",
                    v.name
                )));
            }
            if p.delta.len() != k || p.sigma2.len() != v.n_features() {
                return Err(MuviError::Shape(format!(
                    "view {}: delta/sigma2 lengths do not match",
                    v.name
                )));
            }
        }
        Ok(())
    }

    fn check_positive(&self) -> Result<()> {
        let ok = |v: &f64| *v > 0.0 && v.is_finite();
        for (m, p) in self.views.iter().enumerate() {
            let sites = [
                ("lambda", p.lambda.iter().all(ok)),
                ("c2", p.c2.iter().all(ok)),
                ("delta", p.delta.iter().all(ok)),
                ("tau", ok(&p.tau)),
                ("sigma2", p.sigma2.iter().all(ok)),
            ];
            if let Some((name, _)) = sites.iter().find(|(_, fine)| !fine) {
                return Err(MuviError::Domain(format!(
                    "site {name} of view {m} must be positive and finite"
                )));
            }
        }
        Ok(())
    }
}

/// Gradient of the log joint. Real sites (`x`, `w`) carry plain partial
/// derivatives; positive sites carry derivatives with respect to the log of
/// the site value.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradient {
    pub x: Array2<f64>,
    pub views: Vec<ViewGradient>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewGradient {
    pub w: Array2<f64>,
    pub log_lambda: Array2<f64>,
    pub log_c2: Array2<f64>,
    pub log_delta: Array1<f64>,
    pub log_tau: f64,
    pub log_sigma2: Array1<f64>,
}

impl ViewGradient {
    fn zeros(d: usize, k: usize) -> Self {
        Self {
            w: Array2::zeros((d, k)),
            log_lambda: Array2::zeros((d, k)),
            log_c2: Array2::zeros((d, k)),
            log_delta: Array1::zeros(k),
            log_tau: 0.0,
            log_sigma2: Array1::zeros(d),
        }
    }
}

/// Natural logs of one view's positive sites, for callers that already hold them.
#[derive(Debug, Clone)]
pub(crate) struct ViewLogs {
    pub lambda: Array2<f64>,
    pub c2: Array2<f64>,
    pub delta: Array1<f64>,
    pub tau: f64,
    pub sigma2: Array1<f64>,
}

impl ViewLogs {
    pub(crate) fn of(p: &ViewParams) -> Self {
        Self {
            lambda: p.lambda.mapv(f64::ln),
            c2: p.c2.mapv(f64::ln),
            delta: p.delta.mapv(f64::ln),
            tau: p.tau.ln(),
            sigma2: p.sigma2.mapv(f64::ln),
        }
    }
}

fn check_batch(batch: &[usize], n: usize) -> Result<()> {
    if let Some(&i) = batch.iter().find(|&&i| i >= n) {
        return Err(MuviError::InvalidArgument(format!(
            "batch index {i} out of range for {n} samples"
        )));
    }
    Ok(())
}

fn is_identity(batch: &[usize], n: usize) -> bool {
    batch.len() == n && batch.iter().enumerate().all(|(a, &b)| a == b)
}

/// Gaussian log-likelihood of the observed entries of the batch rows.
pub fn log_likelihood(params: &ModelParams, dataset: &MultiViewDataset, batch: &[usize]) -> Result<f64> {
    params.check_shapes(dataset)?;
    params.check_positive()?;
    check_batch(batch, dataset.n_samples())?;
    let x_b = params.x.select(Axis(0), batch);
    Ok(dataset
        .views
        .iter()
        .zip(&params.views)
        .map(|(v, p)| {
            let y_b = select_rows(&v.data, batch, dataset.n_samples());
            let mask_b = select_rows(&v.mask, batch, dataset.n_samples());
            let log_s2 = p.sigma2.mapv(f64::ln);
            view_likelihood(x_b.view(), y_b.view(), mask_b.view(), p, &log_s2, false).0
        })
        .sum())
}

/// Full prior: every X row plus all global sites.
pub fn log_prior(params: &ModelParams, prior_scales: &PriorScaleMatrix, config: &PriorConfig) -> Result<f64> {
    params.check_positive()?;
    check_scale_shapes(params, prior_scales)?;
    config.validate()?;
    let x_prior: f64 = params.x.iter().map(|&x| -0.5 * x * x - HALF_LN_2PI).sum();
    let global: f64 = params
        .views
        .iter()
        .zip(&prior_scales.views)
        .map(|(p, a)| view_prior(p, &ViewLogs::of(p), a.view(), config, false).0)
        .sum();
    Ok(x_prior + global)
}

fn check_scale_shapes(params: &ModelParams, prior_scales: &PriorScaleMatrix) -> Result<()> {
    if prior_scales.views.len() != params.views.len()
        || params
            .views
            .iter()
            .zip(&prior_scales.views)
            .any(|(p, a)| p.w.dim() != a.dim())
    {
        return Err(MuviError::Shape("prior scales do not match loading shapes".into()));
    }
    Ok(())
}

/// `scale_factor · (batch likelihood + batch X prior) + global prior`.
pub fn log_joint(
    params: &ModelParams,
    dataset: &MultiViewDataset,
    prior_scales: &PriorScaleMatrix,
    config: &PriorConfig,
    batch: &[usize],
    scale_factor: f64,
) -> Result<f64> {
    validate_joint(params, dataset, prior_scales, config, batch, scale_factor)?;
    Ok(log_joint_impl(params, None, dataset, prior_scales, config, batch, scale_factor, false).0)
}

/// [`log_joint`] together with its gradient.
pub fn log_joint_with_grad(
    params: &ModelParams,
    dataset: &MultiViewDataset,
    prior_scales: &PriorScaleMatrix,
    config: &PriorConfig,
    batch: &[usize],
    scale_factor: f64,
) -> Result<(f64, ModelGradient)> {
    validate_joint(params, dataset, prior_scales, config, batch, scale_factor)?;
    let (v, g) = log_joint_impl(params, None, dataset, prior_scales, config, batch, scale_factor, true);
    Ok((v, g.expect("gradient requested")))
}

fn validate_joint(
    params: &ModelParams,
    dataset: &MultiViewDataset,
    prior_scales: &PriorScaleMatrix,
    config: &PriorConfig,
    batch: &[usize],
    scale_factor: f64,
) -> Result<()> {
    if !(scale_factor > 0.0 && scale_factor.is_finite()) {
        return Err(MuviError::InvalidArgument(format!(
            "scale factor must be positive, got {scale_factor}"
        )));
    }
    params.check_shapes(dataset)?;
    params.check_positive()?;
    check_scale_shapes(params, prior_scales)?;
    config.validate()?;
    check_batch(batch, dataset.n_samples())
}

fn select_rows<'a, T: Clone>(a: &'a Array2<T>, batch: &[usize], n: usize) -> std::borrow::Cow<'a, Array2<T>> {
    if is_identity(batch, n) {
        std::borrow::Cow::Borrowed(a)
    } else {
        std::borrow::Cow::Owned(a.select(Axis(0), batch))
    }
}

/// Unchecked workhorse shared with the optimizer. `logs`, when given, must
/// hold the logs of the positive sites of `params`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn log_joint_impl(
    params: &ModelParams,
    logs: Option<&[ViewLogs]>,
    dataset: &MultiViewDataset,
    prior_scales: &PriorScaleMatrix,
    config: &PriorConfig,
    batch: &[usize],
    scale_factor: f64,
    want_grad: bool,
) -> (f64, Option<ModelGradient>) {
    let n = dataset.n_samples();
    let k = params.n_factors();
    let x_b = select_rows(&params.x, batch, n);

    struct ViewOut {
        loglik: f64,
        prior: f64,
        dx: Option<Array2<f64>>,
        grad: Option<ViewGradient>,
    }

    let outs: Vec<ViewOut> = dataset
        .views
        .par_iter()
        .zip(params.views.par_iter())
        .zip(prior_scales.views.par_iter())
        .enumerate()
        .map(|(m, ((v, p), a))| {
            let owned;
            let lg = match logs {
                Some(l) => &l[m],
                None => {
                    owned = ViewLogs::of(p);
                    &owned
                }
            };
            let y_b = select_rows(&v.data, batch, n);
            let mask_b = select_rows(&v.mask, batch, n);
            let (loglik, lik_grad) = view_likelihood(x_b.view(), y_b.view(), mask_b.view(), p, &lg.sigma2, want_grad);
            let (prior, prior_grad) = view_prior(p, lg, a.view(), config, want_grad);
            let (dx, grad) = match (lik_grad, prior_grad) {
                (Some(lg), Some(mut pg)) => {
                    pg.w.scaled_add(scale_factor, &lg.dw);
                    pg.log_sigma2.scaled_add(scale_factor, &lg.dlog_sigma2);
                    (Some(lg.dx), Some(pg))
                }
                _ => (None, None),
            };
            ViewOut {
                loglik,
                prior,
                dx,
                grad,
            }
        })
        .collect();

    let x_prior: f64 = x_b.iter().map(|&x| -0.5 * x * x - HALF_LN_2PI).sum();
    // fixed-order reduction
    let mut loglik = 0.0;
    let mut global = 0.0;
    for o in &outs {
        loglik += o.loglik;
        global += o.prior;
    }
    let value = scale_factor * (loglik + x_prior) + global;

    if !want_grad {
        return (value, None);
    }
    let mut dx_b = x_b.mapv(|x| -x);
    let mut views = Vec::with_capacity(outs.len());
    for o in outs {
        dx_b += &o.dx.expect("gradient requested");
        views.push(o.grad.expect("gradient requested"));
    }
    dx_b *= scale_factor;
    let mut dx = Array2::zeros((n, k));
    for (r, &i) in batch.iter().enumerate() {
        let mut row = dx.row_mut(i);
        row += &dx_b.row(r);
    }
    (value, Some(ModelGradient { x: dx, views }))
}

struct LikelihoodGrad {
    dx: Array2<f64>,
    dw: Array2<f64>,
    dlog_sigma2: Array1<f64>,
}

fn view_likelihood(
    x_b: ArrayView2<f64>,
    y_b: ArrayView2<f64>,
    mask_b: ArrayView2<bool>,
    p: &ViewParams,
    log_s2: &Array1<f64>,
    want_grad: bool,
) -> (f64, Option<LikelihoodGrad>) {
    let d = p.w.nrows();
    let mut resid = Array2::zeros((x_b.nrows(), d));
    general_mat_mul(1.0, &x_b, &p.w.t(), 0.0, &mut resid);
    let inv_s2: Vec<f64> = p.sigma2.iter().map(|s| 1.0 / s).collect();
    let log_s2 = log_s2.as_slice().expect("contiguous");
    let mut ll = 0.0;
    let mut cnt = vec![0usize; d];
    let mut ss = vec![0.0; d];
    let all_observed = mask_b.iter().all(|&m| m);
    for ((mut r, y), m) in resid.rows_mut().into_iter().zip(y_b.rows()).zip(mask_b.rows()) {
        let r = r.as_slice_mut().expect("contiguous");
        let (y, m) = match (y.as_slice(), m.as_slice()) {
            (Some(y), Some(m)) => (y, m),
            _ => unreachable!("dataset rows are contiguous"),
        };
        if all_observed {
            for ((((r, &y), &ls), &is), ss) in r.iter_mut().zip(y).zip(log_s2).zip(&inv_s2).zip(ss.iter_mut()) {
                let e = y - *r;
                let e2 = e * e;
                ll -= 0.5 * (ls + e2 * is);
                *ss += e2;
                *r = e * is;
            }
            continue;
        }
        for j in 0..d {
            if m[j] {
                let e = y[j] - r[j];
                let e2 = e * e;
                ll -= 0.5 * (log_s2[j] + e2 * inv_s2[j]);
                cnt[j] += 1;
                ss[j] += e2;
                r[j] = e * inv_s2[j];
            } else {
                r[j] = 0.0;
            }
        }
    }
    if all_observed {
        cnt.iter_mut().for_each(|c| *c = x_b.nrows());
    }
    let n_obs: usize = cnt.iter().sum();
    ll -= HALF_LN_2PI * n_obs as f64;
    if !want_grad {
        return (ll, None);
    }
    // resid now holds the precision-weighted residuals
    let dw = resid.t().dot(&x_b);
    let dx = resid.dot(&p.w);
    let dlog_sigma2 = Array1::from_iter((0..d).map(|j| -0.5 * cnt[j] as f64 + 0.5 * ss[j] * inv_s2[j]));
    (ll, Some(LikelihoodGrad { dx, dw, dlog_sigma2 }))
}

/// Floors a positive value given with its log; the flag marks a floored value.
#[inline]
fn floored(v: f64, log_v: f64, log_floor: f64) -> (f64, f64, bool) {
    if v < HALF_CAUCHY_FLOOR {
        (HALF_CAUCHY_FLOOR, log_floor, true)
    } else {
        (v, log_v, false)
    }
}

/// Half-Cauchy(0, 1) term at a floored value and its derivative w.r.t. the
/// log of the argument (zero when floored).
#[inline]
fn half_cauchy_term(v: f64, log_v: f64, is_floored: bool) -> (f64, f64) {
    const LN_2_OVER_PI: f64 = -0.451_582_705_289_454_9;
    let v2 = v * v;
    let (log1p_v2, g) = if v > 1e150 {
        (2.0 * log_v, -2.0)
    } else {
        (v2.ln_1p(), -2.0 * v2 / (1.0 + v2))
    };
    (LN_2_OVER_PI - log1p_v2, if is_floored { 0.0 } else { g })
}

fn view_prior(
    p: &ViewParams,
    logs: &ViewLogs,
    alpha: ArrayView2<f64>,
    cfg: &PriorConfig,
    want_grad: bool,
) -> (f64, Option<ViewGradient>) {
    let (d, k) = p.w.dim();
    let mut g = if want_grad {
        Some(ViewGradient::zeros(d, k))
    } else {
        None
    };
    let log_floor = HALF_CAUCHY_FLOOR.ln();
    let slab_ig = InverseGammaTerm::new(cfg.slab_shape, cfg.slab_scale);
    let noise_ig = InverseGammaTerm::new(cfg.sigma_shape, cfg.sigma_scale);
    let mut lp = 0.0;

    let (tau, log_tau, tau_floored) = floored(p.tau, logs.tau, log_floor);
    let (t, gt) = half_cauchy_term(tau, log_tau, tau_floored);
    lp += t;
    let mut g_tau = gt;

    let mut delta = Vec::with_capacity(k);
    let mut delta_floored = Vec::with_capacity(k);
    for (kk, (&dv, &ld)) in p.delta.iter().zip(&logs.delta).enumerate() {
        let (v, lv, f) = floored(dv, ld, log_floor);
        delta.push(v);
        delta_floored.push(f);
        let (t, gd) = half_cauchy_term(v, lv, f);
        lp += t;
        if let Some(g) = g.as_mut() {
            g.log_delta[kk] = gd;
        }
    }
    // τ δ_k for every factor
    let tau_delta: Vec<f64> = delta.iter().map(|dv| tau * dv).collect();

    for j in 0..d {
        let s2 = p.sigma2[j];
        lp += noise_ig.log_density(s2, logs.sigma2[j]);
        if let Some(g) = g.as_mut() {
            g.log_sigma2[j] = noise_ig.dlog(s2);
        }
        let w_row = p.w.row(j);
        let lam_row = p.lambda.row(j);
        let c2_row = p.c2.row(j);
        let llam_row = logs.lambda.row(j);
        let lc2_row = logs.c2.row(j);
        let a_row = alpha.row(j);
        for kk in 0..k {
            let w = w_row[kk];
            let c2 = c2_row[kk];
            let (lam, log_lam, lam_floored) = floored(lam_row[kk], llam_row[kk], log_floor);
            let (t_lam, g_lam) = half_cauchy_term(lam, log_lam, lam_floored);
            lp += t_lam;
            lp += slab_ig.log_density(c2, lc2_row[kk]);

            let gamma = tau_delta[kk] * lam;
            let inv_gamma2 = 1.0 / (gamma * gamma);
            let slab_var = cfg.slab_scaling.variance_factor(a_row[kk]) * c2;
            let inv_slab = 1.0 / slab_var;
            let precision = inv_gamma2 + inv_slab;
            let v = 1.0 / precision;
            lp += -HALF_LN_2PI + 0.5 * precision.ln() - 0.5 * w * w * precision;

            if let Some(g) = g.as_mut() {
                g.w[[j, kk]] = -w * precision;
                // d/dP = (v - w²)/2, dP/dln γ = -2/γ², dP/dln c² = -1/slab_var
                let dp = 0.5 * (v - w * w);
                let d_log_gamma = -2.0 * inv_gamma2 * dp;
                g.log_lambda[[j, kk]] = g_lam + if lam_floored { 0.0 } else { d_log_gamma };
                if !delta_floored[kk] {
                    g.log_delta[kk] += d_log_gamma;
                }
                if !tau_floored {
                    g_tau += d_log_gamma;
                }
                g.log_c2[[j, kk]] = slab_ig.dlog(c2) - inv_slab * dp;
            }
        }
    }
    if let Some(g) = g.as_mut() {
        g.log_tau = g_tau;
    }
    (lp, g)
}
