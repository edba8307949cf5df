//! Mean-field variational family: Normal guides for the factor scores and
//! loadings, log-Normal guides for every positive site.

use ndarray::{Array, Array1, Array2, Dimension, Ix1, Ix2, Zip};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::MultiViewDataset;
use crate::error::{MuviError, Result};
use crate::model::{ModelParams, ViewLogs, ViewParams};
use crate::priors::HALF_LN_2PI;

/// Guide standard deviations never drop below this.
pub const MIN_SD: f64 = 1e-6;

const INIT_SD: f64 = 0.1;

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// sd and d sd / d raw.
#[inline]
pub(crate) fn sd_and_slope(raw: f64) -> (f64, f64) {
    // softplus and sigmoid from one exponential
    let e = (-raw.abs()).exp();
    let sd = raw.max(0.0) + e.ln_1p();
    if sd < MIN_SD {
        (MIN_SD, 0.0)
    } else {
        let s = 1.0 / (1.0 + e);
        (sd, if raw >= 0.0 { s } else { e * s })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    /// Normal guide on the real line.
    Real,
    /// log-Normal guide; `loc` is the location of the log.
    Positive,
}

/// Location and raw (pre-softplus) scale of one site.
#[derive(Debug, Clone, PartialEq)]
pub struct Site<D: Dimension> {
    pub loc: Array<f64, D>,
    pub raw: Array<f64, D>,
}

impl<D: Dimension> Site<D> {
    fn constant(shape: D, loc: f64, sd: f64) -> Self {
        Self {
            loc: Array::from_elem(shape.clone(), loc),
            raw: Array::from_elem(shape, inverse_softplus(sd)),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            loc: Array::zeros(self.loc.raw_dim()),
            raw: Array::zeros(self.raw.raw_dim()),
        }
    }

    pub fn sd(&self) -> Array<f64, D> {
        self.raw.mapv(|r| sd_and_slope(r).0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewGuide {
    pub w: Site<Ix2>,
    pub lambda: Site<Ix2>,
    pub c2: Site<Ix2>,
    pub delta: Site<Ix1>,
    /// Length-1 site.
    pub tau: Site<Ix1>,
    pub sigma2: Site<Ix1>,
}

/// All variational parameters. The same type doubles as a gradient or
/// optimizer-moment container.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    pub x: Site<Ix2>,
    pub views: Vec<ViewGuide>,
}

/// Borrowed flat view of one site.
pub struct SiteRef<'a> {
    pub name: &'static str,
    pub view: Option<usize>,
    pub kind: SiteKind,
    pub shape: Vec<usize>,
    pub loc: &'a [f64],
    pub raw: &'a [f64],
}

pub struct SiteMut<'a> {
    pub name: &'static str,
    pub view: Option<usize>,
    pub kind: SiteKind,
    pub loc: &'a mut [f64],
    pub raw: &'a mut [f64],
}

macro_rules! global_sites {
    ($g:expr, $m:expr, $mk:ident) => {
        [
            $mk("w", $m, SiteKind::Real, &$g.w),
            $mk("lambda", $m, SiteKind::Positive, &$g.lambda),
            $mk("c2", $m, SiteKind::Positive, &$g.c2),
            $mk("delta", $m, SiteKind::Positive, &$g.delta),
            $mk("tau", $m, SiteKind::Positive, &$g.tau),
            $mk("sigma2", $m, SiteKind::Positive, &$g.sigma2),
        ]
    };
}

fn site_ref<'a, D: Dimension>(name: &'static str, view: usize, kind: SiteKind, s: &'a Site<D>) -> SiteRef<'a> {
    SiteRef {
        name,
        view: Some(view),
        kind,
        shape: s.loc.shape().to_vec(),
        loc: s.loc.as_slice().expect("standard layout"),
        raw: s.raw.as_slice().expect("standard layout"),
    }
}

fn site_mut<'a, D: Dimension>(name: &'static str, view: usize, kind: SiteKind, s: &'a mut Site<D>) -> SiteMut<'a> {
    SiteMut {
        name,
        view: Some(view),
        kind,
        loc: s.loc.as_slice_mut().expect("standard layout"),
        raw: s.raw.as_slice_mut().expect("standard layout"),
    }
}

fn views_sites_mut(views: &mut [ViewGuide]) -> Vec<SiteMut<'_>> {
    let mut out = Vec::with_capacity(6 * views.len());
    for (m, g) in views.iter_mut().enumerate() {
        out.extend([
            site_mut("w", m, SiteKind::Real, &mut g.w),
            site_mut("lambda", m, SiteKind::Positive, &mut g.lambda),
            site_mut("c2", m, SiteKind::Positive, &mut g.c2),
            site_mut("delta", m, SiteKind::Positive, &mut g.delta),
            site_mut("tau", m, SiteKind::Positive, &mut g.tau),
            site_mut("sigma2", m, SiteKind::Positive, &mut g.sigma2),
        ]);
    }
    out
}

impl ViewGuide {
    fn new(d: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, INIT_SD).expect("valid sd");
        let w_loc = Array2::from_shape_simple_fn((d, k), || normal.sample(rng));
        Self {
            w: Site {
                loc: w_loc,
                raw: Array2::from_elem((d, k), inverse_softplus(INIT_SD)),
            },
            lambda: Site::constant(Ix2(d, k), 0.0, INIT_SD),
            c2: Site::constant(Ix2(d, k), 0.0, INIT_SD),
            delta: Site::constant(Ix1(k), 0.0, INIT_SD),
            tau: Site::constant(Ix1(1), 0.0, INIT_SD),
            sigma2: Site::constant(Ix1(d), 0.0, INIT_SD),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w: self.w.zeros_like(),
            lambda: self.lambda.zeros_like(),
            c2: self.c2.zeros_like(),
            delta: self.delta.zeros_like(),
            tau: self.tau.zeros_like(),
            sigma2: self.sigma2.zeros_like(),
        }
    }
}

impl VariationalParams {
    pub fn n_factors(&self) -> usize {
        self.x.loc.ncols()
    }

    pub fn n_samples(&self) -> usize {
        self.x.loc.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            x: self.x.zeros_like(),
            views: self.views.iter().map(ViewGuide::zeros_like).collect(),
        }
    }

    /// Global (non-X) sites in a fixed order.
    pub fn global_sites(&self) -> Vec<SiteRef<'_>> {
        let mut out = Vec::with_capacity(6 * self.views.len());
        for (m, g) in self.views.iter().enumerate() {
            out.extend(global_sites!(g, m, site_ref));
        }
        out
    }

    pub fn global_sites_mut(&mut self) -> Vec<SiteMut<'_>> {
        views_sites_mut(&mut self.views)
    }

    /// Every site, X first.
    pub fn sites(&self) -> Vec<SiteRef<'_>> {
        let mut out = vec![SiteRef {
            name: "x",
            view: None,
            kind: SiteKind::Real,
            shape: self.x.loc.shape().to_vec(),
            loc: self.x.loc.as_slice().expect("standard layout"),
            raw: self.x.raw.as_slice().expect("standard layout"),
        }];
        out.extend(self.global_sites());
        out
    }

    pub fn sites_mut(&mut self) -> Vec<SiteMut<'_>> {
        let mut out = vec![SiteMut {
            name: "x",
            view: None,
            kind: SiteKind::Real,
            loc: self.x.loc.as_slice_mut().expect("standard layout"),
            raw: self.x.raw.as_slice_mut().expect("standard layout"),
        }];
        out.extend(views_sites_mut(&mut self.views));
        out
    }

    pub fn check_shapes(&self, dataset: &MultiViewDataset) -> Result<()> {
        let k = self.n_factors();
        if self.n_samples() != dataset.n_samples() || self.views.len() != dataset.n_views() {
            return Err(MuviError::Shape(
                "variational parameters do not match the dataset".into(),
            ));
        }
        for (g, v) in self.views.iter().zip(&dataset.views) {
            let d = v.n_features();
            if g.w.loc.dim() != (d, k)
                || g.lambda.loc.dim() != (d, k)
                || g.c2.loc.dim() != (d, k)
                || g.delta.loc.len() != k
                || g.tau.loc.len() != 1
                || g.sigma2.loc.len() != d
            {
                return Err(MuviError::Shape(format!("guide shapes for view {} are wrong", v.name)));
            }
        }
        Ok(())
    }

    /// Posterior point summary: locations for real sites, log-Normal medians
    /// `exp(loc)` for positive sites.
    pub fn point_estimate(&self) -> ModelParams {
        ModelParams {
            x: self.x.loc.clone(),
            views: self
                .views
                .iter()
                .map(|g| ViewParams {
                    w: g.w.loc.clone(),
                    lambda: g.lambda.loc.mapv(f64::exp),
                    c2: g.c2.loc.mapv(f64::exp),
                    delta: g.delta.loc.mapv(f64::exp),
                    tau: g.tau.loc[0].exp(),
                    sigma2: g.sigma2.loc.mapv(f64::exp),
                })
                .collect(),
        }
    }

    /// Loading locations per view.
    pub fn loadings(&self) -> Vec<Array2<f64>> {
        self.views.iter().map(|g| g.w.loc.clone()).collect()
    }

    /// M × K matrix of factor-scale medians.
    pub fn factor_scales(&self) -> Array2<f64> {
        let k = self.n_factors();
        let mut out = Array2::zeros((self.views.len(), k));
        for (m, g) in self.views.iter().enumerate() {
            out.row_mut(m).assign(&g.delta.loc.mapv(f64::exp));
        }
        out
    }
}

/// Initial guide: X and W locations ~ N(0, 0.1²), positive sites centred at
/// median 1, every sd 0.1.
pub fn init_variational(dataset: &MultiViewDataset, n_factors: usize, seed: u64) -> Result<VariationalParams> {
    if n_factors < 1 {
        return Err(MuviError::InvalidArgument("need at least one factor".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_SD).expect("valid sd");
    let x_loc = Array2::from_shape_simple_fn((dataset.n_samples(), n_factors), || normal.sample(&mut rng));
    let views = dataset
        .views
        .iter()
        .map(|v| ViewGuide::new(v.n_features(), n_factors, &mut rng))
        .collect();
    Ok(VariationalParams {
        x: Site {
            loc: x_loc,
            raw: Array2::from_elem((dataset.n_samples(), n_factors), inverse_softplus(INIT_SD)),
        },
        views,
    })
}

/// Standard-normal draws, one per scalar of every site.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub x: Array2<f64>,
    pub views: Vec<ViewNoise>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewNoise {
    pub w: Array2<f64>,
    pub lambda: Array2<f64>,
    pub c2: Array2<f64>,
    pub delta: Array1<f64>,
    pub tau: Array1<f64>,
    pub sigma2: Array1<f64>,
}

impl Noise {
    /// All-zero noise: the median draw.
    pub fn zeros(vp: &VariationalParams) -> Self {
        Self {
            x: Array2::zeros(vp.x.loc.dim()),
            views: vp
                .views
                .iter()
                .map(|g| ViewNoise {
                    w: Array2::zeros(g.w.loc.dim()),
                    lambda: Array2::zeros(g.lambda.loc.dim()),
                    c2: Array2::zeros(g.c2.loc.dim()),
                    delta: Array1::zeros(g.delta.loc.len()),
                    tau: Array1::zeros(1),
                    sigma2: Array1::zeros(g.sigma2.loc.len()),
                })
                .collect(),
        }
    }

    /// Draws noise for every global site and for the X rows in `batch`;
    /// other X rows stay zero.
    pub fn draw<R: Rng + ?Sized>(vp: &VariationalParams, batch: &[usize], rng: &mut R) -> Self {
        let mut noise = Self::zeros(vp);
        for &i in batch {
            for e in noise.x.row_mut(i) {
                *e = StandardNormal.sample(rng);
            }
        }
        for v in &mut noise.views {
            for a in [&mut v.w, &mut v.lambda, &mut v.c2] {
                a.mapv_inplace(|_| StandardNormal.sample(rng));
            }
            for a in [&mut v.delta, &mut v.tau, &mut v.sigma2] {
                a.mapv_inplace(|_| StandardNormal.sample(rng));
            }
        }
        noise
    }

    pub(crate) fn check_shapes(&self, vp: &VariationalParams) -> Result<()> {
        let ok = self.x.dim() == vp.x.loc.dim()
            && self.views.len() == vp.views.len()
            && self.views.iter().zip(&vp.views).all(|(n, g)| {
                n.w.dim() == g.w.loc.dim()
                    && n.lambda.dim() == g.lambda.loc.dim()
                    && n.c2.dim() == g.c2.loc.dim()
                    && n.delta.len() == g.delta.loc.len()
                    && n.tau.len() == 1
                    && n.sigma2.len() == g.sigma2.loc.len()
            });
        if ok {
            Ok(())
        } else {
            Err(MuviError::Shape("noise shapes do not match the guide".into()))
        }
    }
}

/// Guide sd and d sd / d raw of one site.
pub(crate) struct SiteScale<D: Dimension> {
    pub sd: Array<f64, D>,
    pub slope: Array<f64, D>,
}

impl<D: Dimension> SiteScale<D> {
    /// Also returns Σ ln sd.
    fn of(raw: &Array<f64, D>) -> (Self, f64) {
        let mut sd = Array::zeros(raw.raw_dim());
        let mut slope = Array::zeros(raw.raw_dim());
        let mut log_sd = 0.0;
        Zip::from(&mut sd).and(&mut slope).and(raw).for_each(|s, g, &r| {
            let (a, b) = sd_and_slope(r);
            *s = a;
            *g = b;
            log_sd += a.ln();
        });
        (Self { sd, slope }, log_sd)
    }
}

pub(crate) struct ViewScales {
    pub w: SiteScale<Ix2>,
    pub lambda: SiteScale<Ix2>,
    pub c2: SiteScale<Ix2>,
    pub delta: SiteScale<Ix1>,
    pub tau: SiteScale<Ix1>,
    pub sigma2: SiteScale<Ix1>,
}

/// Guide scales for one optimizer step, shared by the draws, log q and the
/// gradient. X scales cover the batch rows only, in batch order.
pub(crate) struct StepGuide {
    pub x: SiteScale<Ix2>,
    pub views: Vec<ViewScales>,
    x_log_sd: f64,
    global_log_sd: f64,
    global_count: usize,
}

/// One reparameterized draw with the logs of its positive sites and its
/// log-density under the guide.
pub(crate) struct GuideDraw {
    pub params: ModelParams,
    pub logs: Vec<ViewLogs>,
    pub log_q: f64,
}

fn real_values<D: Dimension>(
    loc: &Array<f64, D>,
    sc: &SiteScale<D>,
    eps: &Array<f64, D>,
    sq: &mut f64,
) -> Array<f64, D> {
    let mut out = loc.clone();
    Zip::from(&mut out).and(&sc.sd).and(eps).for_each(|o, &s, &e| {
        *o += s * e;
        *sq += e * e;
    });
    out
}

/// (values, logs); adds Σ ln value to `log_sum`.
fn positive_values<D: Dimension>(
    loc: &Array<f64, D>,
    sc: &SiteScale<D>,
    eps: &Array<f64, D>,
    sq: &mut f64,
    log_sum: &mut f64,
) -> (Array<f64, D>, Array<f64, D>) {
    let logs = real_values(loc, sc, eps, sq);
    *log_sum += logs.sum();
    (logs.mapv(f64::exp), logs)
}

impl StepGuide {
    pub(crate) fn new(vp: &VariationalParams, batch: &[usize]) -> Self {
        let x_raw = vp.x.raw.select(ndarray::Axis(0), batch);
        let (x, x_log_sd) = SiteScale::of(&x_raw);
        fn acc<D: Dimension>(raw: &Array<f64, D>, log_sd: &mut f64, count: &mut usize) -> SiteScale<D> {
            let (sc, l) = SiteScale::of(raw);
            *log_sd += l;
            *count += raw.len();
            sc
        }
        let mut global_log_sd = 0.0;
        let mut global_count = 0;
        let (l, c) = (&mut global_log_sd, &mut global_count);
        let views = vp
            .views
            .iter()
            .map(|g| ViewScales {
                w: acc(&g.w.raw, l, c),
                lambda: acc(&g.lambda.raw, l, c),
                c2: acc(&g.c2.raw, l, c),
                delta: acc(&g.delta.raw, l, c),
                tau: acc(&g.tau.raw, l, c),
                sigma2: acc(&g.sigma2.raw, l, c),
            })
            .collect();
        Self {
            x,
            views,
            x_log_sd,
            global_log_sd,
            global_count,
        }
    }

    /// Draws at `noise`; X rows outside `batch` sit at their location and
    /// only batch rows enter log q, scaled by `scale_factor`.
    pub(crate) fn draw(&self, vp: &VariationalParams, batch: &[usize], noise: &Noise, scale_factor: f64) -> GuideDraw {
        let k = vp.n_factors();
        let mut x = vp.x.loc.clone();
        let mut local_sq = 0.0;
        for (r, &i) in batch.iter().enumerate() {
            let sd = self.x.sd.row(r);
            let eps = noise.x.row(i);
            let mut row = x.row_mut(i);
            for kk in 0..k {
                row[kk] += sd[kk] * eps[kk];
                local_sq += eps[kk] * eps[kk];
            }
        }
        let mut sq = 0.0;
        let mut log_sum = 0.0;
        let mut views = Vec::with_capacity(vp.views.len());
        let mut logs = Vec::with_capacity(vp.views.len());
        for ((g, sc), nv) in vp.views.iter().zip(&self.views).zip(&noise.views) {
            let w = real_values(&g.w.loc, &sc.w, &nv.w, &mut sq);
            let (lambda, l_lambda) = positive_values(&g.lambda.loc, &sc.lambda, &nv.lambda, &mut sq, &mut log_sum);
            let (c2, l_c2) = positive_values(&g.c2.loc, &sc.c2, &nv.c2, &mut sq, &mut log_sum);
            let (delta, l_delta) = positive_values(&g.delta.loc, &sc.delta, &nv.delta, &mut sq, &mut log_sum);
            let (tau, l_tau) = positive_values(&g.tau.loc, &sc.tau, &nv.tau, &mut sq, &mut log_sum);
            let (sigma2, l_sigma2) = positive_values(&g.sigma2.loc, &sc.sigma2, &nv.sigma2, &mut sq, &mut log_sum);
            views.push(ViewParams {
                w,
                lambda,
                c2,
                delta,
                tau: tau[0],
                sigma2,
            });
            logs.push(ViewLogs {
                lambda: l_lambda,
                c2: l_c2,
                delta: l_delta,
                tau: l_tau[0],
                sigma2: l_sigma2,
            });
        }
        let n_local = (batch.len() * k) as f64;
        let local = -0.5 * local_sq - HALF_LN_2PI * n_local - self.x_log_sd;
        let global = -0.5 * sq - HALF_LN_2PI * self.global_count as f64 - self.global_log_sd - log_sum;
        GuideDraw {
            params: ModelParams { x, views },
            logs,
            log_q: scale_factor * local + global,
        }
    }
}

/// A realization of the model parameters and the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleState {
    pub params: ModelParams,
    pub noise: Noise,
}

fn real_draw<D: Dimension>(site: &Site<D>, eps: &Array<f64, D>) -> Array<f64, D> {
    let mut out = site.loc.clone();
    Zip::from(&mut out).and(&site.raw).and(eps).for_each(|o, &r, &e| {
        *o += sd_and_slope(r).0 * e;
    });
    out
}

fn positive_draw<D: Dimension>(site: &Site<D>, eps: &Array<f64, D>) -> Array<f64, D> {
    let mut out = real_draw(site, eps);
    out.mapv_inplace(f64::exp);
    out
}

/// Reparameterized draw: `loc + sd·ε` for real sites and `exp(loc + sd·ε)`
/// for positive ones.
pub fn sample(vp: &VariationalParams, noise: &Noise) -> Result<SampleState> {
    noise.check_shapes(vp)?;
    let views = vp
        .views
        .iter()
        .zip(&noise.views)
        .map(|(g, n)| ViewParams {
            w: real_draw(&g.w, &n.w),
            lambda: positive_draw(&g.lambda, &n.lambda),
            c2: positive_draw(&g.c2, &n.c2),
            delta: positive_draw(&g.delta, &n.delta),
            tau: positive_draw(&g.tau, &n.tau)[0],
            sigma2: positive_draw(&g.sigma2, &n.sigma2),
        })
        .collect();
    Ok(SampleState {
        params: ModelParams {
            x: real_draw(&vp.x, &noise.x),
            views,
        },
        noise: noise.clone(),
    })
}

fn real_logq<'a>(loc: &[f64], raw: &[f64], values: impl Iterator<Item = &'a f64>) -> f64 {
    loc.iter()
        .zip(raw)
        .zip(values)
        .map(|((&m, &r), &v)| {
            let sd = sd_and_slope(r).0;
            let z = (v - m) / sd;
            -0.5 * z * z - sd.ln() - HALF_LN_2PI
        })
        .sum()
}

fn positive_logq<'a>(name: &str, loc: &[f64], raw: &[f64], values: impl Iterator<Item = &'a f64>) -> Result<f64> {
    let mut acc = 0.0;
    for ((&m, &r), &v) in loc.iter().zip(raw).zip(values) {
        if !(v > 0.0) {
            return Err(MuviError::Domain(format!("site {name} has nonpositive value {v}")));
        }
        let sd = sd_and_slope(r).0;
        let lv = v.ln();
        let z = (lv - m) / sd;
        acc += -0.5 * z * z - sd.ln() - HALF_LN_2PI - lv;
    }
    Ok(acc)
}

/// Log-density of the full state under the guide.
pub fn log_q(vp: &VariationalParams, state: &SampleState) -> Result<f64> {
    let all: Vec<usize> = (0..vp.n_samples()).collect();
    log_q_batch(vp, state, &all, 1.0)
}

/// Log-density of the guide with the X term restricted to `batch` rows and
/// multiplied by `scale_factor`.
pub fn log_q_batch(vp: &VariationalParams, state: &SampleState, batch: &[usize], scale_factor: f64) -> Result<f64> {
    state.params.check_shapes_against_guide(vp)?;
    let mut local = 0.0;
    for &i in batch {
        let loc = vp.x.loc.row(i);
        let raw = vp.x.raw.row(i);
        local += real_logq(
            loc.as_slice().expect("row"),
            raw.as_slice().expect("row"),
            state.params.x.row(i).iter(),
        );
    }
    let mut global = 0.0;
    for (g, p) in vp.views.iter().zip(&state.params.views) {
        global += real_logq(g.w.loc.as_slice().unwrap(), g.w.raw.as_slice().unwrap(), p.w.iter());
        global += positive_logq(
            "lambda",
            g.lambda.loc.as_slice().unwrap(),
            g.lambda.raw.as_slice().unwrap(),
            p.lambda.iter(),
        )?;
        global += positive_logq(
            "c2",
            g.c2.loc.as_slice().unwrap(),
            g.c2.raw.as_slice().unwrap(),
            p.c2.iter(),
        )?;
        global += positive_logq(
            "delta",
            g.delta.loc.as_slice().unwrap(),
            g.delta.raw.as_slice().unwrap(),
            p.delta.iter(),
        )?;
        global += positive_logq(
            "tau",
            g.tau.loc.as_slice().unwrap(),
            g.tau.raw.as_slice().unwrap(),
            std::iter::once(&p.tau),
        )?;
        global += positive_logq(
            "sigma2",
            g.sigma2.loc.as_slice().unwrap(),
            g.sigma2.raw.as_slice().unwrap(),
            p.sigma2.iter(),
        )?;
    }
    Ok(scale_factor * local + global)
}

impl ModelParams {
    fn check_shapes_against_guide(&self, vp: &VariationalParams) -> Result<()> {
        let ok = self.x.dim() == vp.x.loc.dim()
            && self.views.len() == vp.views.len()
            && self.views.iter().zip(&vp.views).all(|(p, g)| {
                p.w.dim() == g.w.loc.dim()
                    && p.lambda.dim() == g.lambda.loc.dim()
                    && p.c2.dim() == g.c2.loc.dim()
                    && p.delta.len() == g.delta.loc.len()
                    && p.sigma2.len() == g.sigma2.loc.len()
            });
        if ok {
            Ok(())
        } else {
            Err(MuviError::Shape("state shapes do not match the guide".into()))
        }
    }
}

/// Flat, serializable form of one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatSite {
    pub name: String,
    pub view: Option<String>,
    pub kind: SiteKind,
    pub shape: Vec<usize>,
    pub loc: Vec<f64>,
    pub raw: Vec<f64>,
}

impl VariationalParams {
    pub fn to_flat(&self, view_names: &[String]) -> Vec<FlatSite> {
        self.sites()
            .into_iter()
            .map(|s| FlatSite {
                name: s.name.to_string(),
                view: s.view.map(|m| view_names[m].clone()),
                kind: s.kind,
                shape: s.shape,
                loc: s.loc.to_vec(),
                raw: s.raw.to_vec(),
            })
            .collect()
    }

    /// Inverse of [`VariationalParams::to_flat`]; site order must match.
    pub fn from_flat(sites: &[FlatSite], n_views: usize) -> Result<Self> {
        if sites.len() != 1 + 6 * n_views {
            return Err(MuviError::Format(format!(
                "expected {} sites, found {}",
                1 + 6 * n_views,
                sites.len()
            )));
        }
        fn arr2(s: &FlatSite, name: &str) -> Result<Site<Ix2>> {
            if s.name != name || s.shape.len() != 2 {
                return Err(MuviError::Format(format!("expected 2-d site {name}, found {}", s.name)));
            }
            let sh = (s.shape[0], s.shape[1]);
            let bad = |_| MuviError::Format(format!("site {name}: data length does not match shape"));
            Ok(Site {
                loc: Array2::from_shape_vec(sh, s.loc.clone()).map_err(bad)?,
                raw: Array2::from_shape_vec(sh, s.raw.clone()).map_err(bad)?,
            })
        }
        fn arr1(s: &FlatSite, name: &str) -> Result<Site<Ix1>> {
            if s.name != name || s.shape.len() != 1 || s.loc.len() != s.shape[0] || s.raw.len() != s.shape[0] {
                return Err(MuviError::Format(format!("expected 1-d site {name}, found {}", s.name)));
            }
            Ok(Site {
                loc: Array1::from(s.loc.clone()),
                raw: Array1::from(s.raw.clone()),
            })
        }
        let x = arr2(&sites[0], "x")?;
        let mut views = Vec::with_capacity(n_views);
        for chunk in sites[1..].chunks(6) {
            views.push(ViewGuide {
                w: arr2(&chunk[0], "w")?,
                lambda: arr2(&chunk[1], "lambda")?,
                c2: arr2(&chunk[2], "c2")?,
                delta: arr1(&chunk[3], "delta")?,
                tau: arr1(&chunk[4], "tau")?,
                sigma2: arr1(&chunk[5], "sigma2")?,
            });
        }
        Ok(Self { x, views })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ViewBlock;

    fn dataset(n: usize, dims: &[usize]) -> MultiViewDataset {
        let views = dims
            .iter()
            .enumerate()
            .map(|(m, &d)| {
                ViewBlock::dense(
                    format!("v{m}"),
                    Array2::zeros((n, d)),
                    (0..d).map(|j| format!("v{m}_{j}")).collect(),
                )
                .unwrap()
            })
            .collect();
        MultiViewDataset::new((0..n).map(|i| format!("s{i}")).collect(), views).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let ds = dataset(10, &[400, 3]);
        let a = init_variational(&ds, 15, 7).unwrap();
        let b = init_variational(&ds, 15, 7).unwrap();
        let c = init_variational(&ds, 15, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.x.loc, c.x.loc);
        assert_eq!(a.views[0].w.loc.dim(), (400, 15));
        assert!(a.views[0].w.sd().iter().all(|&s| (s - 0.1).abs() < 1e-12));
        assert!(a.views[1].lambda.loc.iter().all(|&l| l == 0.0));
        assert!(init_variational(&ds, 0, 1).is_err());
    }

    #[test]
    fn zero_noise_gives_median_draw() {
        let ds = dataset(3, &[2]);
        let vp = init_variational(&ds, 2, 1).unwrap();
        let s = sample(&vp, &Noise::zeros(&vp)).unwrap();
        assert_eq!(s.params.x, vp.x.loc);
        assert_eq!(s.params.views[0].w, vp.views[0].w.loc);
        assert!(s.params.views[0].lambda.iter().all(|&l| l == 1.0));
    }

    #[test]
    fn tiny_scale_is_deterministic() {
        let ds = dataset(3, &[2]);
        let mut vp = init_variational(&ds, 2, 1).unwrap();
        vp.views[0].delta.raw.fill(-50.0);
        vp.views[0].delta.loc.fill(0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Noise::draw(&vp, &[0, 1, 2], &mut rng);
        let s = sample(&vp, &noise).unwrap();
        for &d in s.params.views[0].delta.iter() {
            assert!((d.ln() - 0.3).abs() < 1e-4);
        }
    }

    #[test]
    fn lognormal_mean_matches_closed_form() {
        let ds = dataset(1, &[1]);
        let mut vp = init_variational(&ds, 1, 1).unwrap();
        let (mu, sd) = (0.2, 0.5);
        vp.views[0].tau.loc.fill(mu);
        vp.views[0].tau.raw.fill(inverse_softplus(sd));
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let noise = Noise::draw(&vp, &[], &mut rng);
                sample(&vp, &noise).unwrap().params.views[0].tau
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let expected = (mu + sd * sd / 2.0f64).exp();
        let var = ((sd * sd).exp() - 1.0) * (2.0 * mu + sd * sd).exp();
        let mc_sd = (var / n as f64).sqrt();
        assert!((mean - expected).abs() < 3.0 * mc_sd, "{mean} vs {expected} ± {mc_sd}");
        assert!(draws.iter().all(|&d| d > 0.0));
    }

    fn one_site_guide() -> VariationalParams {
        let ds = dataset(1, &[1]);
        let mut vp = init_variational(&ds, 1, 1).unwrap();
        vp.x.raw.fill(inverse_softplus(1.0));
        vp
    }

    #[test]
    fn log_q_single_sites() {
        let vp = one_site_guide();
        let s = sample(&vp, &Noise::zeros(&vp)).unwrap();
        // contribution of the X site alone: N(loc; loc, 1)
        let with_x = log_q_batch(&vp, &s, &[0], 1.0).unwrap();
        let without_x = log_q_batch(&vp, &s, &[], 1.0).unwrap();
        assert!((with_x - without_x + 0.918_938_533_204_672_8).abs() < 1e-12);

        let mut vp2 = vp.clone();
        vp2.views[0].tau.loc.fill(0.7);
        vp2.views[0].tau.raw.fill(inverse_softplus(1.0));
        let s2 = sample(&vp2, &Noise::zeros(&vp2)).unwrap();
        let a = log_q(&vp2, &s2).unwrap();
        let b = log_q(&vp, &s).unwrap();
        // tau's term moves from (sd 0.1 at median 1) to (sd 1 at median e^0.7)
        let old_tau = -(0.1f64).ln() - HALF_LN_2PI;
        let new_tau = -0.918_938_533_204_672_8 - 0.7;
        assert!(((a - b) - (new_tau - old_tau)).abs() < 1e-12);
    }

    #[test]
    fn log_q_factorizes() {
        let ds = dataset(4, &[3, 2]);
        let vp = init_variational(&ds, 2, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let noise = Noise::draw(&vp, &[0, 1, 2, 3], &mut rng);
        let s = sample(&vp, &noise).unwrap();
        let total = log_q(&vp, &s).unwrap();
        // sum of per-scalar one-site densities
        let mut sum = 0.0;
        let state_sites: Vec<Vec<f64>> = {
            let p = &s.params;
            let mut v = vec![p.x.iter().cloned().collect::<Vec<_>>()];
            for vpv in &p.views {
                v.push(vpv.w.iter().cloned().collect());
                v.push(vpv.lambda.iter().cloned().collect());
                v.push(vpv.c2.iter().cloned().collect());
                v.push(vpv.delta.iter().cloned().collect());
                v.push(vec![vpv.tau]);
                v.push(vpv.sigma2.iter().cloned().collect());
            }
            v
        };
        for (site, vals) in vp.sites().iter().zip(&state_sites) {
            for ((&m, &r), &x) in site.loc.iter().zip(site.raw).zip(vals) {
                let sd = softplus(r);
                sum += match site.kind {
                    SiteKind::Real => crate::priors::normal_logpdf(x, m, sd).unwrap(),
                    SiteKind::Positive => crate::priors::lognormal_logpdf(x, m, sd).unwrap(),
                };
            }
        }
        assert!((total - sum).abs() < 1e-9 * total.abs());
    }

    #[test]
    fn nonpositive_site_is_rejected() {
        let vp = one_site_guide();
        let mut s = sample(&vp, &Noise::zeros(&vp)).unwrap();
        s.params.views[0].sigma2[0] = 0.0;
        assert!(log_q(&vp, &s).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let ds = dataset(3, &[2, 4]);
        let vp = init_variational(&ds, 3, 2).unwrap();
        let flat = vp.to_flat(&ds.view_names());
        assert_eq!(flat.len(), 13);
        assert_eq!(flat[1].view.as_deref(), Some("v0"));
        assert_eq!(VariationalParams::from_flat(&flat, 2).unwrap(), vp);
        assert!(VariationalParams::from_flat(&flat[1..], 2).is_err());
    }

    #[test]
    fn noise_shape_mismatch() {
        let ds = dataset(3, &[2]);
        let vp = init_variational(&ds, 2, 1).unwrap();
        let other = init_variational(&dataset(4, &[2]), 2, 1).unwrap();
        assert!(sample(&vp, &Noise::zeros(&other)).is_err());
    }
}
