//! Stochastic variational inference: Monte Carlo ELBO, reparameterized
//! gradients derived by hand, Adam updates, minibatching and convergence
//! monitoring.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array, Dimension, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{MultiViewDataset, PriorScaleMatrix};
use crate::error::{MuviError, Result};
use crate::model::{log_joint, log_joint_impl, ModelGradient};
use crate::priors::PriorConfig;
use crate::variational::{
    init_variational, log_q_batch, sample, FlatSite, Noise, Site, SiteScale, StepGuide, VariationalParams,
};

const NOISE_STREAM_SALT: u64 = 0x006e_6f69_7365;
const SHUFFLE_STREAM_SALT: u64 = 0x0073_6875_6666_6c65;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// `None` trains on the full dataset every step.
    pub batch_size: Option<usize>,
    pub max_epochs: usize,
    pub mc_samples: usize,
    /// Consecutive non-improving checks before stopping.
    pub patience: usize,
    /// Minimum relative improvement of the smoothed ELBO per check.
    pub rel_tol: f64,
    /// Epochs between convergence checks.
    pub check_every: usize,
    /// No convergence stop before this many epochs.
    pub min_epochs: usize,
    /// Weight of the previous value in the exponentially smoothed ELBO.
    pub smoothing: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            batch_size: None,
            max_epochs: 10_000,
            mc_samples: 1,
            patience: 10,
            rel_tol: 1e-4,
            check_every: 1,
            min_epochs: 0,
            smoothing: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for the full-size synthetic benchmark (200 samples, four
    /// 400-feature views, 15 factors). Four noise draws per step and a slow
    /// ELBO average checked every 250 epochs; the per-epoch defaults stop
    /// long before the factor rotation settles.
    pub fn benchmark() -> Self {
        Self {
            learning_rate: 0.01,
            max_epochs: 12_000,
            mc_samples: 4,
            patience: 3,
            rel_tol: 2.5e-4,
            check_every: 250,
            min_epochs: 3000,
            smoothing: 0.995,
            ..Self::default()
        }
    }

    pub fn validate(&self, n_samples: usize) -> Result<()> {
        let bad = |msg: String| Err(MuviError::InvalidArgument(msg));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            ));
        }
        if let Some(b) = self.batch_size {
            if b == 0 || b > n_samples {
                return bad(format!("batch size must lie in 1..={n_samples}, got {b}"));
            }
        }
        if self.max_epochs == 0 || self.mc_samples == 0 || self.patience == 0 || self.check_every == 0 {
            return bad("max_epochs, mc_samples, patience and check_every must be positive".into());
        }
        if !(self.rel_tol > 0.0) {
            return bad(format!("rel_tol must be positive, got {}", self.rel_tol));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return bad(format!("smoothing must lie in [0, 1), got {}", self.smoothing));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("invalid Adam hyperparameters".into());
        }
        Ok(())
    }

    pub fn effective_batch_size(&self, n_samples: usize) -> usize {
        self.batch_size.unwrap_or(n_samples).min(n_samples)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub elbo: Vec<f64>,
    pub smoothed_elbo: Vec<f64>,
    pub elapsed_ms: Vec<f64>,
    pub epochs: usize,
    pub stop_reason: Option<StopReason>,
}

impl TrainTrace {
    fn push(&mut self, elbo: f64, smoothed: f64, elapsed_ms: f64) {
        self.elbo.push(elbo);
        self.smoothed_elbo.push(smoothed);
        self.elapsed_ms.push(elapsed_ms);
    }

    pub fn n_steps(&self) -> usize {
        self.elbo.len()
    }

    /// CSV with columns `step,elbo,smoothed_elbo,elapsed_ms`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| MuviError::io(path, e))?);
        let io = |e| MuviError::io(path, e);
        writeln!(f, "step,elbo,smoothed_elbo,elapsed_ms").map_err(io)?;
        for i in 0..self.elbo.len() {
            writeln!(
                f,
                "{},{},{},{:.3}",
                i + 1,
                self.elbo[i],
                self.smoothed_elbo[i],
                self.elapsed_ms[i]
            )
            .map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

/// Adam moments for every variational parameter. X rows keep their own step
/// counters because they are only updated when sampled into a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: VariationalParams,
    pub v: VariationalParams,
    pub step: u64,
    pub x_row_steps: Vec<u64>,
}

impl OptimizerState {
    pub fn new(vp: &VariationalParams) -> Self {
        Self {
            m: vp.zeros_like(),
            v: vp.zeros_like(),
            step: 0,
            x_row_steps: vec![0; vp.n_samples()],
        }
    }
}

fn scale_factor(n: usize, b: usize) -> f64 {
    n as f64 / b as f64
}

/// Monte Carlo ELBO: the mean over `noises` of `log p − log q` at the
/// reparameterized draws, with local terms scaled by N/B.
pub fn elbo_estimate(
    vp: &VariationalParams,
    dataset: &MultiViewDataset,
    prior_scales: &PriorScaleMatrix,
    config: &PriorConfig,
    batch: &[usize],
    noises: &[Noise],
) -> Result<f64> {
    if batch.is_empty() || noises.is_empty() {
        return Err(MuviError::InvalidArgument(
            "batch and noise draws must be non-empty".into(),
        ));
    }
    vp.check_shapes(dataset)?;
    let sf = scale_factor(dataset.n_samples(), batch.len());
    let mut acc = 0.0;
    for noise in noises {
        let state = sample(vp, noise)?;
        let lp = log_joint(&state.params, dataset, prior_scales, config, batch, sf).map_err(|e| match e {
            MuviError::Domain(msg) => MuviError::NonFinite { site: msg },
            other => other,
        })?;
        let lq = log_q_batch(vp, &state, batch, sf)?;
        let v = lp - lq;
        if !v.is_finite() {
            return Err(MuviError::NonFinite {
                site: locate_nonfinite(&state.params).unwrap_or_else(|| "elbo".into()),
            });
        }
        acc += v;
    }
    Ok(acc / noises.len() as f64)
}

fn locate_nonfinite(p: &crate::model::ModelParams) -> Option<String> {
    if p.x.iter().any(|v| !v.is_finite()) {
        return Some("x".into());
    }
    for (m, v) in p.views.iter().enumerate() {
        let checks: [(&str, bool); 6] = [
            ("w", v.w.iter().any(|x| !x.is_finite())),
            ("lambda", v.lambda.iter().any(|x| !(x.is_finite() && *x > 0.0))),
            ("c2", v.c2.iter().any(|x| !(x.is_finite() && *x > 0.0))),
            ("delta", v.delta.iter().any(|x| !(x.is_finite() && *x > 0.0))),
            ("tau", !(v.tau.is_finite() && v.tau > 0.0)),
            ("sigma2", v.sigma2.iter().any(|x| !(x.is_finite() && *x > 0.0))),
        ];
        if let Some((name, _)) = checks.iter().find(|(_, bad)| *bad) {
            return Some(format!("{name}[view {m}]"));
        }
    }
    None
}

fn accumulate_real<D: Dimension>(out: &mut Site<D>, sc: &SiteScale<D>, g: &Array<f64, D>, eps: &Array<f64, D>) {
    Zip::from(&mut out.loc)
        .and(&mut out.raw)
        .and(&sc.sd)
        .and(&sc.slope)
        .and(g)
        .and(eps)
        .for_each(|dl, dr, &sd, &slope, &g, &e| {
            *dl += g;
            *dr += (g * e + 1.0 / sd) * slope;
        });
}

fn accumulate_positive<D: Dimension>(out: &mut Site<D>, sc: &SiteScale<D>, g_log: &Array<f64, D>, eps: &Array<f64, D>) {
    // the log-Normal Jacobian adds 1 to the log-space gradient
    Zip::from(&mut out.loc)
        .and(&mut out.raw)
        .and(&sc.sd)
        .and(&sc.slope)
        .and(g_log)
        .and(eps)
        .for_each(|dl, dr, &sd, &slope, &g, &e| {
            let gu = g + 1.0;
            *dl += gu;
            *dr += (gu * e + 1.0 / sd) * slope;
        });
}

/// ELBO estimate and its exact gradient with respect to every variational
/// parameter for the given (frozen) noise draws.
pub fn elbo_gradient(
    vp: &VariationalParams,
    dataset: &MultiViewDataset,
    prior_scales: &PriorScaleMatrix,
    config: &PriorConfig,
    batch: &[usize],
    noises: &[Noise],
) -> Result<(f64, VariationalParams)> {
    if batch.is_empty() || noises.is_empty() {
        return Err(MuviError::InvalidArgument(
            "batch and noise draws must be non-empty".into(),
        ));
    }
    vp.check_shapes(dataset)?;
    let n = dataset.n_samples();
    if let Some(&i) = batch.iter().find(|&&i| i >= n) {
        return Err(MuviError::InvalidArgument(format!("batch index {i} out of range")));
    }
    for noise in noises {
        noise.check_shapes(vp)?;
    }
    let sf = scale_factor(n, batch.len());
    let guide = StepGuide::new(vp, batch);
    let mut grad = vp.zeros_like();
    let mut elbo = 0.0;
    for noise in noises {
        let draw = guide.draw(vp, batch, noise, sf);
        let (lp, g) = log_joint_impl(
            &draw.params,
            Some(&draw.logs),
            dataset,
            prior_scales,
            config,
            batch,
            sf,
            true,
        );
        let g: ModelGradient = g.expect("gradient requested");
        let value = lp - draw.log_q;
        if !value.is_finite() {
            return Err(MuviError::NonFinite {
                site: locate_nonfinite(&draw.params).unwrap_or_else(|| "elbo".into()),
            });
        }
        elbo += value;

        for (r, &i) in batch.iter().enumerate() {
            let (mut dl, mut dr) = (grad.x.loc.row_mut(i), grad.x.raw.row_mut(i));
            let (sd, slope) = (guide.x.sd.row(r), guide.x.slope.row(r));
            for kk in 0..vp.n_factors() {
                let gx = g.x[[i, kk]];
                dl[kk] += gx;
                dr[kk] += (gx * noise.x[[i, kk]] + sf / sd[kk]) * slope[kk];
            }
        }
        for (m, (gv, nv)) in g.views.iter().zip(&noise.views).enumerate() {
            let sc = &guide.views[m];
            let out = &mut grad.views[m];
            accumulate_real(&mut out.w, &sc.w, &gv.w, &nv.w);
            accumulate_positive(&mut out.lambda, &sc.lambda, &gv.log_lambda, &nv.lambda);
            accumulate_positive(&mut out.c2, &sc.c2, &gv.log_c2, &nv.c2);
            accumulate_positive(&mut out.delta, &sc.delta, &gv.log_delta, &nv.delta);
            let tau_g = ndarray::arr1(&[gv.log_tau]);
            accumulate_positive(&mut out.tau, &sc.tau, &tau_g, &nv.tau);
            accumulate_positive(&mut out.sigma2, &sc.sigma2, &gv.log_sigma2, &nv.sigma2);
        }
    }
    let inv = 1.0 / noises.len() as f64;
    if noises.len() > 1 {
        grad.x.loc *= inv;
        grad.x.raw *= inv;
        for s in grad.global_sites_mut() {
            s.loc.iter_mut().for_each(|v| *v *= inv);
            s.raw.iter_mut().for_each(|v| *v *= inv);
        }
    }
    for s in grad.sites() {
        if s.loc.iter().chain(s.raw).any(|v| !v.is_finite()) {
            let site = match s.view {
                Some(m) => format!("{}[view {m}]", s.name),
                None => s.name.to_string(),
            };
            return Err(MuviError::NonFinite { site });
        }
    }
    Ok((elbo * inv, grad))
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, cfg: &TrainConfig, bc1: f64, bc2: f64) {
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        // ascent on the ELBO
        p[i] += lr * mhat / (vhat.sqrt() + cfg.epsilon);
    }
}

fn step_rng(seed: u64, salt: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(stream);
    rng
}

/// Draws the noise for optimizer step `step` (deterministic in seed and step).
pub fn step_noise(vp: &VariationalParams, batch: &[usize], mc_samples: usize, seed: u64, step: u64) -> Vec<Noise> {
    let mut rng = step_rng(seed, NOISE_STREAM_SALT, step);
    (0..mc_samples).map(|_| Noise::draw(vp, batch, &mut rng)).collect()
}

/// One Adam step on the single- or multi-sample ELBO of `batch`. Returns the
/// ELBO estimate at the pre-update parameters.
pub fn gradient_step(
    vp: &mut VariationalParams,
    dataset: &MultiViewDataset,
    prior_scales: &PriorScaleMatrix,
    config: &PriorConfig,
    train: &TrainConfig,
    batch: &[usize],
    state: &mut OptimizerState,
) -> Result<f64> {
    let noises = step_noise(vp, batch, train.mc_samples, train.seed, state.step);
    let (elbo, grad) = elbo_gradient(vp, dataset, prior_scales, config, batch, &noises)?;
    state.step += 1;
    let t = state.step as i32;
    let lr = train.learning_rate;
    let (bc1, bc2) = (1.0 - train.beta1.powi(t), 1.0 - train.beta2.powi(t));

    {
        let params = vp.global_sites_mut();
        let grads = grad.global_sites();
        let ms = state.m.global_sites_mut();
        let vs = state.v.global_sites_mut();
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(ms).zip(vs) {
            adam_update(p.loc, g.loc, m.loc, v.loc, lr, train, bc1, bc2);
            adam_update(p.raw, g.raw, m.raw, v.raw, lr, train, bc1, bc2);
        }
    }

    for &i in batch {
        state.x_row_steps[i] += 1;
        let ti = state.x_row_steps[i] as i32;
        let (bc1, bc2) = (1.0 - train.beta1.powi(ti), 1.0 - train.beta2.powi(ti));
        let gl = grad.x.loc.row(i);
        let gr = grad.x.raw.row(i);
        adam_update(
            vp.x.loc.row_mut(i).into_slice().expect("row"),
            gl.as_slice().expect("row"),
            state.m.x.loc.row_mut(i).into_slice().expect("row"),
            state.v.x.loc.row_mut(i).into_slice().expect("row"),
            lr,
            train,
            bc1,
            bc2,
        );
        adam_update(
            vp.x.raw.row_mut(i).into_slice().expect("row"),
            gr.as_slice().expect("row"),
            state.m.x.raw.row_mut(i).into_slice().expect("row"),
            state.v.x.raw.row_mut(i).into_slice().expect("row"),
            lr,
            train,
            bc1,
            bc2,
        );
    }
    Ok(elbo)
}

/// Outcome of [`fit`].
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: VariationalParams,
    pub optimizer: OptimizerState,
    pub trace: TrainTrace,
}

/// Trains a fresh guide from the seeded initialization.
pub fn fit(
    dataset: &MultiViewDataset,
    prior_scales: &PriorScaleMatrix,
    n_factors: usize,
    config: &PriorConfig,
    train: &TrainConfig,
) -> Result<FitResult> {
    if prior_scales.n_factors() != n_factors {
        return Err(MuviError::Shape(format!(
            "prior scales have {} factors, expected {n_factors}",
            prior_scales.n_factors()
        )));
    }
    let vp = init_variational(dataset, n_factors, train.seed)?;
    let opt = OptimizerState::new(&vp);
    fit_from(vp, opt, dataset, prior_scales, config, train)
}

/// Continues training from existing parameters and optimizer state.
pub fn fit_from(
    mut vp: VariationalParams,
    mut opt: OptimizerState,
    dataset: &MultiViewDataset,
    prior_scales: &PriorScaleMatrix,
    config: &PriorConfig,
    train: &TrainConfig,
) -> Result<FitResult> {
    let n = dataset.n_samples();
    train.validate(n)?;
    config.validate()?;
    vp.check_shapes(dataset)?;
    let b = train.effective_batch_size(n);
    let start = Instant::now();
    let mut trace = TrainTrace::default();
    let mut order: Vec<usize> = (0..n).collect();

    let mut smoothed: Option<f64> = None;
    let mut initial: Option<f64> = None;
    let mut last_check: Option<f64> = None;
    let mut stale = 0usize;

    for epoch in 0..train.max_epochs {
        if b < n {
            let mut rng = step_rng(train.seed, SHUFFLE_STREAM_SALT, opt.step / (n.div_ceil(b) as u64));
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(b) {
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let elbo = gradient_step(&mut vp, dataset, prior_scales, config, train, &batch, &mut opt)?;
            let s = match smoothed {
                None => elbo,
                Some(prev) => train.smoothing * prev + (1.0 - train.smoothing) * elbo,
            };
            smoothed = Some(s);
            let init = *initial.get_or_insert(s);
            if s < init - 10.0 * init.abs() {
                return Err(MuviError::Diverged {
                    step: opt.step as usize,
                    elbo: s,
                });
            }
            trace.push(elbo, s, start.elapsed().as_secs_f64() * 1e3);
        }
        trace.epochs = epoch + 1;

        if (epoch + 1) % train.check_every == 0 {
            let s = smoothed.expect("at least one step");
            if let Some(prev) = last_check {
                let rel = (s - prev) / prev.abs().max(f64::MIN_POSITIVE);
                if rel < train.rel_tol {
                    stale += 1;
                } else {
                    stale = 0;
                }
            }
            last_check = Some(s);
            if stale >= train.patience && epoch + 1 >= train.min_epochs {
                trace.stop_reason = Some(StopReason::Converged);
                log::info!("converged after {} epochs ({} steps)", epoch + 1, opt.step);
                return Ok(FitResult {
                    params: vp,
                    optimizer: opt,
                    trace,
                });
            }
        }
    }
    trace.stop_reason = Some(StopReason::MaxEpochs);
    Ok(FitResult {
        params: vp,
        optimizer: opt,
        trace,
    })
}

/// Serializable snapshot of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub view_names: Vec<String>,
    pub factor_names: Vec<String>,
    pub step: u64,
    pub sites: Vec<FlatSite>,
    pub adam_m: Vec<FlatSite>,
    pub adam_v: Vec<FlatSite>,
    pub x_row_steps: Vec<u64>,
}

pub const CHECKPOINT_FORMAT: &str = "muvi-checkpoint";

impl Checkpoint {
    pub fn new(vp: &VariationalParams, opt: &OptimizerState, view_names: &[String], factor_names: &[String]) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            view_names: view_names.to_vec(),
            factor_names: factor_names.to_vec(),
            step: opt.step,
            sites: vp.to_flat(view_names),
            adam_m: opt.m.to_flat(view_names),
            adam_v: opt.v.to_flat(view_names),
            x_row_steps: opt.x_row_steps.clone(),
        }
    }

    pub fn restore(&self) -> Result<(VariationalParams, OptimizerState)> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(MuviError::Format(format!("not a checkpoint: format `{}`", self.format)));
        }
        let n_views = self.view_names.len();
        let vp = VariationalParams::from_flat(&self.sites, n_views)?;
        let opt = OptimizerState {
            m: VariationalParams::from_flat(&self.adam_m, n_views)?,
            v: VariationalParams::from_flat(&self.adam_v, n_views)?,
            step: self.step,
            x_row_steps: self.x_row_steps.clone(),
        };
        if opt.x_row_steps.len() != vp.n_samples() {
            return Err(MuviError::Format("row step counters do not match X".into()));
        }
        Ok((vp, opt))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self)?;
        fs::write(path, s).map_err(|e| MuviError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| MuviError::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}
