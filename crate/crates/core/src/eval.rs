//! Reconstruction error, loading-support recovery, factor matching,
//! variance explained and view-factor activity calls.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::data::MultiViewDataset;
use crate::error::{MuviError, Result};
use crate::synth::SyntheticTruth;
use crate::variational::VariationalParams;

pub const DEFAULT_THRESHOLD: f64 = 0.1;
pub const DEFAULT_DELTA_THRESHOLD: f64 = 0.01;
pub const DEFAULT_R2_THRESHOLD: f64 = 0.005;

/// Point estimates of the factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorEstimate {
    /// N × K.
    pub scores: Array2<f64>,
    /// Per view, D_m × K.
    pub loadings: Vec<Array2<f64>>,
    /// M × K view-factor scales.
    pub factor_scales: Array2<f64>,
}

impl FactorEstimate {
    /// Variational means for the real sites, medians for the scales.
    pub fn from_variational(vp: &VariationalParams) -> Self {
        Self {
            scores: vp.x.loc.clone(),
            loadings: vp.loadings(),
            factor_scales: vp.factor_scales(),
        }
    }

    pub fn n_factors(&self) -> usize {
        self.scores.ncols()
    }

    fn check(&self, dataset: &MultiViewDataset) -> Result<()> {
        let k = self.n_factors();
        if self.scores.nrows() != dataset.n_samples() {
            return Err(MuviError::Shape(format!(
                "{} score rows for {} samples",
                self.scores.nrows(),
                dataset.n_samples()
            )));
        }
        if self.loadings.len() != dataset.n_views() {
            return Err(MuviError::Shape(format!(
                "{} loading blocks for {} views",
                self.loadings.len(),
                dataset.n_views()
            )));
        }
        for (w, v) in self.loadings.iter().zip(&dataset.views) {
            if w.dim() != (v.n_features(), k) {
                return Err(MuviError::Shape(format!(
                    "view {}: loadings {:?}, expected ({}, {k})",
                    v.name,
                    w.dim(),
                    v.n_features()
                )));
            }
        }
        if self.factor_scales.dim() != (dataset.n_views(), k) {
            return Err(MuviError::Shape(format!(
                "factor scales {:?}, expected ({}, {k})",
                self.factor_scales.dim(),
                dataset.n_views()
            )));
        }
        Ok(())
    }
}

/// Per-view root-mean-square reconstruction error over observed entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rmse {
    pub per_view: Vec<f64>,
    /// Unweighted average of `per_view`.
    pub mean: f64,
    /// Over all observed entries of all views.
    pub pooled: f64,
}

pub fn rmse(dataset: &MultiViewDataset, scores: &Array2<f64>, loadings: &[Array2<f64>]) -> Result<Rmse> {
    if loadings.len() != dataset.n_views() {
        return Err(MuviError::Shape(format!(
            "{} loading blocks for {} views",
            loadings.len(),
            dataset.n_views()
        )));
    }
    let mut per_view = Vec::with_capacity(dataset.n_views());
    let (mut ss_all, mut n_all) = (0.0, 0usize);
    for (v, w) in dataset.views.iter().zip(loadings) {
        if scores.nrows() != v.data.nrows() || w.nrows() != v.n_features() || w.ncols() != scores.ncols() {
            return Err(MuviError::Shape(format!(
                "view {}: scores {:?} and loadings {:?} do not fit data {:?}",
                v.name,
                scores.dim(),
                w.dim(),
                v.data.dim()
            )));
        }
        let fit = scores.dot(&w.t());
        let mut ss = 0.0;
        let mut n = 0usize;
        ndarray::Zip::from(&v.data)
            .and(&fit)
            .and(&v.mask)
            .for_each(|&y, &f, &m| {
                if m {
                    ss += (y - f) * (y - f);
                    n += 1;
                }
            });
        if n == 0 {
            return Err(MuviError::InvalidArgument(format!(
                "view {} has no observed entries",
                v.name
            )));
        }
        per_view.push((ss / n as f64).sqrt());
        ss_all += ss;
        n_all += n;
    }
    let mean = per_view.iter().sum::<f64>() / per_view.len().max(1) as f64;
    Ok(Rmse {
        per_view,
        mean,
        pooled: if n_all > 0 { (ss_all / n_all as f64).sqrt() } else { 0.0 },
    })
}

/// `|w| >= threshold` marks a loading active.
pub fn binarize_loadings(loadings: &[Array2<f64>], threshold: f64) -> Result<Vec<Array2<bool>>> {
    if !(threshold > 0.0) {
        return Err(MuviError::InvalidArgument(format!(
            "threshold must be positive, got {threshold}"
        )));
    }
    Ok(loadings.iter().map(|w| w.mapv(|v| v.abs() >= threshold)).collect())
}

/// Precision, recall and F1 of a binary prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    /// 1 when nothing is predicted.
    pub precision: f64,
    /// 1 when nothing is truly active.
    pub recall: f64,
    pub f1: f64,
    pub no_predictions: bool,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            1.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            no_predictions: tp + fp == 0,
        }
    }

    /// Componentwise average; `no_predictions` if any input had none.
    pub fn mean(items: &[Prf]) -> Prf {
        let n = items.len().max(1) as f64;
        Prf {
            precision: items.iter().map(|p| p.precision).sum::<f64>() / n,
            recall: items.iter().map(|p| p.recall).sum::<f64>() / n,
            f1: items.iter().map(|p| p.f1).sum::<f64>() / n,
            no_predictions: items.iter().any(|p| p.no_predictions),
        }
    }
}

fn confusion<'a>(pairs: impl Iterator<Item = (&'a bool, &'a bool)>) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&h, &t) in pairs {
        match (h, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    (tp, fp, fn_)
}

pub fn precision_recall_f1(mask_hat: ArrayView2<bool>, mask_true: ArrayView2<bool>) -> Result<Prf> {
    if mask_hat.dim() != mask_true.dim() {
        return Err(MuviError::Shape(format!(
            "predicted mask {:?} vs true mask {:?}",
            mask_hat.dim(),
            mask_true.dim()
        )));
    }
    let (tp, fp, fn_) = confusion(mask_hat.iter().zip(mask_true.iter()));
    Ok(Prf::from_counts(tp, fp, fn_))
}

/// One point of a precision-recall sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Sweeps `|w| >= t` over `thresholds`, pooling every cell of every view.
pub fn pr_curve(loadings: &[Array2<f64>], mask_true: &[Array2<bool>], thresholds: &[f64]) -> Result<Vec<PrPoint>> {
    if thresholds.is_empty() {
        return Err(MuviError::InvalidArgument("threshold grid is empty".into()));
    }
    if loadings.len() != mask_true.len() || loadings.iter().zip(mask_true).any(|(w, m)| w.dim() != m.dim()) {
        return Err(MuviError::Shape("loadings and true masks differ in shape".into()));
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (w, m) in loadings.iter().zip(mask_true) {
                for (&v, &truth) in w.iter().zip(m.iter()) {
                    match (v.abs() >= t, truth) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        (false, false) => {}
                    }
                }
            }
            let p = Prf::from_counts(tp, fp, fn_);
            PrPoint {
                threshold: t,
                precision: p.precision,
                recall: p.recall,
            }
        })
        .collect())
}

/// `n` thresholds evenly spaced on `[0, max]`.
pub fn threshold_grid(max: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| max * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Pairing score between an estimated and a true factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchCriterion {
    /// F1 of the binarized loading columns, all views concatenated.
    #[default]
    F1,
    /// Absolute cosine similarity of the concatenated loading columns.
    AbsCosine,
}

/// `permutation[t]` is the estimated factor assigned to true factor `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorMatching {
    pub permutation: Vec<usize>,
    /// ±1 aligning each assigned estimate with its true factor.
    pub signs: Vec<f64>,
    /// Criterion value of each assigned pair.
    pub scores: Vec<f64>,
}

impl FactorMatching {
    pub fn identity(k: usize) -> Self {
        Self {
            permutation: (0..k).collect(),
            signs: vec![1.0; k],
            scores: vec![0.0; k],
        }
    }

    /// Reorders and sign-flips columns so column `t` holds the match of true factor `t`.
    pub fn apply(&self, m: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn((m.nrows(), self.permutation.len()), |(i, t)| {
            self.signs[t] * m[[i, self.permutation[t]]]
        })
    }

    /// Column reordering without sign changes.
    pub fn apply_unsigned<T: Clone>(&self, m: &Array2<T>) -> Array2<T> {
        Array2::from_shape_fn((m.nrows(), self.permutation.len()), |(i, t)| {
            m[[i, self.permutation[t]]].clone()
        })
    }
}

/// K_true × K_hat matrix of pairing scores.
pub fn match_scores(
    loadings_hat: &[Array2<f64>],
    loadings_true: &[Array2<f64>],
    criterion: MatchCriterion,
    threshold: f64,
) -> Result<Array2<f64>> {
    if loadings_hat.len() != loadings_true.len() {
        return Err(MuviError::Shape(format!(
            "{} estimated vs {} true loading blocks",
            loadings_hat.len(),
            loadings_true.len()
        )));
    }
    let k_hat = loadings_hat.first().map_or(0, |w| w.ncols());
    let k_true = loadings_true.first().map_or(0, |w| w.ncols());
    for (h, t) in loadings_hat.iter().zip(loadings_true) {
        if h.nrows() != t.nrows() || h.ncols() != k_hat || t.ncols() != k_true {
            return Err(MuviError::Shape(format!(
                "loading blocks {:?} vs {:?}",
                h.dim(),
                t.dim()
            )));
        }
    }
    let hat = concat_rows(loadings_hat);
    let truth = concat_rows(loadings_true);
    Ok(match criterion {
        MatchCriterion::F1 => {
            if !(threshold > 0.0) {
                return Err(MuviError::InvalidArgument(format!(
                    "threshold must be positive, got {threshold}"
                )));
            }
            let hb = hat.mapv(|v| v.abs() >= threshold);
            let tb = truth.mapv(|v| v != 0.0);
            Array2::from_shape_fn((k_true, k_hat), |(t, e)| {
                let (tp, fp, fn_) = confusion(hb.column(e).iter().zip(tb.column(t).iter()));
                Prf::from_counts(tp, fp, fn_).f1
            })
        }
        MatchCriterion::AbsCosine => {
            let hn: Vec<f64> = hat.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect();
            let tn: Vec<f64> = truth.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect();
            Array2::from_shape_fn((k_true, k_hat), |(t, e)| {
                let den = hn[e] * tn[t];
                if den > 0.0 {
                    (hat.column(e).dot(&truth.column(t)) / den).abs()
                } else {
                    0.0
                }
            })
        }
    })
}

fn concat_rows(blocks: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    ndarray::concatenate(Axis(0), &views).unwrap_or_else(|_| Array2::zeros((0, 0)))
}

/// Assigns estimated factors to true factors maximizing the summed criterion.
pub fn match_factors(
    loadings_hat: &[Array2<f64>],
    loadings_true: &[Array2<f64>],
    criterion: MatchCriterion,
    threshold: f64,
) -> Result<FactorMatching> {
    let scores = match_scores(loadings_hat, loadings_true, criterion, threshold)?;
    if scores.nrows() != scores.ncols() {
        return Err(MuviError::InvalidArgument(format!(
            "estimate has {} factors, truth has {}",
            scores.ncols(),
            scores.nrows()
        )));
    }
    let permutation = assignment::maximize(&scores)?;
    let hat = concat_rows(loadings_hat);
    let truth = concat_rows(loadings_true);
    let signs = permutation
        .iter()
        .enumerate()
        .map(|(t, &e)| {
            if hat.column(e).dot(&truth.column(t)) < 0.0 {
                -1.0
            } else {
                1.0
            }
        })
        .collect();
    let pair_scores = permutation.iter().enumerate().map(|(t, &e)| scores[[t, e]]).collect();
    Ok(FactorMatching {
        permutation,
        signs,
        scores: pair_scores,
    })
}

/// Denominator convention for [`variance_explained`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum R2Convention {
    /// One ratio over all observed entries of the view.
    #[default]
    Pooled,
    /// Mean of per-feature ratios.
    PerFeature,
}

/// M × K fraction of each centered view explained by each factor alone,
/// clamped below at zero.
pub fn variance_explained(
    dataset: &MultiViewDataset,
    scores: &Array2<f64>,
    loadings: &[Array2<f64>],
    convention: R2Convention,
) -> Result<Array2<f64>> {
    let k = scores.ncols();
    if loadings.len() != dataset.n_views() {
        return Err(MuviError::Shape(format!(
            "{} loading blocks for {} views",
            loadings.len(),
            dataset.n_views()
        )));
    }
    let mut out = Array2::zeros((dataset.n_views(), k));
    for (m, (v, w)) in dataset.views.iter().zip(loadings).enumerate() {
        if scores.nrows() != v.data.nrows() || w.dim() != (v.n_features(), k) {
            return Err(MuviError::Shape(format!(
                "view {}: estimate does not fit the data",
                v.name
            )));
        }
        let centered = centered_observed(v.data.view(), v.mask.view());
        let tot_per_feature: Vec<f64> = (0..v.n_features())
            .map(|j| {
                centered
                    .column(j)
                    .iter()
                    .zip(v.mask.column(j))
                    .filter(|(_, &o)| o)
                    .map(|(y, _)| y * y)
                    .sum()
            })
            .collect();
        let tot: f64 = tot_per_feature.iter().sum();
        if !(tot > 0.0) {
            return Err(MuviError::InvalidArgument(format!(
                "view {} has zero total variance",
                v.name
            )));
        }
        for f in 0..k {
            let x = scores.column(f);
            let wf = w.column(f);
            let mut res_per_feature = vec![0.0; v.n_features()];
            for (j, res) in res_per_feature.iter_mut().enumerate() {
                let wj = wf[j];
                for i in 0..v.data.nrows() {
                    if v.mask[[i, j]] {
                        let r = centered[[i, j]] - x[i] * wj;
                        *res += r * r;
                    }
                }
            }
            let r2 = match convention {
                R2Convention::Pooled => 1.0 - res_per_feature.iter().sum::<f64>() / tot,
                R2Convention::PerFeature => {
                    let vals: Vec<f64> = res_per_feature
                        .iter()
                        .zip(&tot_per_feature)
                        .filter(|(_, &t)| t > 0.0)
                        .map(|(r, t)| 1.0 - r / t)
                        .collect();
                    vals.iter().sum::<f64>() / vals.len() as f64
                }
            };
            out[[m, f]] = r2.max(0.0);
        }
    }
    Ok(out)
}

fn centered_observed(data: ArrayView2<f64>, mask: ArrayView2<bool>) -> Array2<f64> {
    let mut out = data.to_owned();
    for (mut col, mcol) in out.columns_mut().into_iter().zip(mask.columns()) {
        let (s, n) = col
            .iter()
            .zip(mcol)
            .filter(|(_, &o)| o)
            .fold((0.0, 0usize), |(s, n), (y, _)| (s + y, n + 1));
        if n > 0 {
            let mu = s / n as f64;
            col.iter_mut().zip(mcol).for_each(|(y, &o)| {
                if o {
                    *y -= mu;
                }
            });
        }
    }
    out
}

/// A factor is active in a view when both its scale and its R² exceed the thresholds.
pub fn activity_calls(
    factor_scales: &Array2<f64>,
    r2: &Array2<f64>,
    delta_threshold: f64,
    r2_threshold: f64,
) -> Result<Array2<bool>> {
    if !(delta_threshold >= 0.0 && r2_threshold >= 0.0) {
        return Err(MuviError::InvalidArgument(
            "activity thresholds must be nonnegative".into(),
        ));
    }
    if factor_scales.dim() != r2.dim() {
        return Err(MuviError::Shape(format!(
            "factor scales {:?} vs R² {:?}",
            factor_scales.dim(),
            r2.dim()
        )));
    }
    Ok(ndarray::Zip::from(factor_scales)
        .and(r2)
        .map_collect(|&d, &r| d > delta_threshold && r > r2_threshold))
}

/// Settings for [`evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub threshold: f64,
    pub criterion: MatchCriterion,
    pub r2_convention: R2Convention,
    pub delta_threshold: f64,
    pub r2_threshold: f64,
    /// Thresholds for a precision-recall sweep; `None` skips it.
    pub pr_thresholds: Option<Vec<f64>>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            criterion: MatchCriterion::F1,
            r2_convention: R2Convention::Pooled,
            delta_threshold: DEFAULT_DELTA_THRESHOLD,
            r2_threshold: DEFAULT_R2_THRESHOLD,
            pr_thresholds: None,
        }
    }
}

/// Support recovery against a known truth, before and after matching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub matching: FactorMatching,
    pub unmatched: Vec<Prf>,
    pub matched: Vec<Prf>,
    pub unmatched_mean: Prf,
    pub matched_mean: Prf,
    /// Fraction of (view, factor) cells where the activity calls equal the truth.
    pub activity_agreement_unmatched: f64,
    pub activity_agreement_matched: f64,
    /// Pooled over views, after matching.
    pub pr_curve: Option<Vec<PrPoint>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub view_names: Vec<String>,
    pub n_factors: usize,
    pub rmse: Rmse,
    /// M × K.
    pub variance_explained: Vec<Vec<f64>>,
    /// M × K.
    pub activity: Vec<Vec<bool>>,
    pub recovery: Option<Recovery>,
}

/// Scores an estimate on `dataset`, and against `truth` when given.
pub fn evaluate(
    dataset: &MultiViewDataset,
    estimate: &FactorEstimate,
    truth: Option<&SyntheticTruth>,
    opts: &EvalOptions,
) -> Result<EvaluationReport> {
    estimate.check(dataset)?;
    let k = estimate.n_factors();
    let rmse = rmse(dataset, &estimate.scores, &estimate.loadings)?;
    let r2 = variance_explained(dataset, &estimate.scores, &estimate.loadings, opts.r2_convention)?;
    let activity = activity_calls(&estimate.factor_scales, &r2, opts.delta_threshold, opts.r2_threshold)?;

    let recovery = match truth {
        None => None,
        Some(truth) => {
            if truth.view_names != dataset.view_names() {
                return Err(MuviError::InvalidArgument(format!(
                    "truth views {:?} differ from dataset views {:?}",
                    truth.view_names,
                    dataset.view_names()
                )));
            }
            if truth.n_factors() != k {
                return Err(MuviError::InvalidArgument(format!(
                    "estimate has {k} factors, truth has {}",
                    truth.n_factors()
                )));
            }
            let support = truth.support();
            let hat_masks = binarize_loadings(&estimate.loadings, opts.threshold)?;
            let matching = match_factors(&estimate.loadings, &truth.loadings, opts.criterion, opts.threshold)?;
            let mut unmatched = Vec::with_capacity(dataset.n_views());
            let mut matched = Vec::with_capacity(dataset.n_views());
            for (h, t) in hat_masks.iter().zip(&support) {
                unmatched.push(precision_recall_f1(h.view(), t.view())?);
                matched.push(precision_recall_f1(matching.apply_unsigned(h).view(), t.view())?);
            }
            let agree = |calls: &Array2<bool>| {
                let same = calls.iter().zip(truth.activity.iter()).filter(|(a, b)| a == b).count();
                same as f64 / calls.len().max(1) as f64
            };
            let pr = match &opts.pr_thresholds {
                Some(grid) => {
                    let aligned: Vec<Array2<f64>> = estimate.loadings.iter().map(|w| matching.apply(w)).collect();
                    Some(pr_curve(&aligned, &support, grid)?)
                }
                None => None,
            };
            Some(Recovery {
                unmatched_mean: Prf::mean(&unmatched),
                matched_mean: Prf::mean(&matched),
                activity_agreement_unmatched: agree(&activity),
                activity_agreement_matched: agree(&matching.apply_unsigned(&activity)),
                matching,
                unmatched,
                matched,
                pr_curve: pr,
            })
        }
    };

    Ok(EvaluationReport {
        view_names: dataset.view_names(),
        n_factors: k,
        rmse,
        variance_explained: r2.rows().into_iter().map(|r| r.to_vec()).collect(),
        activity: activity.rows().into_iter().map(|r| r.to_vec()).collect(),
        recovery,
    })
}

impl EvaluationReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        fs::write(path, body).map_err(|e| MuviError::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| MuviError::io(path, e))?;
        Ok(serde_json::from_str(&body)?)
    }

    /// Per-view metric table: `view,stage,rmse,precision,recall,f1`, one row
    /// per view and stage plus a `mean` row per stage.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| MuviError::csv(path, e))?;
        w.write_record(["view", "stage", "rmse", "precision", "recall", "f1"])
            .map_err(|e| MuviError::csv(path, e))?;
        let mut row = |view: &str, stage: &str, rmse: f64, p: Option<&Prf>| -> Result<()> {
            let fmt = |x: Option<f64>| x.map(|v| format!("{v}")).unwrap_or_default();
            w.write_record([
                view.to_string(),
                stage.to_string(),
                format!("{rmse}"),
                fmt(p.map(|p| p.precision)),
                fmt(p.map(|p| p.recall)),
                fmt(p.map(|p| p.f1)),
            ])
            .map_err(|e| MuviError::csv(path, e))
        };
        match &self.recovery {
            Some(rec) => {
                for (stage, per_view, mean) in [
                    ("unmatched", &rec.unmatched, &rec.unmatched_mean),
                    ("matched", &rec.matched, &rec.matched_mean),
                ] {
                    for (m, name) in self.view_names.iter().enumerate() {
                        row(name, stage, self.rmse.per_view[m], Some(&per_view[m]))?;
                    }
                    row("mean", stage, self.rmse.mean, Some(mean))?;
                }
            }
            None => {
                for (m, name) in self.view_names.iter().enumerate() {
                    row(name, "reconstruction", self.rmse.per_view[m], None)?;
                }
                row("mean", "reconstruction", self.rmse.mean, None)?;
            }
        }
        w.flush().map_err(|e| MuviError::io(path, e))
    }

    /// Writes `threshold,precision,recall` rows when a sweep was computed.
    pub fn save_pr_curve(&self, path: &Path) -> Result<bool> {
        let Some(points) = self.recovery.as_ref().and_then(|r| r.pr_curve.as_ref()) else {
            return Ok(false);
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| MuviError::csv(path, e))?;
        w.write_record(["threshold", "precision", "recall"])
            .map_err(|e| MuviError::csv(path, e))?;
        for p in points {
            w.write_record([p.threshold.to_string(), p.precision.to_string(), p.recall.to_string()])
                .map_err(|e| MuviError::csv(path, e))?;
        }
        w.flush().map_err(|e| MuviError::io(path, e))?;
        Ok(true)
    }
}
