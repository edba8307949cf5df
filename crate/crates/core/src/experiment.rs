//! End-to-end synthetic runs: generate, perturb the prior, train, evaluate,
//! and aggregate replicates over a grid of settings.

use serde::{Deserialize, Serialize};

use crate::data::{build_prior_scales, standardize_with, FeatureSetCollection, Scaling, UninformedPolicy};
use crate::error::{MuviError, Result};
use crate::eval::{evaluate, EvalOptions, EvaluationReport, FactorEstimate};
use crate::inference::{fit, FitResult, StopReason, TrainConfig};
use crate::priors::PriorConfig;
use crate::synth::{generate, perturb_feature_sets, NoiseSpec, SynthConfig};

/// One synthetic training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticRun {
    pub synth: SynthConfig,
    pub noise: NoiseSpec,
    /// Views whose feature sets inform the prior; empty trains the uninformed model.
    pub informed_views: Vec<String>,
    pub alpha_absent: f64,
    pub uninformed_policy: UninformedPolicy,
    /// Centering only by default so loadings stay on the generating scale.
    pub scaling: Scaling,
    pub prior: PriorConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for SyntheticRun {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            noise: NoiseSpec::default(),
            informed_views: Vec::new(),
            alpha_absent: 1.0,
            uninformed_policy: UninformedPolicy::Constrain,
            scaling: Scaling::None,
            prior: PriorConfig::default(),
            train: TrainConfig::benchmark(),
            eval: EvalOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub feature_sets: FeatureSetCollection,
    pub fit: FitResult,
    pub report: EvaluationReport,
}

/// Generates the data, derives the prior, trains and evaluates.
pub fn run_synthetic(run: &SyntheticRun) -> Result<RunOutcome> {
    let (raw, truth) = generate(&run.synth)?;
    let dataset = standardize_with(&raw, run.scaling)?;
    let k = truth.n_factors();
    let feature_sets = perturb_feature_sets(&truth, &run.noise, &run.informed_views)?;
    let scales = build_prior_scales(
        &feature_sets,
        &dataset,
        run.alpha_absent,
        &run.informed_views,
        run.uninformed_policy,
        0,
    )?;
    let fit = fit(&dataset, &scales, k, &run.prior, &run.train)?;
    let estimate = FactorEstimate::from_variational(&fit.params);
    let report = evaluate(&dataset, &estimate, Some(&truth), &run.eval)?;
    Ok(RunOutcome {
        feature_sets,
        fit,
        report,
    })
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for one value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                sd: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

/// Headline numbers of one replicate, split by informed and uninformed views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub replicate: usize,
    pub rmse: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f1_unmatched: f64,
    /// Matched F1 averaged over the informed views; NaN when there are none.
    pub f1_informed: f64,
    pub f1_informed_unmatched: f64,
    pub f1_uninformed: f64,
    pub activity_agreement: f64,
    /// Matched and unmatched F1 of each view, in dataset order.
    pub f1_views: Vec<f64>,
    pub f1_views_unmatched: Vec<f64>,
    pub epochs: usize,
    pub converged: bool,
    pub elapsed_ms: f64,
}

fn mean_over(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl ReplicateSummary {
    pub fn from_outcome(replicate: usize, informed_views: &[String], outcome: &RunOutcome) -> Result<Self> {
        let report = &outcome.report;
        let rec = report
            .recovery
            .as_ref()
            .ok_or_else(|| MuviError::InvalidArgument("report has no recovery section".into()))?;
        let is_informed: Vec<bool> = report.view_names.iter().map(|v| informed_views.contains(v)).collect();
        let pick = |values: &[crate::eval::Prf], informed: bool| {
            mean_over(
                values
                    .iter()
                    .zip(&is_informed)
                    .filter(|(_, &i)| i == informed)
                    .map(|(p, _)| p.f1),
            )
        };
        Ok(Self {
            replicate,
            rmse: report.rmse.mean,
            precision: rec.matched_mean.precision,
            recall: rec.matched_mean.recall,
            f1: rec.matched_mean.f1,
            f1_unmatched: rec.unmatched_mean.f1,
            f1_informed: pick(&rec.matched, true),
            f1_informed_unmatched: pick(&rec.unmatched, true),
            f1_uninformed: pick(&rec.matched, false),
            activity_agreement: rec.activity_agreement_matched,
            f1_views: rec.matched.iter().map(|p| p.f1).collect(),
            f1_views_unmatched: rec.unmatched.iter().map(|p| p.f1).collect(),
            epochs: outcome.fit.trace.epochs,
            converged: outcome.fit.trace.stop_reason == Some(StopReason::Converged),
            elapsed_ms: outcome.fit.trace.elapsed_ms.last().copied().unwrap_or(0.0),
        })
    }
}

/// Replicate `r` of `base`: the data, prior noise and training seeds are all
/// derived from `base_seed + r`.
pub fn replicate_run(base: &SyntheticRun, base_seed: u64, r: usize) -> SyntheticRun {
    let seed = base_seed.wrapping_add(r as u64);
    let mut run = base.clone();
    run.synth.seed = seed;
    run.noise.seed = seed ^ 0x5eed_0001;
    run.train.seed = seed ^ 0x5eed_0002;
    run
}

/// Runs `replicates` independent copies of `base`, in parallel when a rayon
/// pool is available. Results are in replicate order.
pub fn run_replicates(base: &SyntheticRun, base_seed: u64, replicates: usize) -> Result<Vec<ReplicateSummary>> {
    use rayon::prelude::*;
    if replicates == 0 {
        return Err(MuviError::InvalidArgument("replicate count must be at least 1".into()));
    }
    (0..replicates)
        .into_par_iter()
        .map(|r| {
            let run = replicate_run(base, base_seed, r);
            let outcome = run_synthetic(&run)?;
            ReplicateSummary::from_outcome(r, &run.informed_views, &outcome)
        })
        .collect()
}

/// Mean ± sd of each headline number over replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub replicates: usize,
    pub rmse: MeanSd,
    pub precision: MeanSd,
    pub recall: MeanSd,
    pub f1: MeanSd,
    pub f1_unmatched: MeanSd,
    pub f1_informed: MeanSd,
    pub f1_informed_unmatched: MeanSd,
    pub f1_uninformed: MeanSd,
    pub activity_agreement: MeanSd,
}

impl Aggregate {
    pub fn of(rows: &[ReplicateSummary]) -> Self {
        let col = |f: fn(&ReplicateSummary) -> f64| MeanSd::of(&rows.iter().map(f).collect::<Vec<_>>());
        Self {
            replicates: rows.len(),
            rmse: col(|r| r.rmse),
            precision: col(|r| r.precision),
            recall: col(|r| r.recall),
            f1: col(|r| r.f1),
            f1_unmatched: col(|r| r.f1_unmatched),
            f1_informed: col(|r| r.f1_informed),
            f1_informed_unmatched: col(|r| r.f1_informed_unmatched),
            f1_uninformed: col(|r| r.f1_uninformed),
            activity_agreement: col(|r| r.activity_agreement),
        }
    }
}

/// First `n` synthetic view names.
pub fn first_views(n: usize) -> Vec<String> {
    (0..n).map(crate::synth::synthetic_view_name).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_sd() {
        let m = MeanSd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.sd - 1.0).abs() < 1e-15);
        assert_eq!(MeanSd::of(&[4.0]).sd, 0.0);
        assert!(MeanSd::of(&[]).mean.is_nan());
    }

    #[test]
    fn replicate_seeds_differ() {
        let base = SyntheticRun::default();
        let a = replicate_run(&base, 10, 0);
        let b = replicate_run(&base, 10, 1);
        assert_ne!(a.synth.seed, b.synth.seed);
        assert_ne!(a.train.seed, b.train.seed);
        assert_eq!(a.synth.n_samples, b.synth.n_samples);
    }

    #[test]
    fn tiny_run_end_to_end() {
        let run = SyntheticRun {
            synth: SynthConfig {
                n_samples: 30,
                features_per_view: 20,
                seed: 1,
                ..SynthConfig::default()
            },
            informed_views: first_views(2),
            alpha_absent: 0.03,
            noise: NoiseSpec {
                swap_fraction: 0.1,
                ..NoiseSpec::default()
            },
            train: TrainConfig {
                max_epochs: 20,
                min_epochs: 0,
                ..TrainConfig::benchmark()
            },
            ..SyntheticRun::default()
        };
        let out = run_synthetic(&run).unwrap();
        let s = ReplicateSummary::from_outcome(0, &run.informed_views, &out).unwrap();
        assert!(s.f1 >= 0.0 && s.f1 <= 1.0);
        assert!(!s.f1_informed.is_nan() && !s.f1_uninformed.is_nan());
        assert_eq!(out.fit.trace.epochs, 20);
    }
}
