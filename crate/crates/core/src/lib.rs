//! Multi-view factor analysis with a feature-set-informed regularized
//! horseshoe prior, fitted by stochastic variational inference.

// `!(x > 0.0)` deliberately rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod inference;
pub mod model;
pub mod priors;
pub mod synth;
pub mod variational;

pub use data::{
    build_prior_scales, load_dataset, load_feature_sets, load_matrix, save_dataset, save_feature_sets, save_matrix,
    standardize, standardize_with, FeatureSetCollection, LabeledMatrix, MultiViewDataset, PriorScaleMatrix, Scaling,
    UninformedPolicy, ViewBlock,
};
pub use error::{MuviError, Result};
pub use eval::{
    activity_calls, binarize_loadings, evaluate, match_factors, pr_curve, precision_recall_f1, rmse,
    variance_explained, EvalOptions, EvaluationReport, FactorEstimate, FactorMatching, MatchCriterion, Prf,
    R2Convention,
};
pub use experiment::{run_replicates, run_synthetic, Aggregate, MeanSd, ReplicateSummary, RunOutcome, SyntheticRun};
pub use inference::{fit, fit_from, Checkpoint, FitResult, OptimizerState, StopReason, TrainConfig, TrainTrace};
pub use model::{log_joint, log_likelihood, log_prior, ModelParams, ViewParams};
pub use priors::{PriorConfig, SlabScaling};
pub use synth::{generate, perturb_feature_sets, NoiseSpec, SynthConfig, SyntheticTruth};
pub use variational::{init_variational, Noise, SampleState, VariationalParams};
