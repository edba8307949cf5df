//! Turns a resolved configuration into a standardized dataset, the optional
//! synthetic truth and the prior scales.

use std::path::PathBuf;

use muvi::synth::factor_names;
use muvi::{
    build_prior_scales, generate, load_dataset, load_feature_sets, perturb_feature_sets, standardize_with,
    FeatureSetCollection, MultiViewDataset, PriorScaleMatrix, SyntheticTruth,
};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub struct Prepared {
    pub raw: MultiViewDataset,
    pub dataset: MultiViewDataset,
    pub truth: Option<SyntheticTruth>,
    pub feature_sets: Option<FeatureSetCollection>,
    pub scales: PriorScaleMatrix,
    pub factor_names: Vec<String>,
    /// Files read, for the manifest.
    pub inputs: Vec<PathBuf>,
}

impl Prepared {
    pub fn n_factors(&self) -> usize {
        self.factor_names.len()
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let mut inputs = Vec::new();
    let (raw, truth) = match &cfg.synthetic {
        Some(s) => {
            let (raw, truth) = generate(s)?;
            (raw, Some(truth))
        }
        None => {
            let files = cfg.view_files();
            inputs.extend(files.iter().map(|(p, _)| p.clone()));
            (load_dataset(&files, &cfg.missing_token)?, None)
        }
    };
    let dataset = standardize_with(&raw, cfg.effective_scaling())?;

    let feature_sets = match (&truth, &cfg.feature_sets) {
        (Some(t), _) => Some(perturb_feature_sets(t, &cfg.noise, &cfg.informed_views)?),
        (None, Some(path)) => {
            inputs.push(path.clone());
            Some(load_feature_sets(path, &dataset, cfg.min_set_size)?)
        }
        (None, None) => None,
    };

    let (scales, factor_names) = match &feature_sets {
        Some(sets) => {
            let scales = build_prior_scales(
                sets,
                &dataset,
                cfg.alpha_absent,
                &cfg.informed_views,
                cfg.uninformed_policy,
                cfg.n_dense_factors,
            )?;
            let mut names = sets.names.clone();
            names.extend((0..cfg.n_dense_factors).map(|i| format!("dense_{i}")));
            (scales, names)
        }
        None => {
            if !cfg.informed_views.is_empty() {
                return Err(CliError::Config("informed views need a feature-set file".into()));
            }
            let k = cfg
                .n_factors
                .ok_or_else(|| CliError::Config("without feature sets, --n-factors is required".into()))?;
            (PriorScaleMatrix::ones(&dataset, k), factor_names(k))
        }
    };
    if let Some(k) = cfg.n_factors {
        if k != factor_names.len() {
            return Err(CliError::Config(format!(
                "--n-factors {k} disagrees with the {} factors implied by the feature sets",
                factor_names.len()
            )));
        }
    }
    Ok(Prepared {
        raw,
        dataset,
        truth,
        feature_sets,
        scales,
        factor_names,
        inputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::resolve;
    use serde_json::json;

    fn small() -> serde_json::Value {
        json!({"synthetic": {"n_samples": 20, "features_per_view": 12}, "seed": 3})
    }

    #[test]
    fn synthetic_preparation() {
        let mut flags = small();
        flags["informed_views"] = json!(["v0"]);
        flags["noise"] = json!({"swap_fraction": 0.2});
        let cfg = resolve(None, flags, |_| {}).unwrap();
        let p = prepare(&cfg).unwrap();
        assert_eq!(p.n_factors(), 15);
        assert_eq!(p.dataset.n_views(), 4);
        assert!(p.truth.is_some());
        // uninformed views are constrained to alpha_absent everywhere
        assert!(p.scales.views[1].iter().all(|&a| a == cfg.alpha_absent));
        assert!(p.scales.views[0].iter().any(|&a| a == 1.0));
    }

    #[test]
    fn alpha_one_ignores_feature_sets() {
        let mut flags = small();
        flags["alpha_absent"] = json!(1.0);
        let plain = prepare(&resolve(None, flags.clone(), |_| {}).unwrap()).unwrap();
        flags["informed_views"] = json!(["v0", "v1"]);
        let informed = prepare(&resolve(None, flags, |_| {}).unwrap()).unwrap();
        assert_eq!(plain.scales, informed.scales);
        assert!(plain.scales.views.iter().all(|v| v.iter().all(|&a| a == 1.0)));
    }

    #[test]
    fn real_data_without_sets_needs_k() {
        let dir = tempfile::tempdir().unwrap();
        let (raw, _) = generate(&muvi::SynthConfig {
            n_samples: 10,
            n_views: 2,
            features_per_view: 5,
            n_factors: 3,
            ..Default::default()
        })
        .unwrap();
        let files = muvi::save_dataset(&raw, dir.path()).unwrap();
        let views: Vec<_> = files.iter().map(|(p, n)| json!({"name": n, "path": p})).collect();
        let cfg = resolve(None, json!({"views": views}), |_| {}).unwrap();
        assert!(matches!(prepare(&cfg), Err(CliError::Config(_))));
        let cfg = resolve(None, json!({"views": views, "n_factors": 2}), |_| {}).unwrap();
        let p = prepare(&cfg).unwrap();
        assert_eq!(p.n_factors(), 2);
        assert_eq!(p.inputs.len(), 2);
    }
}
