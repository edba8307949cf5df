//! Synthetic multi-view benchmark: structured-sparse loadings with every
//! nonempty view-activity pattern, plus noisy feature sets derived from the
//! true loading support.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{load_matrix, save_matrix, FeatureSetCollection, MultiViewDataset, ViewBlock};
use crate::error::{MuviError, Result};

/// Smallest magnitude a generated nonzero loading may have.
pub const LOADING_CUTOFF: f64 = 0.1;

/// Settings for [`generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_views: usize,
    pub features_per_view: usize,
    pub n_factors: usize,
    /// Range of the per-(view, factor) fraction of zero loadings.
    pub zero_fraction: (f64, f64),
    pub noise_sd: f64,
    /// Explicit M × K activity; `None` uses every nonempty view subset.
    pub activity: Option<Vec<Vec<bool>>>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 200,
            n_views: 4,
            features_per_view: 400,
            n_factors: 15,
            zero_fraction: (0.85, 0.95),
            noise_sd: 0.25,
            activity: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Resolves and checks the activity matrix.
    pub fn activity_matrix(&self) -> Result<Array2<bool>> {
        let (m, k) = (self.n_views, self.n_factors);
        match &self.activity {
            Some(rows) => {
                if rows.len() != m || rows.iter().any(|r| r.len() != k) {
                    return Err(MuviError::InvalidArgument(format!("activity must be {m} × {k}")));
                }
                Ok(Array2::from_shape_fn((m, k), |(i, j)| rows[i][j]))
            }
            None => {
                if m == 0 || m >= usize::BITS as usize || k != (1usize << m) - 1 {
                    return Err(MuviError::InvalidArgument(format!(
                        "{m} views give {} activity patterns but {k} factors were requested; \
                         supply an explicit activity matrix",
                        if m > 0 && m < usize::BITS as usize {
                            (1usize << m) - 1
                        } else {
                            0
                        }
                    )));
                }
                Ok(all_view_subsets(m))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.zero_fraction;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(MuviError::InvalidArgument(format!(
                "zero_fraction range ({lo}, {hi}) must satisfy 0 <= lo <= hi < 1"
            )));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(MuviError::InvalidArgument(format!(
                "noise_sd must be finite and nonnegative, got {}",
                self.noise_sd
            )));
        }
        if self.n_samples == 0 || self.features_per_view == 0 || self.n_factors == 0 {
            return Err(MuviError::InvalidArgument(
                "n_samples, features_per_view and n_factors must be positive".into(),
            ));
        }
        self.activity_matrix().map(|_| ())
    }
}

/// All `2^m - 1` nonempty view subsets. Factor `k` is active in view `v` when
/// bit `m - 1 - v` of `2^m - 1 - k` is set, so factor 0 spans every view and
/// the last `m` singleton patterns sit at `2^(m-1) - 1`, ..., `2^m - 2`.
pub fn all_view_subsets(m: usize) -> Array2<bool> {
    let k = (1usize << m) - 1;
    Array2::from_shape_fn((m, k), |(v, f)| ((k - f) >> (m - 1 - v)) & 1 == 1)
}

/// Ground truth behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    pub view_names: Vec<String>,
    pub feature_names: Vec<Vec<String>>,
    /// N × K factor scores.
    pub scores: Array2<f64>,
    /// Per view, D_m × K loadings.
    pub loadings: Vec<Array2<f64>>,
    /// M × K view-factor activity.
    pub activity: Array2<bool>,
    pub noise_sd: f64,
}

impl SyntheticTruth {
    pub fn n_factors(&self) -> usize {
        self.scores.ncols()
    }

    /// Per view, D_m × K, `true` where the loading is nonzero.
    pub fn support(&self) -> Vec<Array2<bool>> {
        self.loadings.iter().map(|w| w.mapv(|v| v != 0.0)).collect()
    }

    /// Writes `truth_scores.csv`, `truth_loadings_<view>.csv`,
    /// `truth_activity.csv` and `truth_meta.json` into `dir`.
    pub fn save(&self, dir: &Path, sample_ids: &[String]) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| MuviError::io(dir, e))?;
        let factors = factor_names(self.n_factors());
        save_matrix(
            &dir.join("truth_scores.csv"),
            "sample_id",
            sample_ids,
            &factors,
            &self.scores,
        )?;
        for (m, w) in self.loadings.iter().enumerate() {
            let path = dir.join(format!("truth_loadings_{}.csv", self.view_names[m]));
            save_matrix(&path, "feature", &self.feature_names[m], &factors, w)?;
        }
        let act = self.activity.mapv(|a| if a { 1.0 } else { 0.0 });
        save_matrix(
            &dir.join("truth_activity.csv"),
            "view",
            &self.view_names,
            &factors,
            &act,
        )?;
        let meta = TruthMeta {
            view_names: self.view_names.clone(),
            noise_sd: self.noise_sd,
        };
        let path = dir.join("truth_meta.json");
        let body = serde_json::to_string_pretty(&meta)?;
        fs::write(&path, body).map_err(|e| MuviError::io(&path, e))
    }

    /// Reads the files written by [`SyntheticTruth::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("truth_meta.json");
        let body = fs::read_to_string(&path).map_err(|e| MuviError::io(&path, e))?;
        let meta: TruthMeta = serde_json::from_str(&body)?;
        let scores = load_matrix(&dir.join("truth_scores.csv"))?;
        let k = scores.values.ncols();
        let mut loadings = Vec::new();
        let mut feature_names = Vec::new();
        for v in &meta.view_names {
            let w = load_matrix(&dir.join(format!("truth_loadings_{v}.csv")))?;
            if w.values.ncols() != k {
                return Err(MuviError::Shape(format!(
                    "truth loadings for `{v}` have {} factors, scores have {k}",
                    w.values.ncols()
                )));
            }
            feature_names.push(w.row_names);
            loadings.push(w.values);
        }
        let act = load_matrix(&dir.join("truth_activity.csv"))?;
        if act.values.dim() != (meta.view_names.len(), k) {
            return Err(MuviError::Shape("truth activity has the wrong shape".into()));
        }
        Ok(Self {
            view_names: meta.view_names,
            feature_names,
            scores: scores.values,
            loadings,
            activity: act.values.mapv(|a| a != 0.0),
            noise_sd: meta.noise_sd,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TruthMeta {
    view_names: Vec<String>,
    noise_sd: f64,
}

pub fn factor_names(k: usize) -> Vec<String> {
    (0..k).map(|f| format!("factor_{f}")).collect()
}

pub fn synthetic_view_name(m: usize) -> String {
    format!("v{m}")
}

/// Draws a dataset and its ground truth.
pub fn generate(cfg: &SynthConfig) -> Result<(MultiViewDataset, SyntheticTruth)> {
    cfg.validate()?;
    let activity = cfg.activity_matrix()?;
    let (n, k, d) = (cfg.n_samples, cfg.n_factors, cfg.features_per_view);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let scores = Array2::from_shape_simple_fn((n, k), || StandardNormal.sample(&mut rng));
    let mut loadings = Vec::with_capacity(cfg.n_views);
    for m in 0..cfg.n_views {
        let mut w = Array2::<f64>::zeros((d, k));
        for f in 0..k {
            if !activity[[m, f]] {
                continue;
            }
            let zero_fraction = rng.random_range(cfg.zero_fraction.0..=cfg.zero_fraction.1);
            let n_active = (((1.0 - zero_fraction) * d as f64).round() as usize).clamp(1, d);
            for j in sample_indices(&mut rng, d, n_active) {
                w[[j, f]] = draw_above_cutoff(&mut rng);
            }
        }
        loadings.push(w);
    }

    let sample_ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
    let mut views = Vec::with_capacity(cfg.n_views);
    let mut feature_names = Vec::with_capacity(cfg.n_views);
    let mut view_names = Vec::with_capacity(cfg.n_views);
    for (m, w) in loadings.iter().enumerate() {
        let name = synthetic_view_name(m);
        let mut y = scores.dot(&w.t());
        if cfg.noise_sd > 0.0 {
            y.iter_mut().for_each(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += cfg.noise_sd * z;
            });
        }
        let feats: Vec<String> = (0..d).map(|j| format!("{name}_f{j}")).collect();
        views.push(ViewBlock::dense(name.clone(), y, feats.clone())?);
        feature_names.push(feats);
        view_names.push(name);
    }
    let dataset = MultiViewDataset::new(sample_ids, views)?;
    let truth = SyntheticTruth {
        view_names,
        feature_names,
        scores,
        loadings,
        activity,
        noise_sd: cfg.noise_sd,
    };
    Ok((dataset, truth))
}

/// A standard normal draw conditioned on `|w| >= LOADING_CUTOFF`.
fn draw_above_cutoff(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let w: f64 = StandardNormal.sample(rng);
        if w.abs() >= LOADING_CUTOFF {
            return w;
        }
    }
}

/// How the prior feature sets deviate from the true loading support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Fraction of each true set replaced by true negatives.
    pub swap_fraction: f64,
    /// Features inserted for inactive (view, factor) pairs; `None` uses the
    /// median size of the active true sets.
    pub false_positive_count_inactive: Option<usize>,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            swap_fraction: 0.0,
            false_positive_count_inactive: None,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.swap_fraction) {
            return Err(MuviError::InvalidArgument(format!(
                "swap_fraction must lie in [0, 1], got {}",
                self.swap_fraction
            )));
        }
        Ok(())
    }
}

/// Median of the active (view, factor) support sizes, ties rounded half to even.
pub fn median_active_set_size(truth: &SyntheticTruth) -> usize {
    let mut sizes: Vec<usize> = Vec::new();
    for (m, w) in truth.loadings.iter().enumerate() {
        for f in 0..w.ncols() {
            if truth.activity[[m, f]] {
                sizes.push(w.column(f).iter().filter(|&&v| v != 0.0).count());
            }
        }
    }
    if sizes.is_empty() {
        return 0;
    }
    sizes.sort_unstable();
    let h = sizes.len() / 2;
    if sizes.len() % 2 == 1 {
        sizes[h]
    } else {
        ((sizes[h - 1] + sizes[h]) as f64 / 2.0).round_ties_even() as usize
    }
}

/// Derives one feature set per factor for the listed views from the true
/// support, swapping a fraction of true positives for true negatives and
/// seeding inactive pairs with false positives. Views not listed contribute
/// no members.
pub fn perturb_feature_sets(
    truth: &SyntheticTruth,
    spec: &NoiseSpec,
    views: &[String],
) -> Result<FeatureSetCollection> {
    spec.validate()?;
    let mut informed = vec![false; truth.view_names.len()];
    for v in views {
        let m = truth
            .view_names
            .iter()
            .position(|n| n == v)
            .ok_or_else(|| MuviError::InvalidArgument(format!("view `{v}` is not part of the synthetic truth")))?;
        informed[m] = true;
    }
    let k = truth.n_factors();
    let fp_count = spec
        .false_positive_count_inactive
        .unwrap_or_else(|| median_active_set_size(truth));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut entries: Vec<BTreeMap<String, BTreeSet<String>>> = vec![BTreeMap::new(); k];

    for (m, w) in truth.loadings.iter().enumerate() {
        if !informed[m] {
            continue;
        }
        let names = &truth.feature_names[m];
        let d = w.nrows();
        for (f, entry) in entries.iter_mut().enumerate() {
            let column = w.column(f);
            let (positives, negatives): (Vec<usize>, Vec<usize>) = (0..d).partition(|&j| column[j] != 0.0);
            let chosen: Vec<usize> = if truth.activity[[m, f]] {
                let n_swap = (spec.swap_fraction * positives.len() as f64).round_ties_even() as usize;
                if n_swap > negatives.len() {
                    return Err(MuviError::InvalidArgument(format!(
                        "view `{}` factor {f}: {n_swap} swaps requested but only {} true negatives",
                        truth.view_names[m],
                        negatives.len()
                    )));
                }
                let mut drop = vec![false; positives.len()];
                for i in sample_indices(&mut rng, positives.len(), n_swap) {
                    drop[i] = true;
                }
                let mut kept: Vec<usize> = positives
                    .iter()
                    .zip(&drop)
                    .filter(|(_, &x)| !x)
                    .map(|(&j, _)| j)
                    .collect();
                kept.extend(
                    sample_indices(&mut rng, negatives.len(), n_swap)
                        .into_iter()
                        .map(|i| negatives[i]),
                );
                kept
            } else {
                if fp_count > negatives.len() {
                    return Err(MuviError::InvalidArgument(format!(
                        "view `{}` factor {f}: {fp_count} false positives exceed {} features",
                        truth.view_names[m],
                        negatives.len()
                    )));
                }
                sample_indices(&mut rng, negatives.len(), fp_count)
                    .into_iter()
                    .map(|i| negatives[i])
                    .collect()
            };
            if !chosen.is_empty() {
                entry.insert(
                    truth.view_names[m].clone(),
                    chosen.into_iter().map(|j| names[j].clone()).collect(),
                );
            }
        }
    }
    Ok(FeatureSetCollection {
        names: factor_names(k),
        descriptions: vec![format!("swap_fraction={}", spec.swap_fraction); k],
        entries,
        dropped_features: 0,
    })
}

/// Root-mean-square of `Y - X Wᵀ` over every view: the realized noise level.
pub fn residual_sd(dataset: &MultiViewDataset, truth: &SyntheticTruth) -> f64 {
    let mut ss = 0.0;
    let mut count = 0usize;
    for (v, w) in dataset.views.iter().zip(&truth.loadings) {
        let fit = truth.scores.dot(&w.t());
        ss += (&v.data - &fit).mapv(|r| r * r).sum();
        count += v.data.len();
    }
    (ss / count as f64).sqrt()
}

/// Fraction of zero entries in each loading column.
pub fn column_sparsity(w: &Array2<f64>) -> Array1<f64> {
    let d = w.nrows() as f64;
    Array1::from_iter(
        w.columns()
            .into_iter()
            .map(|c| c.iter().filter(|&&v| v == 0.0).count() as f64 / d),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_samples: 60,
            features_per_view: 80,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_activity_patterns() {
        let a = all_view_subsets(4);
        assert_eq!(a.dim(), (4, 15));
        assert!(a.column(0).iter().all(|&x| x));
        for (f, view) in [(7, 0), (11, 1), (13, 2), (14, 3)] {
            let col: Vec<bool> = a.column(f).to_vec();
            let expect: Vec<bool> = (0..4).map(|m| m == view).collect();
            assert_eq!(col, expect, "factor {f}");
        }
        let mut seen = std::collections::HashSet::new();
        for f in 0..15 {
            let col: Vec<bool> = a.column(f).to_vec();
            assert!(col.iter().any(|&x| x));
            assert!(seen.insert(col));
        }
    }

    #[test]
    fn factor_count_must_match_patterns() {
        let cfg = SynthConfig {
            n_factors: 10,
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(MuviError::InvalidArgument(_))));
        let cfg = SynthConfig {
            n_views: 2,
            n_factors: 2,
            activity: Some(vec![vec![true, false], vec![true, true]]),
            ..small()
        };
        let (_, truth) = generate(&cfg).unwrap();
        assert!(truth.loadings[0].column(1).iter().all(|&v| v == 0.0));
        let bad = SynthConfig {
            activity: Some(vec![vec![true]]),
            ..cfg
        };
        assert!(generate(&bad).is_err());
    }

    #[test]
    fn generated_loadings_obey_invariants() {
        let cfg = SynthConfig {
            features_per_view: 400,
            ..small()
        };
        let (ds, truth) = generate(&cfg).unwrap();
        assert_eq!(ds.n_views(), 4);
        assert_eq!(ds.views[0].data.dim(), (60, 400));
        for (m, w) in truth.loadings.iter().enumerate() {
            for v in w.iter().filter(|v| **v != 0.0) {
                assert!(v.abs() >= LOADING_CUTOFF);
            }
            let sp = column_sparsity(w);
            for f in 0..15 {
                if truth.activity[[m, f]] {
                    assert!((0.85..=0.95).contains(&sp[f]), "view {m} factor {f}: {}", sp[f]);
                } else {
                    assert_eq!(sp[f], 1.0);
                }
            }
        }
    }

    #[test]
    fn noise_level_is_reproduced() {
        let cfg = SynthConfig {
            n_samples: 200,
            features_per_view: 400,
            ..small()
        };
        let (ds, truth) = generate(&cfg).unwrap();
        let sd = residual_sd(&ds, &truth);
        assert!((sd / 0.25 - 1.0).abs() < 0.05, "{sd}");
    }

    #[test]
    fn seeds_are_deterministic() {
        let (a, ta) = generate(&small()).unwrap();
        let (b, tb) = generate(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (_, tc) = generate(&SynthConfig { seed: 12, ..small() }).unwrap();
        assert_ne!(ta.support(), tc.support());
    }

    #[test]
    fn no_swaps_reproduce_the_support() {
        let (_, truth) = generate(&small()).unwrap();
        let views = vec!["v0".to_string(), "v2".to_string()];
        let sets = perturb_feature_sets(&truth, &NoiseSpec::default(), &views).unwrap();
        let support = truth.support();
        for f in 0..15 {
            for (m, name) in [(0, "v0"), (2, "v2")] {
                let got = sets.members(f, name).cloned().unwrap_or_default();
                if truth.activity[[m, f]] {
                    let expect: BTreeSet<String> = (0..80)
                        .filter(|&j| support[m][[j, f]])
                        .map(|j| truth.feature_names[m][j].clone())
                        .collect();
                    assert_eq!(got, expect);
                } else {
                    assert_eq!(got.len(), median_active_set_size(&truth));
                }
            }
            assert!(sets.members(f, "v1").is_none());
            assert!(sets.members(f, "v3").is_none());
        }
    }

    #[test]
    fn full_swap_has_no_overlap_and_keeps_sizes() {
        let (_, truth) = generate(&small()).unwrap();
        let spec = NoiseSpec {
            swap_fraction: 1.0,
            false_positive_count_inactive: Some(3),
            seed: 5,
        };
        let sets = perturb_feature_sets(&truth, &spec, &["v1".to_string()]).unwrap();
        let support = &truth.support()[1];
        for f in 0..15 {
            let members = sets.members(f, "v1").unwrap();
            let truth_set: BTreeSet<&String> = (0..80)
                .filter(|&j| support[[j, f]])
                .map(|j| &truth.feature_names[1][j])
                .collect();
            if truth.activity[[1, f]] {
                assert_eq!(members.len(), truth_set.len());
                assert!(members.iter().all(|m| !truth_set.contains(m)));
            } else {
                assert_eq!(members.len(), 3);
            }
        }
    }

    #[test]
    fn half_swap_of_ten_keeps_five() {
        let mut w = Array2::zeros((30, 1));
        for j in 0..10 {
            w[[j, 0]] = 1.0;
        }
        let truth = SyntheticTruth {
            view_names: vec!["v0".into()],
            feature_names: vec![(0..30).map(|j| format!("f{j}")).collect()],
            scores: Array2::zeros((4, 1)),
            loadings: vec![w],
            activity: Array2::from_elem((1, 1), true),
            noise_sd: 0.0,
        };
        for seed in 0..20 {
            let spec = NoiseSpec {
                swap_fraction: 0.5,
                seed,
                ..NoiseSpec::default()
            };
            let sets = perturb_feature_sets(&truth, &spec, &["v0".to_string()]).unwrap();
            let members = sets.members(0, "v0").unwrap();
            assert_eq!(members.len(), 10);
            let originals = (0..10).filter(|j| members.contains(&format!("f{j}"))).count();
            assert_eq!(originals, 5);
        }
        // 0.25 × 10 = 2.5 rounds to 2
        let spec = NoiseSpec {
            swap_fraction: 0.25,
            ..NoiseSpec::default()
        };
        let sets = perturb_feature_sets(&truth, &spec, &["v0".to_string()]).unwrap();
        let members = sets.members(0, "v0").unwrap();
        assert_eq!((0..10).filter(|j| members.contains(&format!("f{j}"))).count(), 8);
    }

    #[test]
    fn swapping_needs_enough_negatives() {
        let truth = SyntheticTruth {
            view_names: vec!["v0".into()],
            feature_names: vec![(0..4).map(|j| format!("f{j}")).collect()],
            scores: Array2::zeros((2, 1)),
            loadings: vec![Array2::from_shape_vec((4, 1), vec![1.0, 1.0, 1.0, 0.0]).unwrap()],
            activity: Array2::from_elem((1, 1), true),
            noise_sd: 0.0,
        };
        let spec = NoiseSpec {
            swap_fraction: 1.0,
            ..NoiseSpec::default()
        };
        assert!(perturb_feature_sets(&truth, &spec, &["v0".to_string()]).is_err());
        assert!(perturb_feature_sets(&truth, &NoiseSpec::default(), &["nope".to_string()]).is_err());
        let bad = NoiseSpec {
            swap_fraction: 1.5,
            ..NoiseSpec::default()
        };
        assert!(perturb_feature_sets(&truth, &bad, &[]).is_err());
    }

    #[test]
    fn truth_round_trips_through_files() {
        let (ds, truth) = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        truth.save(dir.path(), &ds.sample_ids).unwrap();
        let back = SyntheticTruth::load(dir.path()).unwrap();
        assert_eq!(back, truth);
    }
}
