//! Run configuration: a JSON document with one field per command-line flag.
//! Resolution order is built-in defaults, then the config file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use muvi::{EvalOptions, NoiseSpec, PriorConfig, Scaling, SynthConfig, TrainConfig, UninformedPolicy};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

/// Seeds of the data, the prior perturbation and training derive from one
/// master seed with these salts.
pub const NOISE_SEED_SALT: u64 = 0x5eed_0001;
pub const TRAIN_SEED_SALT: u64 = 0x5eed_0002;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPreset {
    /// The library defaults.
    #[default]
    Default,
    /// Tuned for the full-size synthetic benchmark.
    Benchmark,
}

impl TrainPreset {
    pub fn config(self) -> TrainConfig {
        match self {
            TrainPreset::Default => TrainConfig::default(),
            TrainPreset::Benchmark => TrainConfig::benchmark(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSource {
    pub name: String,
    pub path: PathBuf,
}

/// Settings grid of the `benchmark` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkGrid {
    pub replicates: usize,
    pub noise_fractions: Vec<f64>,
    pub informed_view_counts: Vec<usize>,
    pub alphas: Vec<f64>,
    /// Adds the uninformed model as a baseline row.
    pub include_uninformed: bool,
}

impl Default for BenchmarkGrid {
    fn default() -> Self {
        Self {
            replicates: 5,
            noise_fractions: vec![0.1, 0.2, 0.5, 0.9, 1.0],
            informed_view_counts: vec![1, 2, 3],
            alphas: vec![0.01, 0.03, 0.05, 0.1],
            include_uninformed: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// One CSV per view; mutually exclusive with `synthetic`.
    pub views: Vec<ViewSource>,
    pub synthetic: Option<SynthConfig>,
    /// Tab-separated feature sets for real data.
    pub feature_sets: Option<PathBuf>,
    pub min_set_size: usize,
    /// Perturbation of the true sets in synthetic runs.
    pub noise: NoiseSpec,
    /// Factor count when no feature sets are given.
    pub n_factors: Option<usize>,
    pub n_dense_factors: usize,
    pub alpha_absent: f64,
    pub informed_views: Vec<String>,
    pub uninformed_policy: UninformedPolicy,
    /// Defaults to global scaling for real data and centering only for synthetic data.
    pub scaling: Option<Scaling>,
    pub missing_token: String,
    /// Master seed; overrides the data, perturbation and training seeds.
    pub seed: Option<u64>,
    pub train_preset: TrainPreset,
    pub prior: PriorConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub benchmark: BenchmarkGrid,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            views: Vec::new(),
            synthetic: None,
            feature_sets: None,
            min_set_size: 1,
            noise: NoiseSpec::default(),
            n_factors: None,
            n_dense_factors: 0,
            alpha_absent: 0.03,
            informed_views: Vec::new(),
            uninformed_policy: UninformedPolicy::Constrain,
            scaling: None,
            missing_token: "NaN".into(),
            seed: None,
            train_preset: TrainPreset::Default,
            prior: PriorConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            benchmark: BenchmarkGrid::default(),
            output: PathBuf::from("muvi-run"),
        }
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, everything else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `value` at a dotted `path` inside an object, creating parents.
pub fn set_path(root: &mut Value, path: &str, value: Value) {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return;
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
}

pub fn read_config_file(path: &Path) -> Result<Value> {
    let body = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&body).map_err(|source| CliError::ConfigFile {
        path: path.to_path_buf(),
        source,
    })
}

/// Builds the effective configuration. `defaults` adjusts the built-in
/// defaults per command before the file and the flags are applied.
pub fn resolve(file: Option<Value>, flags: Value, defaults: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let preset_of = |v: &Value| v.get("train_preset").cloned();
    let preset = preset_of(&flags)
        .or_else(|| file.as_ref().and_then(preset_of))
        .map(serde_json::from_value::<TrainPreset>)
        .transpose()
        .map_err(|e| CliError::Config(format!("train_preset: {e}")))?;

    let mut base = RunConfig::default();
    defaults(&mut base);
    // an explicit preset different from the command's replaces its training base
    if let Some(p) = preset.filter(|&p| p != base.train_preset) {
        base.train_preset = p;
        base.train = p.config();
    }

    let mut value = serde_json::to_value(&base)?;
    if let Some(f) = file {
        if !f.is_object() {
            return Err(CliError::Config("config file must hold a JSON object".into()));
        }
        merge(&mut value, f);
    }
    merge(&mut value, flags);
    let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.apply_seed();
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            if let Some(s) = self.synthetic.as_mut() {
                s.seed = seed;
            }
            self.noise.seed = seed ^ NOISE_SEED_SALT;
            self.train.seed = seed ^ TRAIN_SEED_SALT;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        match (self.views.is_empty(), self.synthetic.is_some()) {
            (true, false) => return bad("no data: give --view NAME=PATH files or --synthetic".into()),
            (false, true) => return bad("--view files and --synthetic are mutually exclusive".into()),
            _ => {}
        }
        if self.synthetic.is_some() && self.feature_sets.is_some() {
            return bad("synthetic runs derive their feature sets; drop --feature-sets".into());
        }
        if !(self.alpha_absent > 0.0 && self.alpha_absent <= 1.0) {
            return bad(format!("alpha_absent must lie in (0, 1], got {}", self.alpha_absent));
        }
        if !(0.0..=1.0).contains(&self.noise.swap_fraction) {
            return bad(format!("noise must lie in [0, 1], got {}", self.noise.swap_fraction));
        }
        if self.benchmark.replicates == 0 {
            return bad("benchmark replicates must be at least 1".into());
        }
        if let Some(k) = self.n_factors {
            if k == 0 {
                return bad("n_factors must be positive".into());
            }
        }
        Ok(())
    }

    pub fn is_synthetic(&self) -> bool {
        self.synthetic.is_some()
    }

    pub fn effective_scaling(&self) -> Scaling {
        self.scaling.unwrap_or(if self.is_synthetic() {
            Scaling::None
        } else {
            Scaling::Global
        })
    }

    pub fn view_files(&self) -> Vec<(PathBuf, String)> {
        self.views.iter().map(|v| (v.path.clone(), v.name.clone())).collect()
    }
}

/// Parses `NAME=PATH`.
pub fn parse_view(spec: &str) -> std::result::Result<ViewSource, String> {
    match spec.split_once('=') {
        Some((name, path)) if !name.trim().is_empty() && !path.trim().is_empty() => Ok(ViewSource {
            name: name.trim().to_string(),
            path: PathBuf::from(path.trim()),
        }),
        _ => Err(format!("expected NAME=PATH, got `{spec}`")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_overlays_nested_objects() {
        let mut base = json!({"a": 1, "b": {"c": 2, "d": 3}});
        merge(&mut base, json!({"b": {"c": 5}, "e": [1]}));
        assert_eq!(base, json!({"a": 1, "b": {"c": 5, "d": 3}, "e": [1]}));
    }

    #[test]
    fn set_path_creates_parents() {
        let mut v = json!({});
        set_path(&mut v, "train.learning_rate", json!(0.1));
        set_path(&mut v, "alpha_absent", json!(1.0));
        assert_eq!(v, json!({"train": {"learning_rate": 0.1}, "alpha_absent": 1.0}));
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let file = json!({"synthetic": {"n_samples": 50}, "alpha_absent": 0.05, "train": {"max_epochs": 7}});
        let flags = json!({"alpha_absent": 0.1});
        let cfg = resolve(Some(file), flags, |_| {}).unwrap();
        assert_eq!(cfg.alpha_absent, 0.1);
        assert_eq!(cfg.train.max_epochs, 7);
        assert_eq!(cfg.train.learning_rate, TrainConfig::default().learning_rate);
        assert_eq!(cfg.synthetic.unwrap().n_samples, 50);
    }

    #[test]
    fn preset_sets_the_training_base() {
        let flags = json!({"synthetic": {}, "train_preset": "benchmark", "train": {"max_epochs": 9}});
        let cfg = resolve(None, flags, |_| {}).unwrap();
        assert_eq!(cfg.train.mc_samples, TrainConfig::benchmark().mc_samples);
        assert_eq!(cfg.train.max_epochs, 9);
    }

    #[test]
    fn master_seed_drives_every_stream() {
        let cfg = resolve(None, json!({"synthetic": {}, "seed": 7}), |_| {}).unwrap();
        assert_eq!(cfg.synthetic.as_ref().unwrap().seed, 7);
        assert_eq!(cfg.noise.seed, 7 ^ NOISE_SEED_SALT);
        assert_eq!(cfg.train.seed, 7 ^ TRAIN_SEED_SALT);
    }

    #[test]
    fn invalid_configs() {
        assert!(resolve(None, json!({}), |_| {}).is_err());
        let both = json!({"synthetic": {}, "views": [{"name": "a", "path": "a.csv"}]});
        assert!(resolve(None, both, |_| {}).is_err());
        assert!(resolve(None, json!({"synthetic": {}, "alpha_absent": 0.0}), |_| {}).is_err());
        assert!(resolve(None, json!({"synthetic": {}, "bogus": 1}), |_| {}).is_err());
        assert!(matches!(
            resolve(Some(json!([1])), json!({"synthetic": {}}), |_| {}),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn scaling_defaults_depend_on_the_source() {
        let syn = resolve(None, json!({"synthetic": {}}), |_| {}).unwrap();
        assert_eq!(syn.effective_scaling(), Scaling::None);
        let real = resolve(None, json!({"views": [{"name": "a", "path": "a.csv"}]}), |_| {}).unwrap();
        assert_eq!(real.effective_scaling(), Scaling::Global);
    }

    #[test]
    fn view_specs() {
        let v = parse_view("mrna=data/m.csv").unwrap();
        assert_eq!(v.name, "mrna");
        assert_eq!(v.path, PathBuf::from("data/m.csv"));
        assert!(parse_view("nopath").is_err());
        assert!(parse_view("=x").is_err());
    }
}
