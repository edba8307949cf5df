//! Multi-view datasets, feature-set collections, prior-scale construction and
//! the on-disk formats for all of them.
//!
//! Dataset files are comma-separated with a `sample_id` first column and a
//! header of feature names. Feature-set files use the tab-separated gene-set
//! layout: `name<TAB>description<TAB>member<TAB>member...`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{MuviError, Result};

/// Missing-value token accepted in addition to the empty cell.
pub const DEFAULT_MISSING_TOKEN: &str = "NaN";

/// Default auxiliary constant for loadings outside the prior feature sets.
pub const DEFAULT_ALPHA_ABSENT: f64 = 0.03;

/// One group of features observed on the shared samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBlock {
    pub name: String,
    /// N × D_m; masked-out entries hold 0.0 and are never read.
    pub data: Array2<f64>,
    /// N × D_m, `true` where observed.
    pub mask: Array2<bool>,
    pub feature_names: Vec<String>,
}

impl ViewBlock {
    pub fn new(
        name: impl Into<String>,
        mut data: Array2<f64>,
        mask: Array2<bool>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let name = name.into();
        if data.dim() != mask.dim() {
            return Err(MuviError::Shape(format!(
                "view {name}: data {:?} vs mask {:?}",
                data.dim(),
                mask.dim()
            )));
        }
        if feature_names.len() != data.ncols() {
            return Err(MuviError::Shape(format!(
                "view {name}: {} feature names for {} columns",
                feature_names.len(),
                data.ncols()
            )));
        }
        let mut seen = HashSet::with_capacity(feature_names.len());
        for f in &feature_names {
            if !seen.insert(f.as_str()) {
                return Err(MuviError::Format(format!("view {name}: duplicate feature name `{f}`")));
            }
        }
        ndarray::Zip::from(&mut data).and(&mask).for_each(|d, &m| {
            if !m {
                *d = 0.0;
            }
        });
        for (&d, &m) in data.iter().zip(mask.iter()) {
            if m && !d.is_finite() {
                return Err(MuviError::Format(format!("view {name}: observed entry is not finite")));
            }
        }
        Ok(Self {
            name,
            data,
            mask,
            feature_names,
        })
    }

    /// A fully observed view.
    pub fn dense(name: impl Into<String>, data: Array2<f64>, feature_names: Vec<String>) -> Result<Self> {
        let mask = Array2::from_elem(data.dim(), true);
        Self::new(name, data, mask, feature_names)
    }

    pub fn n_features(&self) -> usize {
        self.data.ncols()
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Samples measured across several disjoint groups of features.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    pub sample_ids: Vec<String>,
    pub views: Vec<ViewBlock>,
}

impl MultiViewDataset {
    pub fn new(sample_ids: Vec<String>, views: Vec<ViewBlock>) -> Result<Self> {
        let n = sample_ids.len();
        let mut view_names = HashSet::new();
        let mut features = HashSet::new();
        for v in &views {
            if v.data.nrows() != n {
                return Err(MuviError::Shape(format!(
                    "view {} has {} rows, expected {n}",
                    v.name,
                    v.data.nrows()
                )));
            }
            if !view_names.insert(v.name.as_str()) {
                return Err(MuviError::Format(format!("duplicate view name `{}`", v.name)));
            }
            for f in &v.feature_names {
                if !features.insert(f.as_str()) {
                    return Err(MuviError::Format(format!(
                        "feature `{f}` appears in more than one view"
                    )));
                }
            }
        }
        Ok(Self { sample_ids, views })
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn view_index(&self, name: &str) -> Option<usize> {
        self.views.iter().position(|v| v.name == name)
    }

    pub fn view_names(&self) -> Vec<String> {
        self.views.iter().map(|v| v.name.clone()).collect()
    }

    /// Maps every feature name to `(view index, column index)`.
    pub fn feature_index(&self) -> HashMap<&str, (usize, usize)> {
        let mut idx = HashMap::new();
        for (m, v) in self.views.iter().enumerate() {
            for (j, f) in v.feature_names.iter().enumerate() {
                idx.insert(f.as_str(), (m, j));
            }
        }
        idx
    }
}

fn parse_cell(cell: &str, missing_token: &str) -> Option<std::result::Result<f64, ()>> {
    let t = cell.trim();
    if t.is_empty() || t == missing_token {
        None
    } else {
        Some(t.parse::<f64>().map_err(|_| ()))
    }
}

/// Reads one view from a CSV file, returning its sample ids and the block.
pub fn load_view(path: &Path, view_name: &str, missing_token: &str) -> Result<(Vec<String>, ViewBlock)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| MuviError::csv(path, e))?;
    let header = rdr.headers().map_err(|e| MuviError::csv(path, e))?.clone();
    if header.is_empty() {
        return Err(MuviError::Format(format!("{}: empty header", path.display())));
    }
    let feature_names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let d = feature_names.len();

    let mut sample_ids = Vec::new();
    let mut values = Vec::new();
    let mut mask = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| MuviError::csv(path, e))?;
        if rec.len() != d + 1 {
            return Err(MuviError::Format(format!(
                "{}: row {} has {} cells, expected {}",
                path.display(),
                row + 1,
                rec.len(),
                d + 1
            )));
        }
        sample_ids.push(rec[0].trim().to_string());
        for (j, cell) in rec.iter().skip(1).enumerate() {
            match parse_cell(cell, missing_token) {
                None => {
                    values.push(0.0);
                    mask.push(false);
                }
                Some(Ok(v)) if v.is_nan() => {
                    values.push(0.0);
                    mask.push(false);
                }
                Some(Ok(v)) => {
                    values.push(v);
                    mask.push(true);
                }
                Some(Err(())) => {
                    return Err(MuviError::Format(format!(
                        "{}: non-numeric cell `{cell}` at row {}, column `{}`",
                        path.display(),
                        row + 1,
                        feature_names[j]
                    )))
                }
            }
        }
    }
    let n = sample_ids.len();
    let data = Array2::from_shape_vec((n, d), values).expect("row-major shape");
    let mask = Array2::from_shape_vec((n, d), mask).expect("row-major shape");
    let block = ViewBlock::new(view_name, data, mask, feature_names)?;
    Ok((sample_ids, block))
}

/// Loads one view per `(path, view name)` pair. All files must list the same
/// sample ids in the same order.
pub fn load_dataset(files: &[(PathBuf, String)], missing_token: &str) -> Result<MultiViewDataset> {
    if files.is_empty() {
        return Err(MuviError::InvalidArgument("no view files given".into()));
    }
    let mut sample_ids: Option<Vec<String>> = None;
    let mut views = Vec::with_capacity(files.len());
    for (path, name) in files {
        let (ids, block) = load_view(path, name, missing_token)?;
        match &sample_ids {
            None => sample_ids = Some(ids),
            Some(first) if *first != ids => {
                return Err(MuviError::Format(format!(
                    "{}: sample ids differ from the first view (content or order)",
                    path.display()
                )))
            }
            _ => {}
        }
        views.push(block);
    }
    MultiViewDataset::new(sample_ids.unwrap_or_default(), views)
}

/// Writes a view as CSV; masked entries become `NaN`.
pub fn save_view(view: &ViewBlock, sample_ids: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| MuviError::csv(path, e))?;
    let mut header = Vec::with_capacity(view.n_features() + 1);
    header.push("sample_id".to_string());
    header.extend(view.feature_names.iter().cloned());
    w.write_record(&header).map_err(|e| MuviError::csv(path, e))?;
    for (i, id) in sample_ids.iter().enumerate() {
        let mut rec = Vec::with_capacity(view.n_features() + 1);
        rec.push(id.clone());
        for j in 0..view.n_features() {
            if view.mask[[i, j]] {
                rec.push(format!("{}", view.data[[i, j]]));
            } else {
                rec.push(DEFAULT_MISSING_TOKEN.to_string());
            }
        }
        w.write_record(&rec).map_err(|e| MuviError::csv(path, e))?;
    }
    w.flush().map_err(|e| MuviError::io(path, e))
}

/// Writes every view to `<dir>/<view name>.csv` and returns the file list in
/// the shape [`load_dataset`] expects.
pub fn save_dataset(dataset: &MultiViewDataset, dir: &Path) -> Result<Vec<(PathBuf, String)>> {
    fs::create_dir_all(dir).map_err(|e| MuviError::io(dir, e))?;
    let mut files = Vec::with_capacity(dataset.n_views());
    for v in &dataset.views {
        let path = dir.join(format!("{}.csv", v.name));
        save_view(v, &dataset.sample_ids, &path)?;
        files.push((path, v.name.clone()));
    }
    Ok(files)
}

/// A dense real matrix with row and column labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub row_names: Vec<String>,
    pub col_names: Vec<String>,
    pub values: Array2<f64>,
}

/// Writes a labeled matrix as CSV; `corner` heads the row-label column.
pub fn save_matrix(
    path: &Path,
    corner: &str,
    row_names: &[String],
    col_names: &[String],
    values: &Array2<f64>,
) -> Result<()> {
    if values.dim() != (row_names.len(), col_names.len()) {
        return Err(MuviError::Shape(format!(
            "matrix {:?} vs {} row and {} column labels",
            values.dim(),
            row_names.len(),
            col_names.len()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| MuviError::csv(path, e))?;
    let mut header = Vec::with_capacity(col_names.len() + 1);
    header.push(corner.to_string());
    header.extend(col_names.iter().cloned());
    w.write_record(&header).map_err(|e| MuviError::csv(path, e))?;
    for (name, row) in row_names.iter().zip(values.rows()) {
        let mut rec = Vec::with_capacity(row.len() + 1);
        rec.push(name.clone());
        rec.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(|e| MuviError::csv(path, e))?;
    }
    w.flush().map_err(|e| MuviError::io(path, e))
}

/// Reads a matrix written by [`save_matrix`].
pub fn load_matrix(path: &Path) -> Result<LabeledMatrix> {
    let mut r = csv::Reader::from_path(path).map_err(|e| MuviError::csv(path, e))?;
    let header = r.headers().map_err(|e| MuviError::csv(path, e))?.clone();
    if header.is_empty() {
        return Err(MuviError::Format(format!("{}: empty header", path.display())));
    }
    let col_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut row_names = Vec::new();
    let mut flat = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| MuviError::csv(path, e))?;
        if rec.len() != col_names.len() + 1 {
            return Err(MuviError::Format(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                row_names.len() + 1,
                rec.len(),
                col_names.len() + 1
            )));
        }
        row_names.push(rec[0].to_string());
        for cell in rec.iter().skip(1) {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| MuviError::Format(format!("{}: cannot parse `{cell}` as a number", path.display())))?;
            flat.push(v);
        }
    }
    let values = Array2::from_shape_vec((row_names.len(), col_names.len()), flat)
        .map_err(|e| MuviError::Shape(e.to_string()))?;
    Ok(LabeledMatrix {
        row_names,
        col_names,
        values,
    })
}

/// Column scaling applied after per-feature centering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Divide each view by one global sd over its observed, centered entries.
    #[default]
    Global,
    /// Divide each feature by its own observed sd.
    PerFeature,
    /// Centering only.
    None,
}

/// Centers every feature on its observed mean and scales each view globally.
pub fn standardize(dataset: &MultiViewDataset) -> Result<MultiViewDataset> {
    standardize_with(dataset, Scaling::Global)
}

pub fn standardize_with(dataset: &MultiViewDataset, scaling: Scaling) -> Result<MultiViewDataset> {
    let mut out = dataset.clone();
    for view in &mut out.views {
        if view.n_observed() < 2 {
            return Err(MuviError::Domain(format!(
                "view {} has fewer than 2 observed entries",
                view.name
            )));
        }
        let mut col_sd = Vec::with_capacity(view.n_features());
        for (mut col, mcol) in view.data.axis_iter_mut(Axis(1)).zip(view.mask.axis_iter(Axis(1))) {
            let (sum, cnt) = col
                .iter()
                .zip(mcol.iter())
                .filter(|(_, &m)| m)
                .fold((0.0, 0usize), |(s, c), (&y, _)| (s + y, c + 1));
            if cnt == 0 {
                col_sd.push(None);
                continue;
            }
            let mean = sum / cnt as f64;
            let mut ss = 0.0;
            for (y, &m) in col.iter_mut().zip(mcol.iter()) {
                if m {
                    *y -= mean;
                    ss += *y * *y;
                }
            }
            col_sd.push(Some((ss / cnt as f64).sqrt()));
        }

        match scaling {
            Scaling::Global => {
                let (ss, cnt) = view
                    .data
                    .iter()
                    .zip(view.mask.iter())
                    .filter(|(_, &m)| m)
                    .fold((0.0, 0usize), |(s, c), (&y, _)| (s + y * y, c + 1));
                let sd = (ss / cnt as f64).sqrt();
                if !(sd > 0.0) {
                    return Err(MuviError::Domain(format!(
                        "view {} has zero observed variance",
                        view.name
                    )));
                }
                view.data.mapv_inplace(|y| y / sd);
            }
            Scaling::PerFeature => {
                for (j, sd) in col_sd.iter().enumerate() {
                    match sd {
                        Some(sd) if *sd > 0.0 => {
                            view.data.column_mut(j).mapv_inplace(|y| y / sd);
                        }
                        Some(_) => {
                            return Err(MuviError::Domain(format!(
                                "feature {} of view {} has zero observed variance",
                                view.feature_names[j], view.name
                            )))
                        }
                        None => {}
                    }
                }
            }
            Scaling::None => {
                if col_sd.iter().flatten().all(|&s| s == 0.0) {
                    return Err(MuviError::Domain(format!(
                        "view {} has zero observed variance",
                        view.name
                    )));
                }
            }
        }
    }
    Ok(out)
}

/// Named feature sets, one per latent factor, with members grouped by view.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureSetCollection {
    pub names: Vec<String>,
    pub descriptions: Vec<String>,
    /// `entries[k][view] = members of factor k's set that belong to view`.
    pub entries: Vec<BTreeMap<String, BTreeSet<String>>>,
    /// Members that were listed but are absent from the dataset.
    pub dropped_features: usize,
}

impl FeatureSetCollection {
    pub fn n_factors(&self) -> usize {
        self.entries.len()
    }

    pub fn name_to_index(&self) -> HashMap<String, usize> {
        self.names.iter().enumerate().map(|(k, n)| (n.clone(), k)).collect()
    }

    /// Total number of members of set `k` over all views.
    pub fn set_size(&self, k: usize) -> usize {
        self.entries[k].values().map(|s| s.len()).sum()
    }

    pub fn members(&self, k: usize, view: &str) -> Option<&BTreeSet<String>> {
        self.entries[k].get(view)
    }

    /// Checks that every referenced view and feature exists in `dataset`.
    pub fn validate_against(&self, dataset: &MultiViewDataset) -> Result<()> {
        let index = dataset.feature_index();
        for (k, e) in self.entries.iter().enumerate() {
            for (view, members) in e {
                let m = dataset.view_index(view).ok_or_else(|| {
                    MuviError::InvalidArgument(format!(
                        "feature set `{}` references unknown view `{view}`",
                        self.names[k]
                    ))
                })?;
                for f in members {
                    match index.get(f.as_str()) {
                        Some(&(vm, _)) if vm == m => {}
                        _ => {
                            return Err(MuviError::InvalidArgument(format!(
                                "feature set `{}`: `{f}` is not a feature of view `{view}`",
                                self.names[k]
                            )))
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Reads a tab-separated feature-set file and keeps the sets whose overlap with
/// the dataset has at least `min_size` features. One factor per retained set,
/// in file order.
pub fn load_feature_sets(path: &Path, dataset: &MultiViewDataset, min_size: usize) -> Result<FeatureSetCollection> {
    let file = fs::File::open(path).map_err(|e| MuviError::io(path, e))?;
    let index = dataset.feature_index();
    let mut out = FeatureSetCollection::default();
    let mut seen_names = HashSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| MuviError::io(path, e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let name = cols.next().unwrap_or_default().trim().to_string();
        if name.is_empty() {
            return Err(MuviError::Format(format!(
                "{}:{}: missing set name",
                path.display(),
                lineno + 1
            )));
        }
        let description = cols.next().unwrap_or_default().trim().to_string();
        let mut entry: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut dropped = 0;
        for f in cols.map(str::trim).filter(|f| !f.is_empty()) {
            match index.get(f) {
                Some(&(m, _)) => {
                    entry
                        .entry(dataset.views[m].name.clone())
                        .or_default()
                        .insert(f.to_string());
                }
                None => dropped += 1,
            }
        }
        let size: usize = entry.values().map(|s| s.len()).sum();
        if size < min_size {
            continue;
        }
        if !seen_names.insert(name.clone()) {
            return Err(MuviError::Format(format!(
                "{}:{}: duplicate set name `{name}`",
                path.display(),
                lineno + 1
            )));
        }
        out.dropped_features += dropped;
        out.names.push(name);
        out.descriptions.push(description);
        out.entries.push(entry);
    }
    if out.entries.is_empty() {
        return Err(MuviError::InvalidArgument(format!(
            "{}: no feature set has at least {min_size} features in the dataset",
            path.display()
        )));
    }
    if out.dropped_features > 0 {
        log::warn!(
            "{}: {} listed features are absent from the dataset and were dropped",
            path.display(),
            out.dropped_features
        );
    }
    Ok(out)
}

/// Writes the collection in the tab-separated set format. Members are listed
/// view by view in sorted order.
pub fn save_feature_sets(sets: &FeatureSetCollection, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| MuviError::io(path, e))?);
    for (k, entry) in sets.entries.iter().enumerate() {
        let desc = sets.descriptions.get(k).map(String::as_str).unwrap_or("");
        let mut line = format!("{}\t{}", sets.names[k], desc);
        for members in entry.values() {
            for m in members {
                line.push('\t');
                line.push_str(m);
            }
        }
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(|e| MuviError::io(path, e))?;
    }
    f.flush().map_err(|e| MuviError::io(path, e))
}

/// What the auxiliary constant is for views without prior information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UninformedPolicy {
    /// Treat every feature as absent from the sets: `alpha_absent` everywhere.
    #[default]
    Constrain,
    /// Leave the view unpenalized: 1.0 everywhere.
    Free,
}

/// Per-view D_m × K matrices of auxiliary constants in (0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PriorScaleMatrix {
    pub views: Vec<Array2<f64>>,
}

impl PriorScaleMatrix {
    /// All-ones scales: the uninformed model.
    pub fn ones(dataset: &MultiViewDataset, n_factors: usize) -> Self {
        Self {
            views: dataset
                .views
                .iter()
                .map(|v| Array2::ones((v.n_features(), n_factors)))
                .collect(),
        }
    }

    pub fn n_factors(&self) -> usize {
        self.views.first().map_or(0, |v| v.ncols())
    }
}

/// Builds the auxiliary constants from the feature sets. Factors beyond the
/// annotated ones (`n_dense_factors`) are unconstrained.
pub fn build_prior_scales(
    sets: &FeatureSetCollection,
    dataset: &MultiViewDataset,
    alpha_absent: f64,
    informed_views: &[String],
    policy: UninformedPolicy,
    n_dense_factors: usize,
) -> Result<PriorScaleMatrix> {
    if !(alpha_absent > 0.0 && alpha_absent <= 1.0) {
        return Err(MuviError::InvalidArgument(format!(
            "alpha_absent must lie in (0, 1], got {alpha_absent}"
        )));
    }
    let mut informed = vec![false; dataset.n_views()];
    for name in informed_views {
        let m = dataset
            .view_index(name)
            .ok_or_else(|| MuviError::InvalidArgument(format!("informed view `{name}` is not in the dataset")))?;
        informed[m] = true;
    }
    sets.validate_against(dataset)?;

    let k_sets = sets.n_factors();
    let k_total = k_sets + n_dense_factors;
    let mut views = Vec::with_capacity(dataset.n_views());
    for (m, view) in dataset.views.iter().enumerate() {
        let d = view.n_features();
        let base = if informed[m] {
            alpha_absent
        } else {
            match policy {
                UninformedPolicy::Constrain => alpha_absent,
                UninformedPolicy::Free => 1.0,
            }
        };
        let mut a = Array2::from_elem((d, k_total), base);
        if informed[m] {
            let col_of: HashMap<&str, usize> = view
                .feature_names
                .iter()
                .enumerate()
                .map(|(j, f)| (f.as_str(), j))
                .collect();
            for k in 0..k_sets {
                if let Some(members) = sets.members(k, &view.name) {
                    for f in members {
                        a[[col_of[f.as_str()], k]] = 1.0;
                    }
                }
            }
        }
        a.slice_mut(ndarray::s![.., k_sets..]).fill(1.0);
        views.push(a);
    }
    Ok(PriorScaleMatrix { views })
}
