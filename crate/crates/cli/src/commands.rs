use std::fs;
use std::path::{Path, PathBuf};

use muvi::experiment::{replicate_run, ReplicateSummary, SyntheticRun};
use muvi::synth::column_sparsity;
use muvi::{
    evaluate as score, fit, run_synthetic, save_dataset, save_feature_sets, save_matrix, Aggregate, Checkpoint,
    EvaluationReport, FactorEstimate, MeanSd, SyntheticTruth,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::Manifest;
use crate::pipeline::{prepare, Prepared};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let body = serde_json::to_string_pretty(value)?;
    fs::write(path, body).map_err(|e| CliError::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_row(w: &mut csv::Writer<fs::File>, path: &Path, row: &[String]) -> Result<()> {
    w.write_record(row).map_err(|source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| CliError::io(path, e))
}

fn record_inputs(manifest: &mut Manifest, prepared: &Prepared) -> Result<()> {
    for p in &prepared.inputs {
        manifest.input(p)?;
    }
    Ok(())
}

/// Writes the synthetic dataset, its truth and the perturbed feature sets.
pub fn generate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let synth = cfg
        .synthetic
        .as_ref()
        .ok_or_else(|| CliError::Config("generate needs a synthetic specification".into()))?;
    let prepared = prepare(cfg)?;
    let truth = prepared.truth.as_ref().expect("synthetic runs carry a truth");
    let out = &cfg.output;
    create_dir(out)?;

    let mut written: Vec<PathBuf> = save_dataset(&prepared.raw, &out.join("data"))?
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let truth_dir = out.join("truth");
    truth.save(&truth_dir, &prepared.raw.sample_ids)?;
    let mut truth_files: Vec<PathBuf> = fs::read_dir(&truth_dir)
        .map_err(|e| CliError::io(&truth_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    truth_files.sort();
    written.extend(truth_files);
    if !cfg.informed_views.is_empty() {
        let path = out.join("feature_sets.tsv");
        save_feature_sets(prepared.feature_sets.as_ref().expect("synthetic sets"), &path)?;
        written.push(path);
    }
    let config_path = out.join(CONFIG_FILE);
    write_json(&config_path, cfg)?;
    written.push(config_path);

    let mut manifest = Manifest::new("generate", cfg)?;
    for p in &written {
        manifest.output(out, p)?;
    }
    written.push(manifest.write(out)?);

    let active_sparsity: Vec<f64> = truth
        .loadings
        .iter()
        .zip(truth.activity.rows())
        .map(|(w, act)| {
            let s = column_sparsity(w);
            let cols: Vec<f64> = s.iter().zip(act.iter()).filter(|(_, &a)| a).map(|(&v, _)| v).collect();
            cols.iter().sum::<f64>() / cols.len().max(1) as f64
        })
        .collect();
    println!(
        "generated N={} views={} D={:?} K={} noise_sd={} seed={}",
        synth.n_samples,
        synth.n_views,
        prepared.raw.views.iter().map(|v| v.n_features()).collect::<Vec<_>>(),
        synth.n_factors,
        synth.noise_sd,
        synth.seed
    );
    println!(
        "zero fraction of active loading columns per view: {}",
        active_sparsity
            .iter()
            .map(|s| format!("{s:.3}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    println!(
        "feature sets: informed views {:?}, swap fraction {}, output {}",
        cfg.informed_views,
        cfg.noise.swap_fraction,
        out.display()
    );
    Ok(written)
}

/// Fits the model and writes the checkpoint, trace and point estimates.
pub fn train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let prepared = prepare(cfg)?;
    let out = &cfg.output;
    create_dir(out)?;
    let k = prepared.n_factors();
    let result = fit(&prepared.dataset, &prepared.scales, k, &cfg.prior, &cfg.train)?;
    let views = prepared.dataset.view_names();

    let mut written = Vec::new();
    let ck = out.join(CHECKPOINT_FILE);
    Checkpoint::new(&result.params, &result.optimizer, &views, &prepared.factor_names).save(&ck)?;
    written.push(ck);
    let trace = out.join("trace.csv");
    result.trace.write_csv(&trace)?;
    written.push(trace);
    let scales = out.join("factor_scales.csv");
    save_matrix(
        &scales,
        "view",
        &views,
        &prepared.factor_names,
        &result.params.factor_scales(),
    )?;
    written.push(scales);
    for (v, w) in prepared.dataset.views.iter().zip(result.params.loadings()) {
        let path = out.join(format!("loadings_{}.csv", v.name));
        save_matrix(&path, "feature", &v.feature_names, &prepared.factor_names, &w)?;
        written.push(path);
    }
    let scores = out.join("scores.csv");
    save_matrix(
        &scores,
        "sample_id",
        &prepared.dataset.sample_ids,
        &prepared.factor_names,
        &result.params.x.loc,
    )?;
    written.push(scores);
    if let (Some(sets), true) = (&prepared.feature_sets, cfg.is_synthetic()) {
        let path = out.join("feature_sets.tsv");
        save_feature_sets(sets, &path)?;
        written.push(path);
    }
    let config_path = out.join(CONFIG_FILE);
    write_json(&config_path, cfg)?;
    written.push(config_path);

    let mut manifest = Manifest::new("train", cfg)?;
    record_inputs(&mut manifest, &prepared)?;
    for p in &written {
        manifest.output(out, p)?;
    }
    written.push(manifest.write(out)?);

    let t = &result.trace;
    println!(
        "trained K={k} for {} epochs ({} steps), stop: {:?}, final smoothed ELBO {:.3}",
        t.epochs,
        t.n_steps(),
        t.stop_reason,
        t.smoothed_elbo.last().copied().unwrap_or(f64::NAN)
    );
    println!("outputs in {}", out.display());
    Ok(written)
}

pub struct EvaluateArgs {
    pub run_dir: PathBuf,
    pub truth_dir: Option<PathBuf>,
    pub out: PathBuf,
}

/// Scores a trained run; with a truth, also support recovery before and after matching.
pub fn evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> Result<Vec<PathBuf>> {
    let ck_path = args.run_dir.join(CHECKPOINT_FILE);
    let (vp, _) = Checkpoint::load(&ck_path)?.restore()?;
    let prepared = prepare(cfg)?;
    let truth = match &args.truth_dir {
        Some(dir) => Some(SyntheticTruth::load(dir)?),
        None => prepared.truth.clone(),
    };
    let estimate = FactorEstimate::from_variational(&vp);
    let report = score(&prepared.dataset, &estimate, truth.as_ref(), &cfg.eval)?;

    let out = &args.out;
    create_dir(out)?;
    let mut written = Vec::new();
    let json = out.join("report.json");
    report.save_json(&json)?;
    written.push(json);
    let table = out.join("report.csv");
    report.save_csv(&table)?;
    written.push(table);
    let pr = out.join("pr_curve.csv");
    if report.save_pr_curve(&pr)? {
        written.push(pr);
    }

    let mut manifest = Manifest::new("evaluate", cfg)?;
    manifest.input(&ck_path)?;
    manifest.input(&args.run_dir.join(CONFIG_FILE))?;
    record_inputs(&mut manifest, &prepared)?;
    if let Some(dir) = &args.truth_dir {
        manifest.input(&dir.join("truth_meta.json"))?;
    }
    for p in &written {
        manifest.output(out, p)?;
    }
    written.push(manifest.write(out)?);
    print_report(&report);
    Ok(written)
}

fn print_report(report: &EvaluationReport) {
    println!("RMSE mean {:.5} pooled {:.5}", report.rmse.mean, report.rmse.pooled);
    if let Some(rec) = &report.recovery {
        for (stage, mean) in [("unmatched", &rec.unmatched_mean), ("matched", &rec.matched_mean)] {
            println!(
                "{stage:>9}: precision {:.4} recall {:.4} F1 {:.4}",
                mean.precision, mean.recall, mean.f1
            );
        }
        println!("activity agreement (matched) {:.4}", rec.activity_agreement_matched);
    }
}

/// One cell of the benchmark grid.
#[derive(Debug, Clone, Serialize)]
pub struct Setting {
    pub informed_views: usize,
    pub noise: f64,
    pub alpha: f64,
}

impl Setting {
    pub fn tag(&self) -> String {
        if self.informed_views == 0 {
            "uninformed".into()
        } else {
            format!("inf{}_noise{}_alpha{}", self.informed_views, self.noise, self.alpha)
        }
    }
}

pub fn benchmark_settings(cfg: &RunConfig) -> Vec<Setting> {
    let g = &cfg.benchmark;
    let mut out = Vec::new();
    if g.include_uninformed {
        out.push(Setting {
            informed_views: 0,
            noise: 0.0,
            alpha: 1.0,
        });
    }
    for &v in &g.informed_view_counts {
        for &noise in &g.noise_fractions {
            for &alpha in &g.alphas {
                out.push(Setting {
                    informed_views: v,
                    noise,
                    alpha,
                });
            }
        }
    }
    out
}

fn base_run(cfg: &RunConfig) -> SyntheticRun {
    SyntheticRun {
        synth: cfg.synthetic.clone().unwrap_or_default(),
        noise: cfg.noise.clone(),
        informed_views: Vec::new(),
        alpha_absent: 1.0,
        uninformed_policy: cfg.uninformed_policy,
        scaling: cfg.effective_scaling(),
        prior: cfg.prior,
        train: cfg.train.clone(),
        eval: cfg.eval.clone(),
    }
}

#[derive(Debug, Clone, Serialize)]
struct ReplicateRecord {
    tag: String,
    setting: Setting,
    summary: ReplicateSummary,
}

fn fmt_ms(m: &MeanSd) -> String {
    format!("{:.4}±{:.4}", m.mean, m.sd)
}

/// Trains and evaluates every (setting, replicate) pair of the grid in a
/// worker pool, then merges the per-replicate files into summary tables.
pub fn benchmark(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    use rayon::prelude::*;

    let settings = benchmark_settings(cfg);
    if settings.is_empty() {
        return Err(CliError::Config("the benchmark grid is empty".into()));
    }
    let out = &cfg.output;
    let rep_dir = out.join("replicates");
    create_dir(&rep_dir)?;
    let base = base_run(cfg);
    let master_seed = cfg.seed.unwrap_or(base.synth.seed);
    let n_views = base.synth.n_views;
    if let Some(&v) = cfg.benchmark.informed_view_counts.iter().find(|&&v| v > n_views) {
        return Err(CliError::Config(format!("cannot inform {v} of {n_views} views")));
    }
    let jobs: Vec<(usize, usize)> = (0..settings.len())
        .flat_map(|s| (0..cfg.benchmark.replicates).map(move |r| (s, r)))
        .collect();
    log::info!(
        "benchmark: {} settings x {} replicates",
        settings.len(),
        cfg.benchmark.replicates
    );

    let records: Vec<(PathBuf, ReplicateRecord)> = jobs
        .par_iter()
        .map(|&(s, r)| -> Result<(PathBuf, ReplicateRecord)> {
            let setting = &settings[s];
            let mut run = base.clone();
            run.informed_views = muvi::experiment::first_views(setting.informed_views);
            run.noise.swap_fraction = setting.noise;
            run.alpha_absent = setting.alpha;
            let run = replicate_run(&run, master_seed, r);
            let outcome = run_synthetic(&run)?;
            let summary = ReplicateSummary::from_outcome(r, &run.informed_views, &outcome)?;
            let record = ReplicateRecord {
                tag: setting.tag(),
                setting: setting.clone(),
                summary,
            };
            let path = rep_dir.join(format!("{}_r{r}.json", record.tag));
            write_json(&path, &record)?;
            log::info!("{} replicate {r}: F1 {:.4}", record.tag, record.summary.f1);
            Ok((path, record))
        })
        .collect::<Result<_>>()?;

    let mut written: Vec<PathBuf> = records.iter().map(|(p, _)| p.clone()).collect();

    let rows_path = out.join("replicates.csv");
    let mut w = csv_writer(&rows_path)?;
    let header = [
        "setting",
        "informed_views",
        "noise",
        "alpha",
        "replicate",
        "rmse",
        "precision",
        "recall",
        "f1",
        "f1_unmatched",
        "f1_informed",
        "f1_uninformed",
        "activity_agreement",
        "epochs",
        "converged",
    ];
    csv_row(&mut w, &rows_path, &header.map(String::from))?;
    for (_, rec) in &records {
        let s = &rec.summary;
        csv_row(
            &mut w,
            &rows_path,
            &[
                rec.tag.clone(),
                rec.setting.informed_views.to_string(),
                rec.setting.noise.to_string(),
                rec.setting.alpha.to_string(),
                s.replicate.to_string(),
                s.rmse.to_string(),
                s.precision.to_string(),
                s.recall.to_string(),
                s.f1.to_string(),
                s.f1_unmatched.to_string(),
                s.f1_informed.to_string(),
                s.f1_uninformed.to_string(),
                s.activity_agreement.to_string(),
                s.epochs.to_string(),
                s.converged.to_string(),
            ],
        )?;
    }
    csv_finish(w, &rows_path)?;
    written.push(rows_path);

    let aggregates: Vec<(&Setting, Aggregate)> = settings
        .iter()
        .map(|setting| {
            let tag = setting.tag();
            let rows: Vec<ReplicateSummary> = records
                .iter()
                .filter(|(_, r)| r.tag == tag)
                .map(|(_, r)| r.summary.clone())
                .collect();
            (setting, Aggregate::of(&rows))
        })
        .collect();

    let summary_path = out.join("summary.csv");
    let mut w = csv_writer(&summary_path)?;
    let header = [
        "setting",
        "informed_views",
        "noise",
        "alpha",
        "replicates",
        "rmse",
        "precision",
        "recall",
        "f1",
        "f1_unmatched",
        "f1_informed",
        "f1_informed_unmatched",
        "f1_uninformed",
        "activity_agreement",
    ];
    csv_row(&mut w, &summary_path, &header.map(String::from))?;
    for (setting, a) in &aggregates {
        csv_row(
            &mut w,
            &summary_path,
            &[
                setting.tag(),
                setting.informed_views.to_string(),
                setting.noise.to_string(),
                setting.alpha.to_string(),
                a.replicates.to_string(),
                fmt_ms(&a.rmse),
                fmt_ms(&a.precision),
                fmt_ms(&a.recall),
                fmt_ms(&a.f1),
                fmt_ms(&a.f1_unmatched),
                fmt_ms(&a.f1_informed),
                fmt_ms(&a.f1_informed_unmatched),
                fmt_ms(&a.f1_uninformed),
                fmt_ms(&a.activity_agreement),
            ],
        )?;
    }
    csv_finish(w, &summary_path)?;
    written.push(summary_path);

    // matched F1 by alpha, one row per (informed views, noise)
    let alpha_path = out.join("alpha_sweep.csv");
    let mut w = csv_writer(&alpha_path)?;
    let mut header = vec!["informed_views".to_string(), "noise".to_string()];
    header.extend(cfg.benchmark.alphas.iter().map(|a| format!("f1_alpha_{a}")));
    csv_row(&mut w, &alpha_path, &header)?;
    for &v in &cfg.benchmark.informed_view_counts {
        for &noise in &cfg.benchmark.noise_fractions {
            let mut row = vec![v.to_string(), noise.to_string()];
            for &alpha in &cfg.benchmark.alphas {
                let cell = aggregates
                    .iter()
                    .find(|(s, _)| s.informed_views == v && s.noise == noise && s.alpha == alpha)
                    .map(|(_, a)| fmt_ms(&a.f1))
                    .unwrap_or_default();
                row.push(cell);
            }
            csv_row(&mut w, &alpha_path, &row)?;
        }
    }
    csv_finish(w, &alpha_path)?;
    written.push(alpha_path);

    let config_path = out.join(CONFIG_FILE);
    write_json(&config_path, cfg)?;
    written.push(config_path);
    let mut manifest = Manifest::new("benchmark", cfg)?;
    for p in &written {
        manifest.output(out, p)?;
    }
    written.push(manifest.write(out)?);

    for (setting, a) in &aggregates {
        println!(
            "{:<32} F1 {} recall {} RMSE {}",
            setting.tag(),
            fmt_ms(&a.f1),
            fmt_ms(&a.recall),
            fmt_ms(&a.rmse)
        );
    }
    Ok(written)
}
