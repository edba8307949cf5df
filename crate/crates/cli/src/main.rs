mod commands;
mod config;
mod error;
mod manifest;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::commands::{EvaluateArgs, CONFIG_FILE};
use crate::config::{parse_view, read_config_file, resolve, set_path, TrainPreset, ViewSource};
use crate::error::{CliError, Result};

#[derive(Parser)]
#[command(
    name = "muvi",
    version,
    about = "Multi-view factor analysis informed by feature sets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a multi-view dataset with known factors and noisy feature sets.
    Generate(GenerateCmd),
    /// Fit the model and write a checkpoint with point estimates.
    Train(TrainCmd),
    /// Score a trained run, optionally against a synthetic truth.
    Evaluate(EvaluateCmd),
    /// Train and evaluate a grid of synthetic settings with replicates.
    Benchmark(BenchmarkCmd),
}

/// Flags shared by every command.
#[derive(Args)]
struct Common {
    /// JSON configuration file; flags override its values.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
    /// Master seed for data, feature-set noise and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Raw override `dotted.key=JSON`, e.g. `train.beta1=0.8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=JSON")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SynthFlags {
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    n_views: Option<usize>,
    #[arg(long)]
    features_per_view: Option<usize>,
    /// Number of simulated factors.
    #[arg(long)]
    n_true_factors: Option<usize>,
    #[arg(long)]
    noise_sd: Option<f64>,
}

#[derive(Args)]
struct PriorFlags {
    /// Fraction of each true set swapped for random features.
    #[arg(long)]
    noise: Option<f64>,
    /// Views whose loadings are informed by the feature sets (comma separated).
    #[arg(long, value_delimiter = ',')]
    informed_views: Option<Vec<String>>,
    /// Prior scale of loadings outside a factor's set.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct GenerateCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    synth: SynthFlags,
    #[command(flatten)]
    prior: PriorFlags,
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    common: Common,
    /// Input view `NAME=PATH`; repeatable.
    #[arg(long = "view", value_parser = parse_view)]
    views: Vec<ViewSource>,
    /// Train on simulated data instead of `--view` files.
    #[arg(long)]
    synthetic: bool,
    #[command(flatten)]
    synth: SynthFlags,
    #[command(flatten)]
    prior: PriorFlags,
    /// Tab-separated feature sets for real data.
    #[arg(long)]
    feature_sets: Option<PathBuf>,
    #[arg(long)]
    n_factors: Option<usize>,
    #[arg(long)]
    n_dense_factors: Option<usize>,
    /// `constrain` or `free`.
    #[arg(long)]
    uninformed_policy: Option<String>,
    /// `global`, `per_feature` or `none`.
    #[arg(long)]
    scaling: Option<String>,
    /// `default` or `benchmark`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    mc_samples: Option<usize>,
}

#[derive(Args)]
struct EvaluateCmd {
    /// Directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Truth directory written by `generate`.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Loading magnitude that counts as nonzero.
    #[arg(long)]
    threshold: Option<f64>,
    /// Also write a precision-recall curve over thresholds.
    #[arg(long)]
    pr_curve: bool,
    /// Report directory; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=JSON")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct BenchmarkCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    synth: SynthFlags,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    noise_fractions: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    informed_view_counts: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Tiny grid on tiny data, for checking the pipeline end to end.
    #[arg(long)]
    smoke: bool,
}

/// Collects explicitly given flags into a JSON patch.
#[derive(Default)]
struct Patch(Value);

impl Patch {
    fn new() -> Self {
        Self(json!({}))
    }

    fn opt<T: serde::Serialize>(&mut self, path: &str, v: &Option<T>) -> &mut Self {
        if let Some(v) = v {
            set_path(&mut self.0, path, json!(v));
        }
        self
    }

    fn common(&mut self, c: &Common) -> Result<&mut Self> {
        self.opt("output", &c.output).opt("seed", &c.seed);
        self.overrides(&c.overrides)?;
        Ok(self)
    }

    fn overrides(&mut self, items: &[String]) -> Result<&mut Self> {
        for item in items {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{item}` is not KEY=JSON")))?;
            // bare words are taken as strings
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
            set_path(&mut self.0, key, value);
        }
        Ok(self)
    }

    fn synth(&mut self, s: &SynthFlags) -> &mut Self {
        self.opt("synthetic.n_samples", &s.n_samples)
            .opt("synthetic.n_views", &s.n_views)
            .opt("synthetic.features_per_view", &s.features_per_view)
            .opt("synthetic.n_factors", &s.n_true_factors)
            .opt("synthetic.noise_sd", &s.noise_sd)
    }

    fn prior(&mut self, p: &PriorFlags) -> &mut Self {
        self.opt("noise.swap_fraction", &p.noise)
            .opt("informed_views", &p.informed_views)
            .opt("alpha_absent", &p.alpha)
    }

    fn ensure_synthetic(&mut self) {
        if self.0.get("synthetic").is_none() {
            set_path(&mut self.0, "synthetic", json!({}));
        }
    }
}

fn load_file(path: &Option<PathBuf>) -> Result<Option<Value>> {
    path.as_deref().map(read_config_file).transpose()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(cmd) => {
            let mut p = Patch::new();
            p.common(&cmd.common)?
                .synth(&cmd.synth)
                .prior(&cmd.prior)
                .ensure_synthetic();
            let cfg = resolve(load_file(&cmd.common.config)?, p.0, |_| {})?;
            commands::generate(&cfg)?;
        }
        Command::Train(cmd) => {
            let mut p = Patch::new();
            p.common(&cmd.common)?
                .synth(&cmd.synth)
                .prior(&cmd.prior)
                .opt("feature_sets", &cmd.feature_sets)
                .opt("n_factors", &cmd.n_factors)
                .opt("n_dense_factors", &cmd.n_dense_factors)
                .opt("uninformed_policy", &cmd.uninformed_policy)
                .opt("scaling", &cmd.scaling)
                .opt("train_preset", &cmd.preset)
                .opt("train.learning_rate", &cmd.learning_rate)
                .opt("train.max_epochs", &cmd.max_epochs)
                .opt("train.batch_size", &cmd.batch_size)
                .opt("train.mc_samples", &cmd.mc_samples);
            if !cmd.views.is_empty() {
                set_path(&mut p.0, "views", json!(cmd.views));
            }
            if cmd.synthetic {
                p.ensure_synthetic();
            }
            let cfg = resolve(load_file(&cmd.common.config)?, p.0, |_| {})?;
            commands::train(&cfg)?;
        }
        Command::Evaluate(cmd) => {
            let mut p = Patch::new();
            p.overrides(&cmd.overrides)?.opt("eval.threshold", &cmd.threshold);
            if cmd.pr_curve {
                let max = cmd.threshold.unwrap_or(muvi::eval::DEFAULT_THRESHOLD) * 10.0;
                set_path(
                    &mut p.0,
                    "eval.pr_thresholds",
                    json!(muvi::eval::threshold_grid(max, 50)),
                );
            }
            // the stored run configuration is the base, so data and sets are rebuilt identically
            let file = read_config_file(&cmd.run.join(CONFIG_FILE))?;
            let cfg = resolve(Some(file), p.0, |_| {})?;
            let args = EvaluateArgs {
                out: cmd.out.clone().unwrap_or_else(|| cmd.run.clone()),
                run_dir: cmd.run,
                truth_dir: cmd.truth,
            };
            commands::evaluate(&cfg, &args)?;
        }
        Command::Benchmark(cmd) => {
            let mut p = Patch::new();
            p.common(&cmd.common)?
                .synth(&cmd.synth)
                .opt("benchmark.replicates", &cmd.replicates)
                .opt("benchmark.noise_fractions", &cmd.noise_fractions)
                .opt("benchmark.informed_view_counts", &cmd.informed_view_counts)
                .opt("benchmark.alphas", &cmd.alphas)
                .opt("train.max_epochs", &cmd.max_epochs)
                .ensure_synthetic();
            let smoke = cmd.smoke;
            let cfg = resolve(load_file(&cmd.common.config)?, p.0, |c| {
                c.train_preset = TrainPreset::Benchmark;
                c.train = TrainPreset::Benchmark.config();
                if smoke {
                    apply_smoke(c);
                }
            })?;
            commands::benchmark(&cfg)?;
        }
    }
    Ok(())
}

/// Shrinks the benchmark to a few seconds; explicit flags still win.
fn apply_smoke(c: &mut config::RunConfig) {
    let s = c.synthetic.get_or_insert_with(Default::default);
    s.n_samples = 40;
    s.features_per_view = 30;
    c.benchmark.replicates = 2;
    c.benchmark.noise_fractions = vec![0.2];
    c.benchmark.informed_view_counts = vec![1];
    c.benchmark.alphas = vec![0.03];
    c.train.max_epochs = 60;
    c.train.min_epochs = 0;
    c.train.check_every = 10;
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("MUVI_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| CliError::Config(format!("MUVI_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
