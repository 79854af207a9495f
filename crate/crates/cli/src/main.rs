//! `magic`: merge specialists, calibrate layer magnitudes, inspect the result.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use magic_cli::{parse_config, ConfigError, PipelineConfig};
use magic_core::bench::{self, BenchmarkSpec, Calibration, RunOptions, SweepLambda};
use magic_core::calibrate::{self, CalibratedModel};
use magic_core::checkpoint::{self, ModelManifest, ModelWeights};
use magic_core::diagnostics::{self, DatasetCoefficients};
use magic_core::merge::{self, MergeConfig, MergeMethod, TaskVector};
use magic_core::network::{LabeledBatch, MetricKind};

#[derive(Parser)]
#[command(name = "magic", version, about = "Layer-wise magnitude calibration for merged models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge the configured specialists without calibration
    Merge {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Merge, then calibrate in weight, feature or dual space
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        /// wsc, fsc, dsc, dsc-a or none; defaults to the config's calibration
        #[arg(long)]
        mode: Option<Calibration>,
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Per-layer sensitivity of the averaged merge on the probe batch
    Sensitivity {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Magnitude ratios, disentanglement heatmaps and coefficient comparisons
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Run the synthetic benchmark
    Bench {
        /// Benchmark spec JSON; built-in defaults when omitted
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Also run every task subset and a paired t-test
        #[arg(long)]
        sweep: bool,
        /// Calibration compared against the plain merge in the sweep
        #[arg(long, default_value = "dsc")]
        calibration: Calibration,
        #[arg(long, value_enum, default_value_t = LambdaMode::Fixed)]
        lambda_mode: LambdaMode,
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Print tensor names, shapes and norms of a checkpoint
    Inspect { path: PathBuf },
}

/// Flags that take precedence over config keys.
#[derive(Args, Clone, Default)]
struct Overrides {
    #[arg(long)]
    method: Option<MergeMethod>,
    #[arg(long)]
    lambda: Option<f32>,
    #[arg(long)]
    alpha: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    metric: Option<MetricKind>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn apply(&self, merge: &mut MergeConfig, opts: &mut RunOptions) -> Result<()> {
        if let Some(v) = self.method {
            merge.method = v;
        }
        if let Some(v) = self.lambda {
            merge.lambda = v;
        }
        if let Some(v) = self.seed {
            merge.seed = v;
        }
        if let Some(v) = self.alpha {
            opts.alpha = v;
        }
        if let Some(v) = self.epsilon {
            if !(v.is_finite() && v > 0.0) {
                bail!(ConfigError::OutOfRange {
                    key: "epsilon".into(),
                    value: v.to_string(),
                    expected: "> 0".into(),
                });
            }
            opts.epsilon = v;
        }
        if let Some(v) = self.metric {
            opts.metric = v;
        }
        merge.validate()?;
        Ok(())
    }

    fn apply_to_config(&self, cfg: &mut PipelineConfig) -> Result<()> {
        let mut opts = run_options(cfg);
        self.apply(&mut cfg.merge, &mut opts)?;
        cfg.alpha = opts.alpha;
        cfg.epsilon = opts.epsilon;
        cfg.metric = opts.metric;
        Ok(())
    }
}

#[derive(Args)]
struct OutArgs {
    /// Output directory; falls back to the config's output_dir
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing output files
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum LambdaMode {
    Fixed,
    InverseSize,
}

/// An output directory whose files are checked for collisions up front.
struct Output {
    dir: PathBuf,
}

impl Output {
    fn prepare(args: &OutArgs, fallback: Option<&Path>, files: &[String]) -> Result<Output> {
        let dir = match (&args.out, fallback) {
            (Some(d), _) => d.clone(),
            (None, Some(d)) => d.to_path_buf(),
            (None, None) => bail!("no output directory: pass --out or set output_dir in the config"),
        };
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        if !args.force {
            if let Some(f) = files.iter().find(|f| dir.join(f).exists()) {
                bail!("{} already exists; pass --force to overwrite", dir.join(f).display());
            }
        }
        Ok(Output { dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        println!("wrote {}", p.display());
        Ok(())
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        self.write(name, serde_json::to_string_pretty(value)?)
    }
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn run_options(cfg: &PipelineConfig) -> RunOptions {
    RunOptions {
        alpha: cfg.alpha,
        epsilon: cfg.epsilon,
        metric: cfg.metric,
        calibration_samples: None,
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<PipelineConfig> {
    let mut cfg = parse_config(path)?;
    overrides.apply_to_config(&mut cfg)?;
    cfg.check_paths()?;
    println!("resolved config:\n{}", cfg.to_json());
    Ok(cfg)
}

struct Models {
    pre: ModelWeights,
    manifest: ModelManifest,
    tvs: Vec<TaskVector>,
}

fn load_models(cfg: &PipelineConfig) -> Result<Models> {
    let pre = checkpoint::load_safetensors(&cfg.pretrained)?;
    let manifest = checkpoint::load_manifest(&cfg.manifest, Some(&pre))?;
    let tvs = cfg
        .specialists
        .iter()
        .map(|p| {
            let tuned = checkpoint::load_safetensors(p)?;
            merge::task_vector(&pre, &tuned, &manifest).with_context(|| format!("specialist {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    info!("loaded {} specialists over {} layers", tvs.len(), manifest.num_layers());
    Ok(Models { pre, manifest, tvs })
}

fn load_probe(cfg: &PipelineConfig) -> Result<LabeledBatch> {
    let path = cfg.probe.as_ref().ok_or_else(|| ConfigError::MissingRequired("probe".into()))?;
    Ok(LabeledBatch::load(path)?)
}

/// One calibration batch per specialist.
fn load_task_batches(cfg: &PipelineConfig) -> Result<Vec<LabeledBatch>> {
    if cfg.calibration_samples.len() != cfg.specialists.len() {
        bail!(ConfigError::OutOfRange {
            key: "calibration_samples".into(),
            value: format!("{} files", cfg.calibration_samples.len()),
            expected: format!("one batch file per specialist ({})", cfg.specialists.len()),
        });
    }
    cfg.calibration_samples
        .iter()
        .map(|p| LabeledBatch::load(p).map_err(Into::into))
        .collect()
}

fn cmd_merge(config: &Path, overrides: &Overrides, out: &OutArgs) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    let output = Output::prepare(out, cfg.output_dir.as_deref(), &names(&["merged.safetensors", "config.json"]))?;
    let models = load_models(&cfg)?;
    let merged_tv = cfg.merge.merge(&models.tvs)?;
    let merged = merge::recompose(&models.pre, &models.manifest, &merged_tv, cfg.merge.effective_lambda())?;
    checkpoint::save_safetensors(&merged, output.path("merged.safetensors"))?;
    println!("wrote {}", output.path("merged.safetensors").display());
    output.write("config.json", cfg.to_json())
}

fn cmd_calibrate(config: &Path, mode: Option<Calibration>, overrides: &Overrides, out: &OutArgs) -> Result<()> {
    let mut cfg = load_config(config, overrides)?;
    if let Some(mode) = mode {
        cfg.calibration = mode;
    }
    let files = names(&["calibrated.safetensors", "plan.json", "plan.csv", "config.json"]);
    let output = Output::prepare(out, cfg.output_dir.as_deref(), &files)?;
    let models = load_models(&cfg)?;
    let probe = load_probe(&cfg)?;
    let batches = match cfg.calibration {
        Calibration::Fsc | Calibration::Dsc => load_task_batches(&cfg)?,
        // Task-agnostic variant: the general probe stands in for every task.
        Calibration::DscA => vec![probe.unlabeled(); models.tvs.len()],
        Calibration::None | Calibration::Wsc => vec![],
    };
    let (model, plan) = bench::merge_and_calibrate(
        &models.pre,
        &models.manifest,
        &models.tvs,
        &cfg.merge,
        cfg.calibration,
        &run_options(&cfg),
        &batches,
        &probe,
    )?;
    checkpoint::save_safetensors(&model.to_checkpoint(), output.path("calibrated.safetensors"))?;
    println!("wrote {}", output.path("calibrated.safetensors").display());
    if let Some(plan) = plan {
        if !plan.satisfies_gating() {
            bail!("calibration plan violates the gating contract");
        }
        output.write("plan.json", plan.to_json())?;
        output.write("plan.csv", plan.to_csv()?)?;
    }
    output.write("config.json", cfg.to_json())
}

#[derive(Serialize)]
struct SensitivityOutput {
    report: calibrate::SensitivityReport,
    sensitive_set: calibrate::SensitiveSet,
}

fn cmd_sensitivity(config: &Path, overrides: &Overrides, out: &OutArgs) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    let output = Output::prepare(out, cfg.output_dir.as_deref(), &names(&["sensitivity.csv", "sensitivity.json"]))?;
    let models = load_models(&cfg)?;
    let probe = load_probe(&cfg)?;
    let avg = merge::merge_average(&models.tvs)?;
    let report = calibrate::layer_sensitivity(&avg, &models.pre, &models.manifest, &probe, cfg.epsilon, cfg.metric, 1.0)?;
    let sensitive_set = calibrate::select_sensitive_layers(&report, cfg.alpha);
    output.write("sensitivity.csv", diagnostics::sensitivity_csv(&report)?)?;
    output.write_json("sensitivity.json", &SensitivityOutput { report, sensitive_set })
}

#[derive(Serialize)]
struct DiagnoseSummary {
    heatmap_diagonal_column_max: Vec<usize>,
    coefficient_variance_ratio: Option<f64>,
}

fn cmd_diagnose(config: &Path, overrides: &Overrides, out: &OutArgs) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    let models = load_models(&cfg)?;
    let (pre, m) = (&models.pre, &models.manifest);
    let layers = m.num_layers();
    let mut files = names(&["ratios.csv", "coefficients.csv", "coefficient_spread.csv", "diagnostics.json"]);
    files.extend((0..layers).map(|l| format!("heatmap_layer{l}.csv")));
    let output = Output::prepare(out, cfg.output_dir.as_deref(), &files)?;
    let batches = load_task_batches(&cfg)?;
    let probe = load_probe(&cfg)?;

    let ratios = diagnostics::operation_ratio_reports(
        &models.tvs,
        pre,
        m,
        &batches,
        cfg.merge.ties_keep_fraction,
        cfg.merge.effective_lambda(),
    )?;
    output.write("ratios.csv", ratios.to_csv()?)?;

    let effective = cfg.merge.merge(&models.tvs)?.scaled(cfg.merge.effective_lambda());
    let mut diagonal = Vec::with_capacity(layers);
    for l in 0..layers {
        let heatmap = diagnostics::disentanglement_heatmap(&effective, &models.tvs, pre, m, &batches, l)?;
        diagonal.push(heatmap.diagonal_column_max_rows());
        output.write(&format!("heatmap_layer{l}.csv"), heatmap.to_csv()?)?;
    }

    let (model, plan) = bench::merge_and_calibrate(
        pre,
        m,
        &models.tvs,
        &cfg.merge,
        Calibration::Dsc,
        &run_options(&cfg),
        &batches,
        &probe,
    )?;
    let plan = plan.expect("dual-space calibration returns a plan");
    let per_dataset = models
        .tvs
        .iter()
        .zip(&batches)
        .map(|(tv, batch)| {
            Ok(DatasetCoefficients {
                dataset: batch.task_id.clone(),
                estimates: diagnostics::single_sample_estimates(tv, &model.weights, pre, m, batch)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let coefficients = diagnostics::coefficient_comparison(&plan, &per_dataset)?;
    output.write("coefficients.csv", coefficients.to_csv()?)?;
    output.write("coefficient_spread.csv", coefficients.spread_csv()?)?;
    output.write_json(
        "diagnostics.json",
        &DiagnoseSummary {
            heatmap_diagonal_column_max: diagonal,
            coefficient_variance_ratio: coefficients.variance_ratio,
        },
    )
}

#[derive(Serialize)]
struct BenchOutput {
    spec: BenchmarkSpec,
    merge: MergeConfig,
    options: RunOptions,
    baselines: bench::BaselineReport,
    runs: Vec<(Calibration, bench::RunResult)>,
    alpha_sweep: Vec<(usize, f64)>,
}

fn cmd_bench(
    spec_path: Option<&Path>,
    sweep: bool,
    calibration: Calibration,
    lambda_mode: LambdaMode,
    overrides: &Overrides,
    out: &OutArgs,
) -> Result<()> {
    let spec = match spec_path {
        Some(p) => BenchmarkSpec::load(p)?,
        None => BenchmarkSpec::default(),
    };
    spec.validate()?;
    let mut merge_cfg = MergeConfig::default();
    let mut opts = RunOptions::default();
    overrides.apply(&mut merge_cfg, &mut opts)?;
    println!(
        "resolved config:\n{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "spec": spec, "merge": merge_cfg, "options": opts, "sweep": sweep, "calibration": calibration,
        }))?
    );
    let mut files = names(&["results.json", "results.csv", "alpha_sweep.csv"]);
    if sweep {
        files.extend(names(&["sweep.csv", "sweep.json"]));
    }
    let output = Output::prepare(out, None, &files)?;

    let setup = bench::make_synthetic_tasks(&spec)?;
    let baselines = bench::baselines(&setup)?;
    let kinds = [Calibration::None, Calibration::Wsc, Calibration::Fsc, Calibration::Dsc, Calibration::DscA];
    let runs = kinds
        .iter()
        .map(|&c| Ok((c, bench::run_benchmark(&setup, &merge_cfg, c, &opts)?)))
        .collect::<Result<Vec<_>>>()?;
    let alpha_sweep = (0..=setup.manifest.num_layers())
        .map(|alpha| {
            let o = RunOptions { alpha, ..opts.clone() };
            Ok((alpha, bench::run_benchmark(&setup, &merge_cfg, calibration, &o)?.mean))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut csv = String::from("calibration,mean");
    for k in 0..setup.tasks.len() {
        csv.push_str(&format!(",task_{k}"));
    }
    csv.push('\n');
    let mut push_row = |name: &str, values: &[f64]| {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        csv.push_str(&format!("{name},{mean}"));
        for v in values {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    };
    push_row("pretrained", &baselines.pretrained);
    push_row("specialist", &baselines.specialist);
    for (c, r) in &runs {
        push_row(&c.to_string(), &r.per_task);
    }
    for (c, r) in &runs {
        println!("{c:>6}: mean accuracy {:.4}", r.mean);
    }
    output.write("results.csv", csv)?;
    let alpha_csv: String = std::iter::once(format!("alpha,{calibration}_mean\n"))
        .chain(alpha_sweep.iter().map(|(a, mean)| format!("{a},{mean}\n")))
        .collect();
    output.write("alpha_sweep.csv", alpha_csv)?;
    output.write_json(
        "results.json",
        &BenchOutput {
            spec: spec.clone(),
            merge: merge_cfg.clone(),
            options: opts.clone(),
            baselines,
            runs,
            alpha_sweep,
        },
    )?;

    if sweep {
        let mode = match lambda_mode {
            LambdaMode::Fixed => SweepLambda::Fixed,
            LambdaMode::InverseSize => SweepLambda::InverseSize,
        };
        let result = bench::combo_sweep(&setup, &merge_cfg, calibration, &opts, mode)?;
        println!(
            "sweep over {} subsets: t = {:.4}, p = {:.4e}",
            result.rows.len(),
            result.t_statistic,
            result.p_value
        );
        output.write("sweep.csv", result.to_csv()?)?;
        output.write_json("sweep.json", &result)?;
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let w = checkpoint::load_safetensors(path)?;
    println!("{}: {} tensors", path.display(), w.len());
    for (name, t) in &w.tensors {
        println!("{name}\t{:?}\tl2={:.6}\tl1={:.6}", t.shape(), t.l2_norm(), t.l1_norm());
    }
    for (k, v) in &w.metadata {
        println!("metadata {k} = {v}");
    }
    if let Ok(model) = CalibratedModel::from_checkpoint(w) {
        if let Some(xi) = model.xi_feature {
            println!("feature coefficients: {xi:?}");
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("MAGIC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("MAGIC_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    init_threads()?;
    match Cli::parse().command {
        Command::Merge { config, overrides, out } => cmd_merge(&config, &overrides, &out),
        Command::Calibrate {
            config,
            mode,
            overrides,
            out,
        } => cmd_calibrate(&config, mode, &overrides, &out),
        Command::Sensitivity { config, overrides, out } => cmd_sensitivity(&config, &overrides, &out),
        Command::Diagnose { config, overrides, out } => cmd_diagnose(&config, &overrides, &out),
        Command::Bench {
            spec,
            sweep,
            calibration,
            lambda_mode,
            overrides,
            out,
        } => cmd_bench(spec.as_deref(), sweep, calibration, lambda_mode, &overrides, &out),
        Command::Inspect { path } => cmd_inspect(&path),
    }
}
