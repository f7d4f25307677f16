//! `tvbo`: run target-value optimization experiments, inspect the
//! non-central chi-square law, and regenerate figure data.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 usage or config error.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use tvbo::acquisition::{AcquisitionSpec, DEFAULT_BETA, DEFAULT_Q, DEFAULT_ZETA};
use tvbo::engine::{
    aggregate, run_experiment, ConvergenceTrace, ExperimentConfig, ExperimentKind, PoolGenerator, PoolTarget,
    TestFunctionSpec,
};
use tvbo::ncx2::{cdf_exact_k1, NoncentralChiSquare};
use tvbo::report::{format_number, write_aggregate, write_long_rows, write_traces, LONG_HEADER};

const OUT_DIR_ENV: &str = "TVBO_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "tvbo-out";

#[derive(Debug)]
enum CliError {
    Usage(String),
    Numerical(String),
}

impl From<tvbo::Error> for CliError {
    fn from(e: tvbo::Error) -> Self {
        if e.is_usage() {
            Self::Usage(e.to_string())
        } else {
            Self::Numerical(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Usage(format!("i/o error: {e}"))
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "tvbo", version, about = "Robust Bayesian target-value optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment configuration over several seeds.
    Run(RunArgs),
    /// Evaluate the non-central chi-square distribution.
    Dist(DistArgs),
    /// Regenerate the data behind a figure.
    Replicate(ReplicateArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON config or a manifest written by a previous run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["exp1", "exp2", "exp3"])]
    experiment: Option<String>,
    /// Output noise level (exp1).
    #[arg(long)]
    sigma_a: Option<f64>,
    /// Input noise level in units of the domain width (exp2).
    #[arg(long)]
    sigma_u: Option<f64>,
    /// Acquisition method, e.g. robust-ncx2-ei or ncx2-ei-zero.
    #[arg(long)]
    acq: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seeds: Option<usize>,
    /// Number of grid candidates (exp1, exp2).
    #[arg(long)]
    grid: Option<usize>,
    /// Pool target (exp3).
    #[arg(long, value_enum)]
    target_region: Option<Region>,
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    zeta: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Output directory; defaults to $TVBO_OUT_DIR, then ./tvbo-out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; run k uses seed + k.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for independent seeds.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Region {
    Low,
    High,
}

impl From<Region> for PoolTarget {
    fn from(r: Region) -> Self {
        match r {
            Region::Low => PoolTarget::Low,
            Region::High => PoolTarget::High,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DistFunction {
    Pdf,
    Cdf,
    Quantile,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DistMethod {
    /// Poisson-mixture series.
    Series,
    /// Sankaran power-transform approximation.
    Sankaran,
    /// Closed form, K = 1 only.
    Exact,
}

#[derive(clap::Args)]
struct DistArgs {
    #[arg(value_enum)]
    function: DistFunction,
    /// Degrees of freedom: 1, 3 or 5.
    #[arg(long)]
    k: u32,
    #[arg(long)]
    lambda: f64,
    /// Evaluation points (probability levels for `quantile`).
    #[arg(long, required = true, num_args = 1.., allow_negative_numbers = true)]
    x: Vec<f64>,
    #[arg(long, value_enum, default_value = "series")]
    method: DistMethod,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Figure {
    #[value(name = "fig1-ei")]
    Fig1Ei,
    #[value(name = "fig1-lcb")]
    Fig1Lcb,
    #[value(name = "fig2")]
    Fig2,
    #[value(name = "fig3-synthetic")]
    Fig3Synthetic,
}

#[derive(clap::Args)]
struct ReplicateArgs {
    #[arg(value_enum)]
    figure: Figure,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[command(flatten)]
    common: CommonArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Dist(args) => cmd_dist(args),
        Command::Replicate(args) => cmd_replicate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(1)
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn cmd_dist(args: DistArgs) -> CliResult<()> {
    if ![1, 3, 5].contains(&args.k) {
        return Err(usage(format!("--k must be 1, 3 or 5, got {}", args.k)));
    }
    let dist = NoncentralChiSquare::new(args.k, args.lambda)?;
    if args.method == DistMethod::Exact && args.k != 1 {
        return Err(usage("--method exact is only available for --k 1"));
    }
    if args.method != DistMethod::Series && args.function != DistFunction::Cdf {
        return Err(usage("--method sankaran/exact applies to cdf only"));
    }
    let mut out = std::io::stdout().lock();
    for &x in &args.x {
        let v = match (args.function, args.method) {
            (DistFunction::Pdf, _) => dist.pdf(x),
            (DistFunction::Cdf, DistMethod::Series) => dist.cdf(x)?,
            (DistFunction::Cdf, DistMethod::Sankaran) => dist.sankaran_cdf(x),
            (DistFunction::Cdf, DistMethod::Exact) => cdf_exact_k1(args.lambda, x),
            (DistFunction::Quantile, _) => dist.quantile(x)?,
        };
        writeln!(out, "{}", format_number(v))?;
    }
    Ok(())
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Overlays `patch` onto `base`, recursing into objects.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() && k != "acquisition" && k != "function" => {
                        merge(slot, v)
                    }
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn load_config_file(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("{} is not valid JSON: {e}", path.display())))?;
    // a manifest carries the resolved config under "config"
    let value = match value.get("config") {
        Some(c) => c.clone(),
        None => value,
    };
    if !value.is_object() {
        return Err(usage(format!("{} must contain a JSON object", path.display())));
    }
    Ok(value)
}

fn resolve_config(args: &RunArgs) -> CliResult<ExperimentConfig> {
    let file = args.config.as_deref().map(load_config_file).transpose()?;
    let file_kind = match file.as_ref().and_then(|f| f.get("experiment")) {
        Some(v) => Some(
            v.as_str()
                .ok_or_else(|| usage("config field 'experiment' must be a string"))
                .and_then(|s| ExperimentKind::parse(s).map_err(CliError::from))?,
        ),
        None => None,
    };
    let kind = match args.experiment.as_deref() {
        Some(s) => ExperimentKind::parse(s)?,
        None => file_kind.unwrap_or(ExperimentKind::Exp1),
    };
    let mut value = serde_json::to_value(ExperimentConfig::preset(kind, AcquisitionSpec::RobustEi))
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    if let Some(f) = &file {
        if file_kind.is_some_and(|k| k != kind) {
            return Err(usage("--experiment disagrees with the config file's 'experiment'"));
        }
        merge(&mut value, f);
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| usage(format!("invalid config: {e}")))?;
    apply_flags(&mut cfg, args)?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_flags(cfg: &mut ExperimentConfig, args: &RunArgs) -> CliResult<()> {
    if let Some(v) = args.sigma_a {
        match &mut cfg.function {
            TestFunctionSpec::Sine { sigma_a, .. } => *sigma_a = v,
            _ => return Err(usage("--sigma-a applies to exp1 only")),
        }
    }
    if let Some(v) = args.sigma_u {
        match &mut cfg.function {
            TestFunctionSpec::Composite { sigma_u, .. } => *sigma_u = v,
            _ => return Err(usage("--sigma-u applies to exp2 only")),
        }
    }
    if let Some(r) = args.target_region {
        match &cfg.function {
            TestFunctionSpec::SyntheticPool { generator } => cfg.target = generator.target(r.into()),
            _ => return Err(usage("--target-region applies to exp3 only")),
        }
    }
    let (zeta, q, beta) = match cfg.acquisition {
        AcquisitionSpec::RobustPoi { zeta } => (zeta, DEFAULT_Q, DEFAULT_BETA),
        AcquisitionSpec::RobustLcb { q } | AcquisitionSpec::Ncx2Lcb { q, .. } => (DEFAULT_ZETA, q, DEFAULT_BETA),
        AcquisitionSpec::GaussianLcb { beta } | AcquisitionSpec::RobustGaussianLcb { beta } => {
            (DEFAULT_ZETA, DEFAULT_Q, beta)
        }
        _ => (DEFAULT_ZETA, DEFAULT_Q, DEFAULT_BETA),
    };
    let name = args.acq.clone().unwrap_or_else(|| cfg.acquisition.name().to_string());
    cfg.acquisition =
        AcquisitionSpec::from_name(&name, args.zeta.unwrap_or(zeta), args.q.unwrap_or(q), args.beta.unwrap_or(beta))?;
    if let Some(v) = args.iters {
        cfg.iterations = v;
    }
    if let Some(v) = args.seeds {
        cfg.seeds = v;
    }
    if let Some(v) = args.grid {
        cfg.grid_size = v;
    }
    if let Some(v) = args.common.seed {
        cfg.base_seed = v;
    }
    if let Some(v) = args.jitter {
        cfg.kernel.jitter = v;
    }
    Ok(())
}

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn thread_pool(workers: Option<usize>) -> CliResult<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        if n == 0 {
            return Err(usage("--workers must be >= 1"));
        }
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| CliError::Numerical(e.to_string()))
}

fn create_file(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| usage(format!("cannot create {}: {e}", path.display())))?))
}

fn cmd_run(args: RunArgs) -> CliResult<()> {
    let cfg = resolve_config(&args)?;
    let dir = out_dir(args.common.out.clone());
    fs::create_dir_all(&dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
    let traces_path = dir.join("traces.csv");
    let aggregate_path = dir.join("aggregate.csv");
    let manifest_path = dir.join("manifest.json");

    let mut manifest = json!({
        "artifact_version": env!("CARGO_PKG_VERSION"),
        "command": "run",
        "base_seed": cfg.base_seed,
        "started_at": timestamp(),
        "outputs": {
            "manifest": manifest_path,
            "traces": traces_path,
            "aggregate": aggregate_path,
        },
        "config": cfg,
    });
    write_json(&manifest_path, &manifest)?;

    let pool = thread_pool(args.common.workers)?;
    let traces = pool.install(|| run_experiment(&cfg))?;

    write_traces(create_file(&traces_path)?, &traces)?;
    let agg = aggregate(&traces);
    write_aggregate(create_file(&aggregate_path)?, cfg.experiment.name(), cfg.acquisition.name(), &agg)?;
    manifest["finished_at"] = json!(timestamp());
    write_json(&manifest_path, &manifest)?;

    if let Some(last) = agg.last() {
        println!(
            "{} {}: {} seeds, final mean e_min {} (std {}), incumbent error {} after {} iterations; outputs in {}",
            cfg.experiment.name(),
            cfg.acquisition.name(),
            traces.len(),
            format_number(last.e_min_mean),
            format_number(last.e_min_std),
            format_number(last.incumbent_error_mean),
            last.iteration,
            dir.display()
        );
    }
    Ok(())
}

struct Panel {
    name: String,
    configs: Vec<ExperimentConfig>,
}

fn methods(names: &[&str]) -> Vec<AcquisitionSpec> {
    names
        .iter()
        .map(|n| AcquisitionSpec::from_name(n, DEFAULT_ZETA, DEFAULT_Q, DEFAULT_BETA).expect("known method"))
        .collect()
}

/// Noise levels used for the input-noise figure, in units of the domain width.
const FIG2_SIGMA_U: [f64; 2] = [0.1, 0.15];
const FIG1_SIGMA_A: [f64; 3] = [0.01, 0.1, 0.5];

fn figure_panels(figure: Figure) -> Vec<Panel> {
    match figure {
        Figure::Fig1Ei | Figure::Fig1Lcb => {
            let m = if figure == Figure::Fig1Ei {
                methods(&["robust-ncx2-ei", "ncx2-ei-zero"])
            } else {
                methods(&["robust-ncx2-lcb", "ncx2-lcb-zero"])
            };
            FIG1_SIGMA_A
                .iter()
                .map(|&s| Panel {
                    name: format!("sigma-a-{s}"),
                    configs: m.iter().map(|a| ExperimentConfig::exp1(s, *a)).collect(),
                })
                .collect()
        }
        Figure::Fig2 => {
            let m = methods(&["robust-ncx2-ei", "ncx2-ei-zero", "ncx2-ei-estimate"]);
            FIG2_SIGMA_U
                .iter()
                .map(|&s| Panel {
                    name: format!("sigma-u-{s}"),
                    configs: m.iter().map(|a| ExperimentConfig::exp2(s, *a)).collect(),
                })
                .collect()
        }
        Figure::Fig3Synthetic => {
            let m = methods(&[
                "gaussian-lcb",
                "robust-gaussian-lcb",
                "ncx2-lcb-zero",
                "robust-ncx2-lcb",
                "ncx2-ei-zero",
                "robust-ncx2-ei",
            ]);
            let generator = PoolGenerator::synthetic();
            [PoolTarget::Low, PoolTarget::High]
                .into_iter()
                .map(|t| Panel {
                    name: format!("{}-variance-target", t.name()),
                    configs: m.iter().map(|a| ExperimentConfig::exp3(generator.clone(), t, *a)).collect(),
                })
                .collect()
        }
    }
}

fn figure_name(figure: Figure) -> &'static str {
    match figure {
        Figure::Fig1Ei => "fig1-ei",
        Figure::Fig1Lcb => "fig1-lcb",
        Figure::Fig2 => "fig2",
        Figure::Fig3Synthetic => "fig3-synthetic",
    }
}

fn cmd_replicate(args: ReplicateArgs) -> CliResult<()> {
    let fig = figure_name(args.figure);
    let mut panels = figure_panels(args.figure);
    for cfg in panels.iter_mut().flat_map(|p| p.configs.iter_mut()) {
        if let Some(v) = args.seeds {
            cfg.seeds = v;
        }
        if let Some(v) = args.iters {
            cfg.iterations = v;
        }
        if let Some(v) = args.common.seed {
            cfg.base_seed = v;
        }
        cfg.validate()?;
    }
    let dir = out_dir(args.common.out.clone());
    fs::create_dir_all(&dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
    let manifest_path = dir.join(format!("{fig}_manifest.json"));
    let long_path = dir.join(format!("{fig}_long.csv"));
    let panel_paths: Vec<PathBuf> = panels.iter().map(|p| dir.join(format!("{fig}_{}.csv", p.name))).collect();

    let mut manifest = json!({
        "artifact_version": env!("CARGO_PKG_VERSION"),
        "command": "replicate",
        "figure": fig,
        "data": if args.figure == Figure::Fig3Synthetic { "synthetic pool (stand-in dataset)" } else { "analytic test function" },
        "started_at": timestamp(),
        "outputs": { "manifest": manifest_path, "long": long_path, "panels": panel_paths },
        "panels": panels.iter().map(|p| json!({ "panel": p.name, "configs": p.configs })).collect::<Vec<_>>(),
    });
    write_json(&manifest_path, &manifest)?;

    let pool = thread_pool(args.common.workers)?;
    let mut long = create_file(&long_path)?;
    writeln!(long, "{LONG_HEADER}")?;
    for (panel, path) in panels.iter().zip(&panel_paths) {
        let mut all: Vec<ConvergenceTrace> = Vec::new();
        for cfg in &panel.configs {
            let traces = pool.install(|| run_experiment(cfg))?;
            let agg = aggregate(&traces);
            write_long_rows(&mut long, &panel.name, cfg.experiment.name(), cfg.acquisition.name(), &agg)?;
            if let Some(last) = agg.last() {
                println!(
                    "{fig} {} {}: final mean e_min {}, incumbent error {}",
                    panel.name,
                    cfg.acquisition.name(),
                    format_number(last.e_min_mean),
                    format_number(last.incumbent_error_mean)
                );
            }
            all.extend(traces);
        }
        write_traces(create_file(path)?, &all)?;
    }
    long.flush()?;
    manifest["finished_at"] = json!(timestamp());
    write_json(&manifest_path, &manifest)?;
    Ok(())
}
