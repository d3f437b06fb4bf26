//! Command-line interface: fit estimators, build confidence intervals,
//! run replicate-difference diagnostics, and drive synthetic studies.
//!
//! Exit codes: 0 success, 1 validation/input error, 2 numerical
//! non-convergence (reports are still written in that case). Every run
//! echoes its fully resolved configuration to stderr so results can be
//! reproduced from logs alone.

mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use remel_core::baselines::{fit_lin, fit_naive_gee};
use remel_core::covariance::CovStructure;
use remel_core::dataset::{diagnose_replicates, load_csv, ColumnLayout, LongitudinalDataset};
use remel_core::el::{fit_mele, fit_naive_el_model, ElConfig};
use remel_core::inference::{ci_profile, ci_wald, ConfidenceInterval};
use remel_core::sim::{run_study, Method, Scenario, StudyOptions};
use remel_core::Error as CoreError;

use report::{CiReport, DiagnoseReport, FitReport};

#[derive(Parser)]
#[command(
    name = "remel",
    about = "Longitudinal regression with replicate covariate measurement errors",
    version
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Flat key-value configuration file; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one estimator to a dataset.
    Fit(FitArgs),
    /// Confidence intervals for fitted coefficients.
    Ci(CiArgs),
    /// Replicate-difference skewness diagnostics.
    Diagnose(DiagnoseArgs),
    /// Run a synthetic replication study.
    Simulate(SimulateArgs),
}

#[derive(Args, Clone)]
struct CommonFitArgs {
    /// Long-format CSV input.
    #[arg(long)]
    input: PathBuf,

    /// Layout description file (key = value).
    #[arg(long)]
    layout: PathBuf,

    /// Working covariance: independence | exchangeable | ar1.
    #[arg(long = "working-cov")]
    working_cov: Option<String>,

    /// Inner solve stationarity tolerance.
    #[arg(long)]
    inner_tol: Option<f64>,

    /// Outer gradient tolerance.
    #[arg(long)]
    outer_tol: Option<f64>,

    /// Basis-reduction pivot tolerance.
    #[arg(long)]
    rank_tol: Option<f64>,

    /// Maximum outer iterations.
    #[arg(long)]
    max_outer: Option<usize>,

    /// Maximum inner iterations.
    #[arg(long)]
    max_inner: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: CommonFitArgs,

    /// Estimator: proposed | lin | gee-naive | el-naive.
    #[arg(long)]
    method: Option<String>,

    /// Output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Output format: text | json.
    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Args)]
struct CiArgs {
    #[command(flatten)]
    common: CommonFitArgs,

    /// Confidence level in (0, 1).
    #[arg(long, default_value_t = 0.95)]
    level: f64,

    /// 1-based coefficient indices (default: all).
    #[arg(long, value_delimiter = ',')]
    coords: Option<Vec<usize>>,

    /// Interval construction: profile | wald.
    #[arg(long = "method", default_value = "profile")]
    ci_method: String,

    /// Estimator backing the intervals: proposed | lin | gee-naive | el-naive.
    #[arg(long)]
    estimator: Option<String>,

    #[arg(long)]
    out: Option<PathBuf>,

    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    input: PathBuf,

    #[arg(long)]
    layout: PathBuf,

    #[arg(long)]
    out: Option<PathBuf>,

    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Args)]
struct SimulateArgs {
    /// C1 | C2 | C3 | C4 or a scenario file path.
    #[arg(long)]
    scenario: String,

    /// Number of subjects (overrides the scenario default).
    #[arg(long)]
    n: Option<usize>,

    /// Visits per subject.
    #[arg(long)]
    m: Option<usize>,

    /// Replications.
    #[arg(long, default_value_t = 1000)]
    reps: usize,

    /// Comma-separated methods to run.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "proposed,lin,gee-naive,el-naive"
    )]
    methods: Vec<String>,

    /// Base seed; replication r uses stream seed = seed XOR r.
    #[arg(long)]
    seed: Option<u64>,

    /// Report CSV destination.
    #[arg(long)]
    out: PathBuf,

    /// Multiply reported metrics by 100 for presentation.
    #[arg(long = "paper-units", default_value_t = false)]
    paper_units: bool,

    /// Confidence level for CP/ML.
    #[arg(long)]
    level: Option<f64>,

    /// 1-based coefficient indices to build intervals for (default: all).
    #[arg(long = "ci-coords", value_delimiter = ',')]
    ci_coords: Option<Vec<usize>>,

    /// Working covariance used by every estimator.
    #[arg(long = "working-cov")]
    working_cov: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let file_config = match &cli.config {
        Some(path) => match FileConfig::load(path) {
            Ok(cfg) => cfg,
            Err(err) => return fail(&err),
        },
        None => FileConfig::default(),
    };

    let threads = cli.threads.or(file_config.threads);
    if let Some(k) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
        {
            eprintln!("warning: thread pool already initialized: {e}");
        }
    }

    let outcome = match cli.command {
        Command::Fit(args) => run_fit(args, &file_config),
        Command::Ci(args) => run_ci(args, &file_config),
        Command::Diagnose(args) => run_diagnose(args),
        Command::Simulate(args) => run_simulate(args, &file_config),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => fail(&err),
    }
}

fn fail(err: &anyhow::Error) -> ExitCode {
    eprintln!("error: {err}");
    let code = match err.downcast_ref::<CoreError>() {
        Some(CoreError::Numerical { .. })
        | Some(CoreError::HullFailure { .. })
        | Some(CoreError::Study { .. }) => 2,
        _ => 1,
    };
    ExitCode::from(code)
}

/// Flat key-value configuration; every key has a matching command-line
/// flag and flags win. Unknown keys are rejected.
#[derive(Default)]
struct FileConfig {
    method: Option<String>,
    working_cov: Option<String>,
    inner_tol: Option<f64>,
    outer_tol: Option<f64>,
    rank_tol: Option<f64>,
    max_outer: Option<usize>,
    max_inner: Option<usize>,
    level: Option<f64>,
    seed: Option<u64>,
    threads: Option<usize>,
}

impl FileConfig {
    fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = FileConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                anyhow::bail!("config line {}: expected `key = value`", lineno + 1);
            };
            let (key, value) = (key.trim(), value.trim());
            let parse_err = |k: &str| format!("config key `{k}`: bad value `{value}`");
            match key {
                "method" => cfg.method = Some(value.to_string()),
                "working_cov" => cfg.working_cov = Some(value.to_string()),
                "inner_tol" => {
                    cfg.inner_tol =
                        Some(value.parse().map_err(|_| anyhow::anyhow!(parse_err(key)))?)
                }
                "outer_tol" => {
                    cfg.outer_tol =
                        Some(value.parse().map_err(|_| anyhow::anyhow!(parse_err(key)))?)
                }
                "rank_tol" => {
                    cfg.rank_tol = Some(value.parse().map_err(|_| anyhow::anyhow!(parse_err(key)))?)
                }
                "max_outer" => {
                    cfg.max_outer =
                        Some(value.parse().map_err(|_| anyhow::anyhow!(parse_err(key)))?)
                }
                "max_inner" => {
                    cfg.max_inner =
                        Some(value.parse().map_err(|_| anyhow::anyhow!(parse_err(key)))?)
                }
                "level" => {
                    cfg.level = Some(value.parse().map_err(|_| anyhow::anyhow!(parse_err(key)))?)
                }
                "seed" => {
                    cfg.seed = Some(value.parse().map_err(|_| anyhow::anyhow!(parse_err(key)))?)
                }
                "threads" => {
                    cfg.threads = Some(value.parse().map_err(|_| anyhow::anyhow!(parse_err(key)))?)
                }
                other => anyhow::bail!("unknown config key `{other}`"),
            }
        }
        Ok(cfg)
    }
}

fn resolve_config(common: &CommonFitArgs, file: &FileConfig) -> anyhow::Result<ElConfig> {
    let mut config = ElConfig::default();
    let structure = common
        .working_cov
        .clone()
        .or_else(|| file.working_cov.clone())
        .unwrap_or_else(|| "exchangeable".to_string());
    config.structure = CovStructure::from_str(&structure)?;
    if let Some(v) = common.inner_tol.or(file.inner_tol) {
        anyhow::ensure!(v > 0.0, "inner_tol must be positive");
        config.inner_tol = v;
    }
    if let Some(v) = common.outer_tol.or(file.outer_tol) {
        anyhow::ensure!(v > 0.0, "outer_tol must be positive");
        config.outer_grad_tol = v;
    }
    if let Some(v) = common.rank_tol.or(file.rank_tol) {
        anyhow::ensure!(v > 0.0, "rank_tol must be positive");
        config.rank_tol = v;
    }
    if let Some(v) = common.max_outer.or(file.max_outer) {
        anyhow::ensure!(v > 0, "max_outer must be positive");
        config.max_outer = v;
    }
    if let Some(v) = common.max_inner.or(file.max_inner) {
        anyhow::ensure!(v > 0, "max_inner must be positive");
        config.inner_max_iter = v;
    }
    Ok(config)
}

fn load_dataset(input: &Path, layout: &Path) -> anyhow::Result<LongitudinalDataset> {
    let layout = ColumnLayout::from_key_value_file(layout)?;
    Ok(load_csv(input, &layout)?)
}

fn echo_config(command: &str, entries: &[(&str, String)]) {
    let rendered: Vec<String> = entries.iter().map(|(k, v)| format!("{k}={v}")).collect();
    eprintln!("[remel {command}] {}", rendered.join(" "));
}

fn write_output(out: &Option<PathBuf>, content: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => std::fs::write(path, content)?,
        None => print!("{content}"),
    }
    Ok(())
}

fn render<T: serde::Serialize>(format: &str, value: &T, text: String) -> anyhow::Result<String> {
    match format {
        "text" => Ok(text),
        "json" => Ok(format!("{}\n", serde_json::to_string_pretty(value)?)),
        other => anyhow::bail!("unknown format `{other}` (expected text|json)"),
    }
}

fn run_fit(args: FitArgs, file: &FileConfig) -> anyhow::Result<ExitCode> {
    let config = resolve_config(&args.common, file)?;
    let method = args
        .method
        .clone()
        .or_else(|| file.method.clone())
        .unwrap_or_else(|| "proposed".to_string());
    echo_config(
        "fit",
        &[
            ("input", args.common.input.display().to_string()),
            ("layout", args.common.layout.display().to_string()),
            ("method", method.clone()),
            ("working_cov", config.structure.to_string()),
            ("inner_tol", config.inner_tol.to_string()),
            ("outer_tol", config.outer_grad_tol.to_string()),
            ("rank_tol", config.rank_tol.to_string()),
            ("max_outer", config.max_outer.to_string()),
        ],
    );
    let ds = load_dataset(&args.common.input, &args.common.layout)?;
    let (report, converged) = fit_report(&ds, &method, &config)?;
    let content = render(&args.format, &report, report.to_text())?;
    write_output(&args.out, &content)?;
    Ok(if converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn fit_report(
    ds: &LongitudinalDataset,
    method: &str,
    config: &ElConfig,
) -> anyhow::Result<(FitReport, bool)> {
    Ok(match method {
        "proposed" => {
            let fit = fit_mele(ds, config)?;
            (FitReport::from_el(&fit, ds, method), fit.converged)
        }
        "el-naive" => {
            let fit = fit_naive_el_model(ds, config)?;
            (FitReport::from_el(&fit, ds, method), fit.converged)
        }
        "lin" => {
            let fit = fit_lin(ds, config)?;
            (FitReport::from_baseline(&fit, ds, method), fit.converged)
        }
        "gee-naive" => {
            let fit = fit_naive_gee(ds, config)?;
            (FitReport::from_baseline(&fit, ds, method), fit.converged)
        }
        other => anyhow::bail!("unknown method `{other}`"),
    })
}

fn run_ci(args: CiArgs, file: &FileConfig) -> anyhow::Result<ExitCode> {
    let config = resolve_config(&args.common, file)?;
    let level = args.level;
    anyhow::ensure!(0.0 < level && level < 1.0, "level must lie in (0, 1)");
    let estimator = args
        .estimator
        .clone()
        .or_else(|| file.method.clone())
        .unwrap_or_else(|| "proposed".to_string());
    echo_config(
        "ci",
        &[
            ("input", args.common.input.display().to_string()),
            ("estimator", estimator.clone()),
            ("method", args.ci_method.clone()),
            ("level", level.to_string()),
            ("working_cov", config.structure.to_string()),
        ],
    );
    let ds = load_dataset(&args.common.input, &args.common.layout)?;
    let coords: Vec<usize> = match &args.coords {
        Some(list) => {
            let mut out = Vec::new();
            for &c in list {
                anyhow::ensure!(
                    (1..=ds.p()).contains(&c),
                    "coordinate {c} out of range 1..={}",
                    ds.p()
                );
                out.push(c - 1);
            }
            out
        }
        None => (0..ds.p()).collect(),
    };

    let names = ds.coef_names();
    let converged;
    let (estimates, cis): (Vec<f64>, Vec<ConfidenceInterval>) = match estimator.as_str() {
        "proposed" | "el-naive" => {
            let fit = if estimator == "proposed" {
                fit_mele(&ds, &config)?
            } else {
                fit_naive_el_model(&ds, &config)?
            };
            converged = fit.converged;
            let cis = coords
                .iter()
                .map(|&c| match args.ci_method.as_str() {
                    "profile" => ci_profile(&fit, c, level),
                    "wald" => ci_wald(&fit.beta_hat, &fit.asymptotic_cov, c, level),
                    other => Err(remel_core::Error::Validation {
                        message: format!("unknown ci method `{other}` (expected profile|wald)"),
                    }),
                })
                .collect::<Result<Vec<_>, _>>()?;
            (fit.beta_hat.iter().copied().collect(), cis)
        }
        "lin" | "gee-naive" => {
            anyhow::ensure!(
                args.ci_method == "wald",
                "estimator `{estimator}` supports only wald intervals"
            );
            let fit = if estimator == "lin" {
                fit_lin(&ds, &config)?
            } else {
                fit_naive_gee(&ds, &config)?
            };
            converged = fit.converged;
            let cis = coords
                .iter()
                .map(|&c| ci_wald(&fit.beta_hat, &fit.covariance, c, level))
                .collect::<Result<Vec<_>, _>>()?;
            (fit.beta_hat.iter().copied().collect(), cis)
        }
        other => anyhow::bail!("unknown estimator `{other}`"),
    };

    let report = CiReport::new(&args.ci_method, level, &names, &estimates, &cis);
    let content = render(&args.format, &report, report.to_text())?;
    write_output(&args.out, &content)?;
    Ok(if converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn run_diagnose(args: DiagnoseArgs) -> anyhow::Result<ExitCode> {
    echo_config(
        "diagnose",
        &[
            ("input", args.input.display().to_string()),
            ("layout", args.layout.display().to_string()),
        ],
    );
    let ds = load_dataset(&args.input, &args.layout)?;
    let rows = diagnose_replicates(&ds)?;
    let report = DiagnoseReport { rows };
    let content = render(&args.format, &report, report.to_text())?;
    write_output(&args.out, &content)?;
    Ok(ExitCode::SUCCESS)
}

fn run_simulate(args: SimulateArgs, file: &FileConfig) -> anyhow::Result<ExitCode> {
    let mut scenario =
        if ["C1", "C2", "C3", "C4"].contains(&args.scenario.to_ascii_uppercase().as_str()) {
            Scenario::by_name(&args.scenario, args.n.unwrap_or(100))?
        } else {
            let text = std::fs::read_to_string(&args.scenario)?;
            let mut sc = Scenario::from_key_value_str(&text)?;
            if let Some(n) = args.n {
                sc.n = n;
            }
            sc
        };
    if let Some(m) = args.m {
        scenario.m = m;
    }
    let methods: Vec<Method> = args
        .methods
        .iter()
        .map(|m| Method::from_str(m))
        .collect::<Result<_, _>>()?;
    let seed = args.seed.or(file.seed).unwrap_or(20240101);

    let level = args.level.or(file.level).unwrap_or(0.95);
    anyhow::ensure!(0.0 < level && level < 1.0, "level must lie in (0, 1)");
    let mut options = StudyOptions {
        level,
        ..StudyOptions::default()
    };
    if let Some(cov) = args.working_cov.as_deref().or(file.working_cov.as_deref()) {
        options.config.structure = CovStructure::from_str(cov)?;
    }
    if let Some(coords) = &args.ci_coords {
        let mut zero_based = Vec::new();
        for &c in coords {
            anyhow::ensure!(
                (1..=scenario.p()).contains(&c),
                "ci coordinate {c} out of range 1..={}",
                scenario.p()
            );
            zero_based.push(c - 1);
        }
        options.ci_coords = Some(zero_based);
    }

    echo_config(
        "simulate",
        &[
            ("scenario", scenario.name.clone()),
            ("n", scenario.n.to_string()),
            ("m", scenario.m.to_string()),
            ("reps", args.reps.to_string()),
            (
                "methods",
                methods
                    .iter()
                    .map(|m| m.label().to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("seed", seed.to_string()),
            ("level", options.level.to_string()),
            ("working_cov", options.config.structure.to_string()),
            ("paper_units", args.paper_units.to_string()),
            ("out", args.out.display().to_string()),
        ],
    );

    let report = run_study(&scenario, &methods, args.reps, seed, &options)?;
    std::fs::write(&args.out, report.to_csv(args.paper_units))?;

    let timing: BTreeMap<&str, String> = report
        .timing_seconds
        .iter()
        .map(|(m, s)| (m.label(), format!("{s:.2}s")))
        .collect();
    eprintln!(
        "[remel simulate] wrote {}; failures: {:?}; total fit time: {:?}",
        args.out.display(),
        report
            .n_failures
            .iter()
            .map(|(m, c)| (m.label(), *c))
            .collect::<BTreeMap<_, _>>(),
        timing
    );
    if report.failure_alarm {
        eprintln!("warning: more than 2% of replications failed for at least one method");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}
