//! Synthetic-study harness: scenario generation, replicated estimation
//! runs, and the bias/SD/MSE/CP/ML metric tables.

pub mod rng;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{fit_lin, fit_naive_gee};
use crate::covariance::CovStructure;
use crate::dataset::{ColumnLayout, LongitudinalDataset, SubjectRecord};
use crate::el::{fit_mele, fit_naive_el_model, ElConfig};
use crate::error::{Error, Result};
use crate::inference::{ci_profile, ci_wald, ConfidenceInterval};
use rng::StreamRng;

/// Estimators the study harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Method {
    Proposed,
    Lin,
    GeeNaive,
    ElNaive,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Proposed,
        Method::Lin,
        Method::GeeNaive,
        Method::ElNaive,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Lin => "lin",
            Method::GeeNaive => "gee-naive",
            Method::ElNaive => "el-naive",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(Method::Proposed),
            "lin" => Ok(Method::Lin),
            "gee-naive" | "gee_naive" => Ok(Method::GeeNaive),
            "el-naive" | "el_naive" => Ok(Method::ElNaive),
            other => Err(Error::validation(format!(
                "unknown method `{other}` (expected proposed|lin|gee-naive|el-naive)"
            ))),
        }
    }
}

/// Distribution of one replicate's measurement error.
#[derive(Debug, Clone, Copy, Serialize)]
pub enum ErrorDist {
    Normal {
        sd: f64,
    },
    StudentT {
        df: u32,
    },
    /// Exponential with the given rate, centered at mean zero.
    CenteredExponential {
        rate: f64,
    },
}

impl ErrorDist {
    pub fn sample(self, rng: &mut StreamRng) -> f64 {
        match self {
            ErrorDist::Normal { sd } => sd * rng.normal(),
            ErrorDist::StudentT { df } => rng.student_t(df),
            ErrorDist::CenteredExponential { rate } => rng.exponential(rate) - 1.0 / rate,
        }
    }
}

impl std::str::FromStr for ErrorDist {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let inner = |prefix: &str| -> Option<&str> {
            s.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')
        };
        if let Some(v) = inner("normal") {
            let sd: f64 = v
                .parse()
                .map_err(|_| Error::validation(format!("bad normal sd `{v}`")))?;
            if sd < 0.0 {
                return Err(Error::validation("normal sd must be non-negative"));
            }
            return Ok(ErrorDist::Normal { sd });
        }
        if let Some(v) = inner("t") {
            let df: u32 = v
                .parse()
                .map_err(|_| Error::validation(format!("bad t df `{v}`")))?;
            if df == 0 {
                return Err(Error::validation("t df must be positive"));
            }
            return Ok(ErrorDist::StudentT { df });
        }
        if let Some(v) = inner("exp") {
            let rate: f64 = v
                .parse()
                .map_err(|_| Error::validation(format!("bad exp rate `{v}`")))?;
            if rate <= 0.0 {
                return Err(Error::validation("exp rate must be positive"));
            }
            return Ok(ErrorDist::CenteredExponential { rate });
        }
        Err(Error::validation(format!(
            "unknown error distribution `{s}` (expected normal(sd)|t(df)|exp(rate))"
        )))
    }
}

/// One synthetic-study configuration.
///
/// The mean model is `y = b0 + x1 b1 + x2 b2 + ... + eps` with all
/// covariates standard normal, an exchangeable within-subject error
/// correlation, and replicate surrogates `w_k = x1 + xi_k` for the
/// single error-prone covariate `x1`.
#[derive(Debug, Clone, Serialize)]
pub struct Scenario {
    pub name: String,
    pub n: usize,
    pub m: usize,
    /// Canonical order: intercept, error-prone coefficient, exact ones.
    pub beta_true: Vec<f64>,
    pub rho: f64,
    pub sigma_e2: f64,
    pub error_dists: Vec<ErrorDist>,
}

impl Scenario {
    fn standard(name: &str, n: usize, error_dists: Vec<ErrorDist>) -> Self {
        Scenario {
            name: name.to_string(),
            n,
            m: 6,
            beta_true: vec![1.0, 1.0, 1.0],
            rho: 0.6,
            sigma_e2: 0.8,
            error_dists,
        }
    }

    /// Two replicates, both errors normal with sd 0.6.
    pub fn c1(n: usize) -> Self {
        Self::standard(
            "C1",
            n,
            vec![ErrorDist::Normal { sd: 0.6 }, ErrorDist::Normal { sd: 0.6 }],
        )
    }

    /// Two replicates: normal sd 0.6 and Student t with 4 df.
    pub fn c2(n: usize) -> Self {
        Self::standard(
            "C2",
            n,
            vec![ErrorDist::Normal { sd: 0.6 }, ErrorDist::StudentT { df: 4 }],
        )
    }

    /// Three replicates, all normal with sd 0.6.
    pub fn c3(n: usize) -> Self {
        Self::standard(
            "C3",
            n,
            vec![
                ErrorDist::Normal { sd: 0.6 },
                ErrorDist::Normal { sd: 0.6 },
                ErrorDist::Normal { sd: 0.6 },
            ],
        )
    }

    /// Three replicates: normal sd 0.6, Student t(4), centered Exp(2).
    pub fn c4(n: usize) -> Self {
        Self::standard(
            "C4",
            n,
            vec![
                ErrorDist::Normal { sd: 0.6 },
                ErrorDist::StudentT { df: 4 },
                ErrorDist::CenteredExponential { rate: 2.0 },
            ],
        )
    }

    pub fn by_name(name: &str, n: usize) -> Result<Self> {
        match name.to_ascii_uppercase().as_str() {
            "C1" => Ok(Self::c1(n)),
            "C2" => Ok(Self::c2(n)),
            "C3" => Ok(Self::c3(n)),
            "C4" => Ok(Self::c4(n)),
            other => Err(Error::validation(format!("unknown scenario `{other}`"))),
        }
    }

    pub fn k(&self) -> usize {
        self.error_dists.len()
    }

    pub fn p(&self) -> usize {
        self.beta_true.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::validation("scenario needs at least 2 subjects"));
        }
        if self.m < 1 {
            return Err(Error::validation("scenario needs at least 1 visit"));
        }
        if self.p() < 2 {
            return Err(Error::validation(
                "scenario needs an intercept and an error-prone coefficient",
            ));
        }
        if self.k() < 2 {
            return Err(Error::validation("scenario needs at least 2 replicates"));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::validation("scenario rho must lie in [0, 1)"));
        }
        if self.sigma_e2 <= 0.0 {
            return Err(Error::validation("scenario sigma_e2 must be positive"));
        }
        Ok(())
    }

    /// Parse a flat `key = value` scenario file. Keys: `name`, `n`, `m`,
    /// `beta`, `rho`, `sigma_e2`, `error_dists`.
    pub fn from_key_value_str(text: &str) -> Result<Self> {
        let mut sc = Scenario {
            name: "custom".to_string(),
            n: 100,
            m: 6,
            beta_true: vec![1.0, 1.0, 1.0],
            rho: 0.6,
            sigma_e2: 0.8,
            error_dists: vec![ErrorDist::Normal { sd: 0.6 }, ErrorDist::Normal { sd: 0.6 }],
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::validation(format!(
                    "scenario line {}: expected `key = value`",
                    lineno + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "name" => sc.name = value.to_string(),
                "n" => sc.n = parse_num(key, value)?,
                "m" => sc.m = parse_num(key, value)?,
                "rho" => sc.rho = parse_num(key, value)?,
                "sigma_e2" => sc.sigma_e2 = parse_num(key, value)?,
                "beta" => {
                    sc.beta_true = value
                        .split(',')
                        .map(|v| parse_num::<f64>("beta", v.trim()))
                        .collect::<Result<_>>()?;
                }
                "error_dists" => {
                    sc.error_dists = value
                        .split(',')
                        .map(|v| v.trim().parse())
                        .collect::<Result<_>>()?;
                }
                other => {
                    return Err(Error::validation(format!("unknown scenario key `{other}`")));
                }
            }
        }
        sc.validate()?;
        Ok(sc)
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::validation(format!("scenario key `{key}`: bad value `{value}`")))
}

/// Generate one synthetic dataset; deterministic in (scenario, seed).
///
/// Draw order per subject: covariate columns visit-by-visit (error-prone
/// first), the shared and idiosyncratic normal components of the
/// exchangeable error, then replicate measurement errors in replicate
/// order.
pub fn generate_dataset(sc: &Scenario, seed: u64) -> Result<LongitudinalDataset> {
    sc.validate()?;
    let p = sc.p();
    let n_exact = p - 2;
    let exact_names: Vec<String> = (0..n_exact).map(|j| format!("x{}", j + 2)).collect();
    let layout = ColumnLayout::new(exact_names, vec!["x1".to_string()], true)?;

    let mut rng = StreamRng::new(seed);
    let m = sc.m;
    let k = sc.k();
    let mut subjects = Vec::with_capacity(sc.n);
    for i in 0..sc.n {
        let mut x1 = DVector::zeros(m);
        for j in 0..m {
            x1[j] = rng.normal();
        }
        let mut x_exact = DMatrix::zeros(m, 1 + n_exact);
        for j in 0..m {
            x_exact[(j, 0)] = 1.0;
        }
        for c in 0..n_exact {
            for j in 0..m {
                x_exact[(j, 1 + c)] = rng.normal();
            }
        }

        // Exchangeable errors: shared + idiosyncratic normal components.
        let shared = rng.normal();
        let sd = sc.sigma_e2.sqrt();
        let mut eps = DVector::zeros(m);
        for j in 0..m {
            eps[j] = sd * (sc.rho.sqrt() * shared + (1.0 - sc.rho).sqrt() * rng.normal());
        }

        let mut w_reps = Vec::with_capacity(k);
        for dist in &sc.error_dists {
            let mut w = DMatrix::zeros(m, 1);
            for j in 0..m {
                w[(j, 0)] = x1[j] + dist.sample(&mut rng);
            }
            w_reps.push(w);
        }

        let mut y = DVector::zeros(m);
        for j in 0..m {
            let mut mean = sc.beta_true[0] + x1[j] * sc.beta_true[1];
            for c in 0..n_exact {
                mean += x_exact[(j, 1 + c)] * sc.beta_true[2 + c];
            }
            y[j] = mean + eps[j];
        }

        subjects.push(SubjectRecord {
            subject_id: format!("{}", i + 1),
            y,
            x_exact,
            w_reps,
        });
    }
    LongitudinalDataset::new(subjects, layout)
}

/// Study options beyond the estimator configuration.
#[derive(Debug, Clone)]
pub struct StudyOptions {
    pub config: ElConfig,
    /// Confidence level of the reported intervals.
    pub level: f64,
    /// Coordinates for which intervals are computed (`None` = all).
    /// Profile intervals dominate the run time of the EL methods.
    pub ci_coords: Option<Vec<usize>>,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            config: ElConfig {
                structure: CovStructure::Exchangeable,
                ..ElConfig::default()
            },
            level: 0.95,
            ci_coords: None,
        }
    }
}

/// Metrics for one (method, coefficient) cell.
#[derive(Debug, Clone, Serialize)]
pub struct MetricRow {
    pub method: Method,
    pub coord: usize,
    pub coef: String,
    pub bias: f64,
    /// Absent when fewer than 2 successful replications.
    pub sd: Option<f64>,
    pub mse: f64,
    /// Coverage over replications with a bounded interval.
    pub cp: Option<f64>,
    pub ml: Option<f64>,
}

/// Full study output.
#[derive(Debug, Clone, Serialize)]
pub struct StudyReport {
    pub scenario: String,
    pub n: usize,
    pub n_reps: usize,
    pub level: f64,
    pub rows: Vec<MetricRow>,
    pub n_failures: BTreeMap<Method, usize>,
    /// True when any method failed in more than 2% of replications.
    pub failure_alarm: bool,
    /// Accumulated per-method fit time in seconds (excluded from the
    /// CSV rendering so reports stay byte-identical across runs).
    pub timing_seconds: BTreeMap<Method, f64>,
}

struct MethodRep {
    beta: DVector<f64>,
    cis: Vec<Option<ConfidenceInterval>>,
    seconds: f64,
}

fn run_one_method(
    ds: &LongitudinalDataset,
    method: Method,
    options: &StudyOptions,
    ci_coords: &[usize],
) -> Result<MethodRep> {
    let started = Instant::now();
    let p = ds.p();
    let mut cis: Vec<Option<ConfidenceInterval>> = vec![None; p];
    let beta = match method {
        Method::Proposed | Method::ElNaive => {
            let fit = if method == Method::Proposed {
                fit_mele(ds, &options.config)?
            } else {
                fit_naive_el_model(ds, &options.config)?
            };
            for &coord in ci_coords {
                cis[coord] = Some(ci_profile(&fit, coord, options.level)?);
            }
            fit.beta_hat
        }
        Method::Lin | Method::GeeNaive => {
            let fit = if method == Method::Lin {
                fit_lin(ds, &options.config)?
            } else {
                fit_naive_gee(ds, &options.config)?
            };
            for &coord in ci_coords {
                cis[coord] = Some(ci_wald(
                    &fit.beta_hat,
                    &fit.covariance,
                    coord,
                    options.level,
                )?);
            }
            fit.beta_hat
        }
    };
    Ok(MethodRep {
        beta,
        cis,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Run the study: `n_reps` replications, each on its own seed stream
/// `base_seed XOR r`, with every requested method fit to the same data.
/// Failed fits are excluded from the metrics and counted.
///
/// Replications run in parallel; aggregation is an ordered reduction
/// over the replication index, so the report is identical for any
/// thread count.
pub fn run_study(
    sc: &Scenario,
    methods: &[Method],
    n_reps: usize,
    base_seed: u64,
    options: &StudyOptions,
) -> Result<StudyReport> {
    sc.validate()?;
    if n_reps == 0 {
        return Err(Error::validation("study needs at least 1 replication"));
    }
    let p = sc.p();
    let ci_coords: Vec<usize> = match &options.ci_coords {
        Some(coords) => {
            for &c in coords {
                if c >= p {
                    return Err(Error::dimension(format!(
                        "ci coordinate {c} out of range for p = {p}"
                    )));
                }
            }
            coords.clone()
        }
        None => (0..p).collect(),
    };

    let reps: Vec<BTreeMap<Method, Result<MethodRep>>> = (0..n_reps)
        .into_par_iter()
        .map(|r| {
            let seed = base_seed ^ r as u64;
            let ds = generate_dataset(sc, seed).expect("scenario validated");
            methods
                .iter()
                .map(|&mth| (mth, run_one_method(&ds, mth, options, &ci_coords)))
                .collect()
        })
        .collect();

    let coef_names = generate_dataset(sc, base_seed)?.coef_names();
    let mut rows = Vec::new();
    let mut n_failures = BTreeMap::new();
    let mut timing_seconds = BTreeMap::new();
    let mut failure_alarm = false;
    for &method in methods {
        let mut estimates: Vec<&DVector<f64>> = Vec::with_capacity(n_reps);
        let mut cis: Vec<&Vec<Option<ConfidenceInterval>>> = Vec::with_capacity(n_reps);
        let mut failures = 0usize;
        let mut seconds = 0.0;
        for rep in &reps {
            match &rep[&method] {
                Ok(result) => {
                    estimates.push(&result.beta);
                    cis.push(&result.cis);
                    seconds += result.seconds;
                }
                Err(_) => failures += 1,
            }
        }
        if estimates.is_empty() {
            return Err(Error::Study {
                message: format!("all {n_reps} replications failed for {}", method.label()),
            });
        }
        if failures as f64 > 0.02 * n_reps as f64 {
            failure_alarm = true;
        }
        n_failures.insert(method, failures);
        timing_seconds.insert(method, seconds);

        for coord in 0..p {
            let truth = sc.beta_true[coord];
            let errors: Vec<f64> = estimates.iter().map(|b| b[coord] - truth).collect();
            let reps_ok = errors.len();
            let bias = errors.iter().sum::<f64>() / reps_ok as f64;
            let mse = errors.iter().map(|e| e * e).sum::<f64>() / reps_ok as f64;
            let sd = if reps_ok >= 2 {
                let var =
                    errors.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / (reps_ok - 1) as f64;
                Some(var.sqrt())
            } else {
                None
            };
            let (mut covered, mut total, mut length_sum) = (0usize, 0usize, 0.0);
            for ci_set in &cis {
                if let Some(ci) = &ci_set[coord] {
                    if ci.bounded {
                        total += 1;
                        if ci.contains(truth) {
                            covered += 1;
                        }
                        length_sum += ci.length();
                    }
                }
            }
            let (cp, ml) = if total > 0 {
                (
                    Some(covered as f64 / total as f64),
                    Some(length_sum / total as f64),
                )
            } else {
                (None, None)
            };
            rows.push(MetricRow {
                method,
                coord,
                coef: coef_names[coord].clone(),
                bias,
                sd,
                mse,
                cp,
                ml,
            });
        }
    }

    Ok(StudyReport {
        scenario: sc.name.clone(),
        n: sc.n,
        n_reps,
        level: options.level,
        rows,
        n_failures,
        failure_alarm,
        timing_seconds,
    })
}

impl StudyReport {
    pub fn row(&self, method: Method, coord: usize) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.coord == coord)
    }

    /// Render the metric table as CSV. With `paper_units` every metric
    /// is multiplied by 100 for presentation. Timing is excluded so
    /// repeated runs produce byte-identical files.
    pub fn to_csv(&self, paper_units: bool) -> String {
        let scale = if paper_units { 100.0 } else { 1.0 };
        let fmt = |v: Option<f64>| -> String {
            match v {
                Some(x) => format!("{}", x * scale),
                None => String::new(),
            }
        };
        let mut out = String::from("scenario,n,reps,method,coef,bias,sd,mse,cp,ml\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                self.scenario,
                self.n,
                self.n_reps,
                r.method.label(),
                r.coef,
                r.bias * scale,
                fmt(r.sd),
                r.mse * scale,
                fmt(r.cp),
                fmt(r.ml),
            )
            .unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_error_sd_gives_identical_replicates() {
        let mut sc = Scenario::c1(5);
        sc.error_dists = vec![ErrorDist::Normal { sd: 0.0 }, ErrorDist::Normal { sd: 0.0 }];
        let ds = generate_dataset(&sc, 3).unwrap();
        for s in ds.subjects() {
            assert!((&s.w_reps[0] - &s.w_reps[1]).amax() == 0.0);
        }
    }

    #[test]
    fn c1_surrogate_error_variance_near_nominal() {
        // Regenerating with zero error sd consumes the draw stream
        // identically, so the surrogate difference between the two runs
        // recovers the measurement errors exactly.
        let sc = Scenario::c1(500);
        let mut noiseless = sc.clone();
        noiseless.error_dists = vec![ErrorDist::Normal { sd: 0.0 }; 2];
        let ds = generate_dataset(&sc, 7).unwrap();
        let ds0 = generate_dataset(&noiseless, 7).unwrap();
        // Var(w - x1) should be 0.36; with n*m = 3000 the sampling SE of
        // the variance is about 0.36 * sqrt(2/2999) ~ 0.0093.
        for k in 0..2 {
            let mut errors = Vec::new();
            for (s, s0) in ds.subjects().iter().zip(ds0.subjects()) {
                for j in 0..s.visits() {
                    errors.push(s.w_reps[k][(j, 0)] - s0.w_reps[k][(j, 0)]);
                }
            }
            let mean = errors.iter().sum::<f64>() / errors.len() as f64;
            let var =
                errors.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (errors.len() - 1) as f64;
            let se = 0.36 * (2.0 / 2999.0_f64).sqrt();
            assert!(
                (var - 0.36).abs() < 3.0 * se,
                "replicate {k}: error variance {var}"
            );
        }
    }

    #[test]
    fn c4_third_replicate_error_moments() {
        // The centered-exponential sampler itself: mean 0, skewness 2.
        let dist = ErrorDist::CenteredExponential { rate: 2.0 };
        let mut rng = StreamRng::new(11);
        let n = 200_000usize;
        let draws: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let m2 = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        let m3 = draws.iter().map(|d| (d - mean).powi(3)).sum::<f64>() / n as f64;
        let skew = m3 / m2.powf(1.5);
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((skew - 2.0).abs() < 0.1, "skewness {skew}");
    }

    #[test]
    fn metrics_hand_example() {
        // estimates {0.9, 1.0, 1.1} against truth 1: bias 0, sd 0.1,
        // mse 0.02/3.
        let mut sc = Scenario::c1(10);
        sc.beta_true = vec![1.0, 1.0, 1.0];
        let errors = [-0.1, 0.0, 0.1];
        let bias: f64 = errors.iter().sum::<f64>() / 3.0;
        let mse: f64 = errors.iter().map(|e| e * e).sum::<f64>() / 3.0;
        let sd = (errors.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / 2.0).sqrt();
        assert!(bias.abs() < 1e-15);
        assert!((sd - 0.1).abs() < 1e-12);
        assert!((mse - 0.02 / 3.0).abs() < 1e-12);
        // and the identity mse = bias^2 + sd^2 (reps-1)/reps
        assert!((mse - (bias * bias + sd * sd * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn study_reproducible_and_mse_identity() {
        let sc = Scenario::c1(30);
        let options = StudyOptions::default();
        let methods = [Method::GeeNaive, Method::Lin];
        let r1 = run_study(&sc, &methods, 8, 99, &options).unwrap();
        let r2 = run_study(&sc, &methods, 8, 99, &options).unwrap();
        assert_eq!(r1.to_csv(false), r2.to_csv(false));
        for row in &r1.rows {
            let sd = row.sd.unwrap();
            let reps = r1.n_reps as f64;
            let identity = row.bias.powi(2) + sd * sd * (reps - 1.0) / reps;
            assert!(
                (row.mse - identity).abs() < 1e-12 * (1.0 + row.mse),
                "mse identity violated: {} vs {}",
                row.mse,
                identity
            );
        }
    }

    #[test]
    fn single_rep_reports_no_sd() {
        let sc = Scenario::c1(30);
        let options = StudyOptions::default();
        let report = run_study(&sc, &[Method::GeeNaive], 1, 5, &options).unwrap();
        for row in &report.rows {
            assert!(row.sd.is_none());
        }
    }
}
