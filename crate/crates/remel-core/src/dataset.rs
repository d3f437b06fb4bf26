//! Longitudinal data with replicate error-prone covariates.
//!
//! Data are stored per subject: a response vector, the error-free design
//! columns, and `K` replicate surrogate matrices for the error-prone
//! covariates. Construction validates shape and finiteness once; the
//! dataset is immutable afterwards and safe to share across threads.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Classification of a coefficient coordinate in the canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoordKind {
    /// Error-free coordinate (intercept or exact covariate).
    Exact,
    /// Error-prone coordinate; `index` selects the surrogate column.
    ErrorProne { index: usize },
}

impl CoordKind {
    pub fn is_error_prone(self) -> bool {
        matches!(self, CoordKind::ErrorProne { .. })
    }
}

/// Column naming for long-format files.
///
/// Replicate surrogate columns follow the rule `<coord>_r<k>` with
/// `k = 1..=K`. The canonical coefficient order is: intercept (when
/// requested), then the error-prone coordinates, then the exact ones.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnLayout {
    pub subject: String,
    pub visit: String,
    pub response: String,
    pub exact_names: Vec<String>,
    pub errorprone_names: Vec<String>,
    pub has_intercept: bool,
    /// Suffix rule for replicate columns; `<coord>{replicate_suffix}<k>`.
    pub replicate_suffix: String,
}

impl ColumnLayout {
    pub fn new(
        exact_names: Vec<String>,
        errorprone_names: Vec<String>,
        has_intercept: bool,
    ) -> Result<Self> {
        let layout = ColumnLayout {
            subject: "subject".to_string(),
            visit: "visit".to_string(),
            response: "y".to_string(),
            exact_names,
            errorprone_names,
            has_intercept,
            replicate_suffix: "_r".to_string(),
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for name in self.exact_names.iter().chain(self.errorprone_names.iter()) {
            if !seen.insert(name.as_str()) {
                return Err(Error::validation(format!("duplicate column name `{name}`")));
            }
        }
        Ok(())
    }

    /// Name of replicate `k` (1-based) of an error-prone coordinate.
    pub fn replicate_column(&self, coord: &str, k: usize) -> String {
        format!("{coord}{}{k}", self.replicate_suffix)
    }

    /// Number of error-free design columns, including the intercept.
    pub fn p_exact(&self) -> usize {
        self.exact_names.len() + usize::from(self.has_intercept)
    }

    pub fn p_err(&self) -> usize {
        self.errorprone_names.len()
    }

    pub fn p(&self) -> usize {
        self.p_exact() + self.p_err()
    }

    /// Coefficient names in canonical order.
    pub fn coef_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.p());
        if self.has_intercept {
            names.push("intercept".to_string());
        }
        names.extend(self.errorprone_names.iter().cloned());
        names.extend(self.exact_names.iter().cloned());
        names
    }

    /// Coordinate kinds in canonical order.
    pub fn coord_kinds(&self) -> Vec<CoordKind> {
        let mut kinds = Vec::with_capacity(self.p());
        if self.has_intercept {
            kinds.push(CoordKind::Exact);
        }
        for index in 0..self.errorprone_names.len() {
            kinds.push(CoordKind::ErrorProne { index });
        }
        kinds.extend(std::iter::repeat_n(
            CoordKind::Exact,
            self.exact_names.len(),
        ));
        kinds
    }

    /// Parse a flat `key = value` layout file.
    ///
    /// Recognized keys: `subject`, `visit`, `response`, `exact`,
    /// `errorprone`, `intercept`. List values are comma-separated.
    /// Unknown keys are rejected.
    pub fn from_key_value_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_key_value_str(&text)
    }

    pub fn from_key_value_str(text: &str) -> Result<Self> {
        let mut layout = ColumnLayout {
            subject: "subject".to_string(),
            visit: "visit".to_string(),
            response: "y".to_string(),
            exact_names: Vec::new(),
            errorprone_names: Vec::new(),
            has_intercept: false,
            replicate_suffix: "_r".to_string(),
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::validation(format!(
                    "layout line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            let list = |v: &str| -> Vec<String> {
                v.split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            };
            match key {
                "subject" => layout.subject = value.to_string(),
                "visit" => layout.visit = value.to_string(),
                "response" => layout.response = value.to_string(),
                "exact" => layout.exact_names = list(value),
                "errorprone" => layout.errorprone_names = list(value),
                "intercept" => {
                    layout.has_intercept = match value {
                        "true" | "1" | "yes" => true,
                        "false" | "0" | "no" => false,
                        other => {
                            return Err(Error::validation(format!(
                                "layout key `intercept`: expected true/false, got `{other}`"
                            )))
                        }
                    }
                }
                other => {
                    return Err(Error::validation(format!("unknown layout key `{other}`")));
                }
            }
        }
        layout.validate()?;
        Ok(layout)
    }
}

/// One subject's data: `m_i` visits of the response, the error-free
/// design block (intercept column first when requested), and `K`
/// replicate surrogate matrices for the error-prone covariates.
#[derive(Debug, Clone)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub y: DVector<f64>,
    /// `m_i x p_exact`; column 0 is the intercept when requested.
    pub x_exact: DMatrix<f64>,
    /// `K` matrices, each `m_i x p_err`.
    pub w_reps: Vec<DMatrix<f64>>,
}

impl SubjectRecord {
    pub fn visits(&self) -> usize {
        self.y.len()
    }

    fn validate(&self) -> Result<()> {
        let m = self.visits();
        if m == 0 {
            return Err(Error::validation(format!(
                "subject {}: no observations",
                self.subject_id
            )));
        }
        if self.x_exact.nrows() != m {
            return Err(Error::validation(format!(
                "subject {}: exact covariate rows {} != visits {m}",
                self.subject_id,
                self.x_exact.nrows()
            )));
        }
        for (k, w) in self.w_reps.iter().enumerate() {
            if w.nrows() != m {
                return Err(Error::validation(format!(
                    "subject {}: replicate {} rows {} != visits {m}",
                    self.subject_id,
                    k + 1,
                    w.nrows()
                )));
            }
        }
        let finite = self.y.iter().all(|v| v.is_finite())
            && self.x_exact.iter().all(|v| v.is_finite())
            && self.w_reps.iter().all(|w| w.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::validation(format!(
                "subject {}: non-finite value",
                self.subject_id
            )));
        }
        Ok(())
    }
}

/// Validated longitudinal dataset.
#[derive(Debug, Clone)]
pub struct LongitudinalDataset {
    subjects: Vec<SubjectRecord>,
    layout: ColumnLayout,
}

impl LongitudinalDataset {
    pub fn new(subjects: Vec<SubjectRecord>, layout: ColumnLayout) -> Result<Self> {
        layout.validate()?;
        if subjects.is_empty() {
            return Err(Error::validation("dataset has no subjects"));
        }
        let p_err = layout.p_err();
        let k = subjects[0].w_reps.len();
        if p_err > 0 && k < 2 {
            return Err(Error::validation(
                "error-prone covariates require at least 2 replicate measurements",
            ));
        }
        for s in &subjects {
            s.validate()?;
            if s.w_reps.len() != k {
                return Err(Error::validation(format!(
                    "subject {}: {} replicates, expected {k}",
                    s.subject_id,
                    s.w_reps.len()
                )));
            }
            if s.x_exact.ncols() != layout.p_exact() {
                return Err(Error::validation(format!(
                    "subject {}: {} exact columns, layout expects {}",
                    s.subject_id,
                    s.x_exact.ncols(),
                    layout.p_exact()
                )));
            }
            for w in &s.w_reps {
                if w.ncols() != p_err {
                    return Err(Error::validation(format!(
                        "subject {}: {} error-prone columns, layout expects {p_err}",
                        s.subject_id,
                        w.ncols()
                    )));
                }
            }
        }
        Ok(LongitudinalDataset { subjects, layout })
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn layout(&self) -> &ColumnLayout {
        &self.layout
    }

    /// Number of subjects `n`.
    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    /// Replicate count `K` (0 when there are no error-prone covariates).
    pub fn replicate_count(&self) -> usize {
        self.subjects[0].w_reps.len()
    }

    pub fn p(&self) -> usize {
        self.layout.p()
    }

    /// Total observation count over all subjects.
    pub fn total_obs(&self) -> usize {
        self.subjects.iter().map(|s| s.visits()).sum()
    }

    pub fn max_visits(&self) -> usize {
        self.subjects.iter().map(|s| s.visits()).max().unwrap_or(0)
    }

    pub fn coef_names(&self) -> Vec<String> {
        self.layout.coef_names()
    }

    pub fn coord_kinds(&self) -> Vec<CoordKind> {
        self.layout.coord_kinds()
    }

    /// Design matrix of subject `i` built from replicate `k` (1-based)
    /// in canonical coordinate order.
    pub fn design_matrix(&self, i: usize, k: usize) -> DMatrix<f64> {
        let s = &self.subjects[i];
        self.assemble_design(s, Some(&s.w_reps[k - 1]))
    }

    /// Design matrix of subject `i` with error-prone columns replaced by
    /// the per-observation average over replicates.
    pub fn averaged_design(&self, i: usize) -> DMatrix<f64> {
        let s = &self.subjects[i];
        if s.w_reps.is_empty() {
            return self.assemble_design(s, None);
        }
        let mut avg = s.w_reps[0].clone();
        for w in &s.w_reps[1..] {
            avg += w;
        }
        avg /= s.w_reps.len() as f64;
        self.assemble_design(s, Some(&avg))
    }

    fn assemble_design(&self, s: &SubjectRecord, w: Option<&DMatrix<f64>>) -> DMatrix<f64> {
        let m = s.visits();
        let p = self.p();
        let p_err = self.layout.p_err();
        let mut z = DMatrix::zeros(m, p);
        let mut col = 0;
        if self.layout.has_intercept {
            z.set_column(col, &s.x_exact.column(0));
            col += 1;
        }
        if let Some(w) = w {
            for j in 0..p_err {
                z.set_column(col, &w.column(j));
                col += 1;
            }
        }
        let skip = usize::from(self.layout.has_intercept);
        for j in 0..self.layout.exact_names.len() {
            z.set_column(col, &s.x_exact.column(skip + j));
            col += 1;
        }
        z
    }

    /// Center the named columns by their grand means.
    ///
    /// An error-prone coordinate is centered by the pooled mean over all
    /// of its replicate columns and visits, so the replicate columns stay
    /// comparable. The response may be centered too.
    pub fn center_columns(&self, columns: &[&str]) -> Result<LongitudinalDataset> {
        let mut out = self.clone();
        for &name in columns {
            if name == self.layout.response {
                let mut acc = MeanAcc::default();
                for s in &self.subjects {
                    s.y.iter().for_each(|&v| acc.push(v));
                }
                let mean = acc.mean();
                for s in &mut out.subjects {
                    s.y.iter_mut().for_each(|v| *v -= mean);
                }
            } else if let Some(pos) = self.layout.errorprone_names.iter().position(|c| c == name) {
                let mut acc = MeanAcc::default();
                for s in &self.subjects {
                    for w in &s.w_reps {
                        w.column(pos).iter().for_each(|&v| acc.push(v));
                    }
                }
                let mean = acc.mean();
                for s in &mut out.subjects {
                    for w in &mut s.w_reps {
                        w.column_mut(pos).iter_mut().for_each(|v| *v -= mean);
                    }
                }
            } else if let Some(pos) = self.layout.exact_names.iter().position(|c| c == name) {
                let col = pos + usize::from(self.layout.has_intercept);
                let mut acc = MeanAcc::default();
                for s in &self.subjects {
                    s.x_exact.column(col).iter().for_each(|&v| acc.push(v));
                }
                let mean = acc.mean();
                for s in &mut out.subjects {
                    s.x_exact
                        .column_mut(col)
                        .iter_mut()
                        .for_each(|v| *v -= mean);
                }
            } else {
                return Err(Error::Schema {
                    column: name.to_string(),
                });
            }
        }
        Ok(out)
    }

    /// Replicate-centered differences for one error-prone coordinate:
    /// the `k`-th surrogate minus the per-observation mean over all
    /// replicates, one value per (subject, visit).
    pub fn replicate_centered_difference(&self, coord: &str, k: usize) -> Result<Vec<f64>> {
        let pos = self
            .layout
            .errorprone_names
            .iter()
            .position(|c| c == coord)
            .ok_or_else(|| Error::validation(format!("column `{coord}` is not error-prone")))?;
        let kk = self.replicate_count();
        if k < 1 || k > kk {
            return Err(Error::validation(format!(
                "replicate index {k} out of range 1..={kk}"
            )));
        }
        let mut out = Vec::with_capacity(self.total_obs());
        for s in &self.subjects {
            for j in 0..s.visits() {
                let mean: f64 = s.w_reps.iter().map(|w| w[(j, pos)]).sum::<f64>() / kk as f64;
                out.push(s.w_reps[k - 1][(j, pos)] - mean);
            }
        }
        Ok(out)
    }
}

#[derive(Default)]
struct MeanAcc {
    sum: f64,
    count: usize,
}

impl MeanAcc {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

/// Load a long-format CSV (one row per subject-visit).
///
/// Required columns: subject id, visit index, response, every exact
/// column, and `<coord>_r<k>` for `k = 1..=K` for every error-prone
/// coordinate. Subjects are grouped by id in order of first appearance
/// and visits are ordered by the visit column.
pub fn load_csv(path: impl AsRef<Path>, layout: &ColumnLayout) -> Result<LongitudinalDataset> {
    let text = std::fs::read_to_string(path)?;
    load_csv_str(&text, layout)
}

pub fn load_csv_str(text: &str, layout: &ColumnLayout) -> Result<LongitudinalDataset> {
    layout.validate()?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::validation("empty file: header row required"))?;
    let headers: Vec<&str> = header.split(',').map(str::trim).collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Schema {
                column: name.to_string(),
            })
    };

    let subject_col = col(&layout.subject)?;
    let visit_col = col(&layout.visit)?;
    let response_col = col(&layout.response)?;
    let exact_cols: Vec<usize> = layout
        .exact_names
        .iter()
        .map(|n| col(n))
        .collect::<Result<_>>()?;

    // Infer K from the header: count consecutive `<coord>_r<k>` columns,
    // identical across error-prone coordinates.
    let mut k_count = 0usize;
    if !layout.errorprone_names.is_empty() {
        let first = &layout.errorprone_names[0];
        while headers
            .iter()
            .any(|h| *h == layout.replicate_column(first, k_count + 1))
        {
            k_count += 1;
        }
        if k_count < 2 {
            return Err(Error::Schema {
                column: layout.replicate_column(first, k_count + 1),
            });
        }
    }
    let mut replicate_cols = Vec::with_capacity(k_count); // [k][coord]
    for k in 1..=k_count {
        let cols: Vec<usize> = layout
            .errorprone_names
            .iter()
            .map(|c| col(&layout.replicate_column(c, k)))
            .collect::<Result<_>>()?;
        replicate_cols.push(cols);
    }

    struct RawRow {
        visit: f64,
        y: f64,
        exact: Vec<f64>,
        reps: Vec<Vec<f64>>, // [k][coord]
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_subject: BTreeMap<String, Vec<RawRow>> = BTreeMap::new();

    for (lineno, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let row_no = lineno; // 1-based data row (header is line 1, enumerate is 0-based)
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() != headers.len() {
            return Err(Error::Parse {
                row: row_no,
                message: format!("expected {} fields, found {}", headers.len(), fields.len()),
            });
        }
        let subject_id = fields[subject_col].to_string();
        let cell = |idx: usize| -> Result<f64> {
            let s = fields[idx];
            if s.is_empty() {
                return Err(Error::validation(format!(
                    "subject {subject_id}: missing value in column `{}` (data row {row_no})",
                    headers[idx]
                )));
            }
            let v: f64 = s.parse().map_err(|_| Error::Parse {
                row: row_no,
                message: format!("column `{}`: cannot parse `{s}`", headers[idx]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: row_no,
                    message: format!("column `{}`: non-finite value `{s}`", headers[idx]),
                });
            }
            Ok(v)
        };

        let row = RawRow {
            visit: cell(visit_col)?,
            y: cell(response_col)?,
            exact: exact_cols.iter().map(|&c| cell(c)).collect::<Result<_>>()?,
            reps: replicate_cols
                .iter()
                .map(|cols| cols.iter().map(|&c| cell(c)).collect::<Result<Vec<_>>>())
                .collect::<Result<_>>()?,
        };
        if !by_subject.contains_key(&subject_id) {
            order.push(subject_id.clone());
        }
        by_subject.entry(subject_id).or_default().push(row);
    }

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = by_subject.remove(&id).unwrap();
        rows.sort_by(|a, b| a.visit.total_cmp(&b.visit));
        let m = rows.len();
        let p_exact = layout.p_exact();
        let p_err = layout.p_err();
        let y = DVector::from_iterator(m, rows.iter().map(|r| r.y));
        let mut x_exact = DMatrix::zeros(m, p_exact);
        for (j, r) in rows.iter().enumerate() {
            let mut c = 0;
            if layout.has_intercept {
                x_exact[(j, 0)] = 1.0;
                c = 1;
            }
            for (e, &v) in r.exact.iter().enumerate() {
                x_exact[(j, c + e)] = v;
            }
        }
        let mut w_reps = Vec::with_capacity(k_count);
        for k in 0..k_count {
            let mut w = DMatrix::zeros(m, p_err);
            for (j, r) in rows.iter().enumerate() {
                for c in 0..p_err {
                    w[(j, c)] = r.reps[k][c];
                }
            }
            w_reps.push(w);
        }
        subjects.push(SubjectRecord {
            subject_id: id,
            y,
            x_exact,
            w_reps,
        });
    }

    LongitudinalDataset::new(subjects, layout.clone())
}

/// Write a dataset back to long-format CSV. Numeric cells use the
/// shortest round-trip representation, so `load_csv(write_csv(ds))`
/// reproduces the values exactly.
pub fn write_csv(ds: &LongitudinalDataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_csv_string(ds))?;
    Ok(())
}

pub fn to_csv_string(ds: &LongitudinalDataset) -> String {
    let layout = ds.layout();
    let mut header = vec![
        layout.subject.clone(),
        layout.visit.clone(),
        layout.response.clone(),
    ];
    header.extend(layout.exact_names.iter().cloned());
    for coord in &layout.errorprone_names {
        for k in 1..=ds.replicate_count() {
            header.push(layout.replicate_column(coord, k));
        }
    }
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    let skip = usize::from(layout.has_intercept);
    for s in ds.subjects() {
        for j in 0..s.visits() {
            write!(out, "{},{},{}", s.subject_id, j + 1, s.y[j]).unwrap();
            for e in 0..layout.exact_names.len() {
                write!(out, ",{}", s.x_exact[(j, skip + e)]).unwrap();
            }
            for c in 0..layout.p_err() {
                for w in &s.w_reps {
                    write!(out, ",{}", w[(j, c)]).unwrap();
                }
            }
            out.push('\n');
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Replicate-difference skewness diagnostic
// ---------------------------------------------------------------------------

/// Result of the skewness z-test on a sample.
#[derive(Debug, Clone, Serialize)]
pub struct SkewnessDiagnostic {
    pub coordinate: String,
    pub z_statistic: f64,
    pub p_value: f64,
    pub n_obs: usize,
}

/// Skewness z-test: the sample skewness `g1` is transformed to an
/// approximately standard normal statistic and tested two-sided.
///
/// Requires at least 9 observations for the transformation to be valid.
pub fn dagostino_skewness_test(values: &[f64], coordinate: &str) -> Result<SkewnessDiagnostic> {
    let n = values.len();
    if n < 9 {
        return Err(Error::InsufficientSample {
            message: format!("skewness test needs at least 9 observations, got {n}"),
        });
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / nf;
    let g1 = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };

    let y = g1 * ((nf + 1.0) * (nf + 3.0) / (6.0 * (nf - 2.0))).sqrt();
    let beta2 = 3.0 * (nf * nf + 27.0 * nf - 70.0) * (nf + 1.0) * (nf + 3.0)
        / ((nf - 2.0) * (nf + 5.0) * (nf + 7.0) * (nf + 9.0));
    let w2 = -1.0 + (2.0 * (beta2 - 1.0)).sqrt();
    let delta = 1.0 / (0.5 * w2.ln()).sqrt();
    let alpha = (2.0 / (w2 - 1.0)).sqrt();
    let z = delta * (y / alpha).asinh();

    let normal = Normal::standard();
    let p_value = 2.0 * normal.cdf(-z.abs());
    Ok(SkewnessDiagnostic {
        coordinate: coordinate.to_string(),
        z_statistic: z,
        p_value,
        n_obs: n,
    })
}

/// Skewness diagnostics for every error-prone coordinate and replicate,
/// computed on the replicate-centered differences.
pub fn diagnose_replicates(ds: &LongitudinalDataset) -> Result<Vec<SkewnessDiagnostic>> {
    let mut out = Vec::new();
    for coord in &ds.layout().errorprone_names {
        for k in 1..=ds.replicate_count() {
            let values = ds.replicate_centered_difference(coord, k)?;
            let label = format!("c{coord}({k})");
            out.push(dagostino_skewness_test(&values, &label)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_subject_csv() -> String {
        "subject,visit,y,x2,w1_r1,w1_r2\n\
         1,1,1.5,0.2,1.1,0.9\n\
         1,2,2.5,0.4,1.3,1.5\n\
         1,3,3.5,0.6,1.6,1.4\n\
         2,1,0.5,-0.2,0.1,0.3\n\
         2,2,1.0,-0.4,0.2,0.0\n\
         2,3,1.5,-0.6,0.6,0.4\n"
            .to_string()
    }

    fn basic_layout() -> ColumnLayout {
        let mut layout = ColumnLayout::new(vec!["x2".into()], vec!["w1".into()], true).unwrap();
        layout.subject = "subject".into();
        layout
    }

    #[test]
    fn load_two_subject_file() {
        let ds = load_csv_str(&two_subject_csv(), &basic_layout()).unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.replicate_count(), 2);
        assert_eq!(ds.layout().p_err(), 1);
        assert_eq!(ds.layout().p_exact(), 2); // intercept + x2
        assert_eq!(ds.p(), 3);
        for s in ds.subjects() {
            assert_eq!(s.visits(), 3);
        }
        // canonical order: intercept, w1, x2
        assert_eq!(ds.coef_names(), vec!["intercept", "w1", "x2"]);
        let z = ds.design_matrix(0, 1);
        assert_eq!(z[(0, 0)], 1.0);
        assert_eq!(z[(0, 1)], 1.1);
        assert_eq!(z[(0, 2)], 0.2);
    }

    #[test]
    fn missing_replicate_cell_names_subject() {
        let text = "subject,visit,y,x2,w1_r1,w1_r2\n\
                    1,1,1.5,0.2,1.1,0.9\n\
                    7,1,0.5,-0.2,0.1,\n";
        let err = load_csv_str(text, &basic_layout()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("subject 7"), "got: {msg}");
    }

    #[test]
    fn missing_column_is_schema_error() {
        let text = "subject,visit,y,x2,w1_r1\n1,1,1.0,0.0,0.0\n";
        let err = load_csv_str(text, &basic_layout()).unwrap_err();
        match err {
            Error::Schema { column } => assert_eq!(column, "w1_r2"),
            other => panic!("expected schema error, got {other}"),
        }
    }

    #[test]
    fn non_finite_value_reports_row() {
        let text = "subject,visit,y,x2,w1_r1,w1_r2\n\
                    1,1,1.5,0.2,1.1,0.9\n\
                    1,2,nan,0.4,1.3,1.5\n";
        let err = load_csv_str(text, &basic_layout()).unwrap_err();
        match err {
            Error::Parse { row, .. } => assert_eq!(row, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn lean_shaped_file_loads() {
        // Two error-prone coordinates with 2 replicates each, nine exact
        // covariates, no intercept (all columns pre-centered upstream).
        let exact: Vec<String> = [
            "age",
            "gender",
            "race",
            "education",
            "group",
            "t1",
            "t2",
            "group_t1",
            "group_t2",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let layout = ColumnLayout::new(exact, vec!["sbp".into(), "dbp".into()], false).unwrap();
        let mut text = String::from(
            "subject,visit,y,age,gender,race,education,group,t1,t2,group_t1,group_t2,\
             sbp_r1,sbp_r2,dbp_r1,dbp_r2\n",
        );
        for subj in 1..=3 {
            for visit in 1..=3 {
                text.push_str(&format!(
                    "{subj},{visit},0.1,0.2,1,0,1,1,{},{},0,0,1.2,1.3,0.7,0.8\n",
                    i32::from(visit == 2),
                    i32::from(visit == 3),
                ));
            }
        }
        let ds = load_csv_str(&text, &layout).unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.replicate_count(), 2);
        assert_eq!(ds.layout().p_err(), 2);
        assert_eq!(ds.layout().p_exact(), 9);
        assert_eq!(ds.p(), 11);
    }

    #[test]
    fn center_exact_column() {
        let ds = load_csv_str(
            "subject,visit,y,x2,w1_r1,w1_r2\n\
             1,1,0,1,0,0\n1,2,0,2,0,0\n1,3,0,3,0,0\n",
            &basic_layout(),
        )
        .unwrap();
        let centered = ds.center_columns(&["x2"]).unwrap();
        let vals: Vec<f64> = centered.subjects()[0]
            .x_exact
            .column(1)
            .iter()
            .copied()
            .collect();
        assert_eq!(vals, vec![-1.0, 0.0, 1.0]);
        // idempotence
        let twice = centered.center_columns(&["x2"]).unwrap();
        for (a, b) in twice.subjects()[0]
            .x_exact
            .column(1)
            .iter()
            .zip(centered.subjects()[0].x_exact.column(1).iter())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn center_errorprone_uses_pooled_mean() {
        let ds = load_csv_str(
            "subject,visit,y,x2,w1_r1,w1_r2\n\
             1,1,0,0,1,3\n1,2,0,0,2,4\n1,3,0,0,3,5\n",
            &basic_layout(),
        )
        .unwrap();
        let centered = ds.center_columns(&["w1"]).unwrap();
        let s = &centered.subjects()[0];
        let mut pooled = 0.0;
        for w in &s.w_reps {
            pooled += w.column(0).sum();
        }
        assert!(pooled.abs() < 1e-12, "pooled mean {pooled}");
        // both replicates shifted by the same pooled mean (3.0)
        assert_eq!(s.w_reps[0][(0, 0)], -2.0);
        assert_eq!(s.w_reps[1][(0, 0)], 0.0);
    }

    #[test]
    fn center_unknown_column_errors() {
        let ds = load_csv_str(&two_subject_csv(), &basic_layout()).unwrap();
        assert!(matches!(
            ds.center_columns(&["nope"]),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn replicate_centered_difference_arithmetic() {
        let ds = load_csv_str(
            "subject,visit,y,x2,w1_r1,w1_r2\n\
             1,1,0,0,10,8\n1,2,0,0,1,1\n1,3,0,0,2,0\n",
            &basic_layout(),
        )
        .unwrap();
        let d1 = ds.replicate_centered_difference("w1", 1).unwrap();
        let d2 = ds.replicate_centered_difference("w1", 2).unwrap();
        assert_eq!(d1[0], 1.0);
        assert_eq!(d2[0], -1.0);
        for (a, b) in d1.iter().zip(d2.iter()) {
            assert!((a + b).abs() < 1e-15);
        }
        assert!(ds.replicate_centered_difference("x2", 1).is_err());
    }

    #[test]
    fn centered_difference_constant_replicates_is_zero() {
        let layout = basic_layout();
        let text = "subject,visit,y,x2,w1_r1,w1_r2,w1_r3\n\
                    1,1,0,0,4,4,4\n1,2,0,0,4,4,4\n1,3,0,0,4,4,4\n\
                    2,1,0,0,4,4,4\n2,2,0,0,4,4,4\n2,3,0,0,4,4,4\n";
        let ds = load_csv_str(text, &layout).unwrap();
        assert_eq!(ds.replicate_count(), 3);
        for k in 1..=3 {
            for v in ds.replicate_centered_difference("w1", k).unwrap() {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn skewness_zero_for_symmetric_sample() {
        let mut values = Vec::new();
        for _ in 0..20 {
            values.extend_from_slice(&[-2.0, -1.0, 0.0, 1.0, 2.0]);
        }
        let diag = dagostino_skewness_test(&values, "sym").unwrap();
        assert!(diag.z_statistic.abs() < 1e-12);
        assert!(diag.p_value > 0.9);
    }

    #[test]
    fn skewness_requires_nine_observations() {
        let values = vec![0.0; 8];
        assert!(matches!(
            dagostino_skewness_test(&values, "x"),
            Err(Error::InsufficientSample { .. })
        ));
    }

    #[test]
    fn csv_round_trip_exact() {
        let ds = load_csv_str(&two_subject_csv(), &basic_layout()).unwrap();
        let text = to_csv_string(&ds);
        let ds2 = load_csv_str(&text, &basic_layout()).unwrap();
        for (a, b) in ds.subjects().iter().zip(ds2.subjects()) {
            assert_eq!(a.subject_id, b.subject_id);
            assert!((&a.y - &b.y).amax() < 1e-12);
            assert!((&a.x_exact - &b.x_exact).amax() < 1e-12);
            for (wa, wb) in a.w_reps.iter().zip(&b.w_reps) {
                assert!((wa - wb).amax() < 1e-12);
            }
        }
    }
}
