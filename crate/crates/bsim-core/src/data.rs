//! Longitudinal dataset types, CSV ingestion, time transforms, and the
//! model/prior/MCMC configuration types shared across the crate.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{cholesky, SpdMatrix};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("missing column '{0}' in header")]
    MissingColumn(String),
    #[error("line {line}: cannot parse {column}='{value}'")]
    Parse {
        line: u64,
        column: String,
        value: String,
    },
    #[error("subject '{id}': duplicate time {time}")]
    DuplicateTime { id: String, time: f64 },
    #[error("subject '{id}': covariate '{column}' varies within subject")]
    CovariateVaries { id: String, column: String },
    #[error("dataset is empty (no usable rows)")]
    Empty,
    #[error("subject '{id}': {reason}")]
    InvalidSubject { id: String, reason: String },
    #[error("log transform requires positive times; offending subjects: {0:?}")]
    NonPositiveTimes(Vec<String>),
    #[error("time transform already applied")]
    AlreadyTransformed,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown covariate '{0}'")]
    UnknownCovariate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeTransform {
    None,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplineFamily {
    NaturalCubic,
    BSpline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotStrategy {
    EqualSpacing,
    Quantile,
}

/// Per-subject observation series plus time-invariant covariates.
/// `covariates[0]` is always the constant 1 (intercept column).
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub times: Vec<f64>,
    pub responses: Vec<f64>,
    pub covariates: Vec<f64>,
}

/// Immutable longitudinal dataset: subjects ordered canonically by id,
/// observations sorted by time within subject.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    subjects: Vec<SubjectRecord>,
    n_obs_total: usize,
    covariate_names: Vec<String>,
    time_transform_applied: TimeTransform,
    dropped_rows: usize,
}

impl LongitudinalDataset {
    /// Validates and canonicalizes records: subjects sorted by id, rows
    /// sorted by time within subject. `covariate_names` excludes the
    /// intercept; every record must carry `1 + covariate_names.len()`
    /// covariate values with a leading 1.
    pub fn from_records(
        mut records: Vec<SubjectRecord>,
        covariate_names: Vec<String>,
    ) -> Result<Self, DataError> {
        if records.is_empty() {
            return Err(DataError::Empty);
        }
        let p = 1 + covariate_names.len();
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let mut n_obs_total = 0usize;
        for rec in &mut records {
            if rec.times.len() != rec.responses.len() || rec.times.is_empty() {
                return Err(DataError::InvalidSubject {
                    id: rec.id.clone(),
                    reason: format!(
                        "times ({}) and responses ({}) must be equal-length and non-empty",
                        rec.times.len(),
                        rec.responses.len()
                    ),
                });
            }
            if rec.covariates.len() != p {
                return Err(DataError::InvalidSubject {
                    id: rec.id.clone(),
                    reason: format!("expected {} covariate values, got {}", p, rec.covariates.len()),
                });
            }
            if rec.covariates[0] != 1.0 {
                return Err(DataError::InvalidSubject {
                    id: rec.id.clone(),
                    reason: "first covariate entry must be the intercept constant 1".into(),
                });
            }
            let mut order: Vec<usize> = (0..rec.times.len()).collect();
            order.sort_by(|&a, &b| rec.times[a].partial_cmp(&rec.times[b]).unwrap());
            rec.times = order.iter().map(|&k| rec.times[k]).collect();
            rec.responses = order.iter().map(|&k| rec.responses[k]).collect();
            for w in rec.times.windows(2) {
                if w[1] <= w[0] {
                    return Err(DataError::DuplicateTime {
                        id: rec.id.clone(),
                        time: w[1],
                    });
                }
            }
            if rec
                .times
                .iter()
                .chain(rec.responses.iter())
                .chain(rec.covariates.iter())
                .any(|v| !v.is_finite())
            {
                return Err(DataError::InvalidSubject {
                    id: rec.id.clone(),
                    reason: "non-finite value".into(),
                });
            }
            n_obs_total += rec.times.len();
        }
        Ok(LongitudinalDataset {
            subjects: records,
            n_obs_total,
            covariate_names,
            time_transform_applied: TimeTransform::None,
            dropped_rows: 0,
        })
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_obs_total(&self) -> usize {
        self.n_obs_total
    }

    /// Covariate labels excluding the implicit intercept.
    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn time_transform_applied(&self) -> TimeTransform {
        self.time_transform_applied
    }

    /// Rows dropped at load because the response cell was empty.
    pub fn dropped_rows(&self) -> usize {
        self.dropped_rows
    }

    /// All observation times, pooled in subject order.
    pub fn pooled_times(&self) -> Vec<f64> {
        self.subjects
            .iter()
            .flat_map(|s| s.times.iter().copied())
            .collect()
    }
}

/// Column-name mapping for CSV ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub id: String,
    pub time: String,
    pub response: String,
    #[serde(default)]
    pub covariates: Vec<String>,
}

/// Loads a long-format CSV (one observation per row). Rows with an empty
/// response cell are dropped and counted; any other unparseable cell is an
/// error naming the line. Covariates must be constant within a subject.
pub fn load_dataset(path: &Path, schema: &CsvSchema) -> Result<LongitudinalDataset, DataError> {
    let path_str = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::Csv {
            path: path_str.clone(),
            source: e,
        })?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::Csv {
            path: path_str.clone(),
            source: e,
        })?
        .clone();
    let col = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let id_idx = col(&schema.id)?;
    let time_idx = col(&schema.time)?;
    let resp_idx = col(&schema.response)?;
    let cov_idx: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<_, _>>()?;

    struct Partial {
        rows: Vec<(f64, f64)>,
        covariates: Vec<f64>,
    }
    let mut by_id: BTreeMap<String, Partial> = BTreeMap::new();
    let mut dropped_rows = 0usize;

    for record in reader.records() {
        let record = record.map_err(|e| DataError::Csv {
            path: path_str.clone(),
            source: e,
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_cell = |idx: usize, column: &str| -> Result<f64, DataError> {
            let raw = record.get(idx).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::Parse {
                    line,
                    column: column.to_string(),
                    value: raw.to_string(),
                })
        };
        let response_raw = record.get(resp_idx).unwrap_or("");
        if response_raw.is_empty() || response_raw.eq_ignore_ascii_case("na") {
            dropped_rows += 1;
            continue;
        }
        let id = record.get(id_idx).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(DataError::Parse {
                line,
                column: schema.id.clone(),
                value: String::new(),
            });
        }
        let time = parse_cell(time_idx, &schema.time)?;
        let response = parse_cell(resp_idx, &schema.response)?;
        let covs: Vec<f64> = cov_idx
            .iter()
            .zip(schema.covariates.iter())
            .map(|(&idx, name)| parse_cell(idx, name))
            .collect::<Result<_, _>>()?;

        match by_id.get_mut(&id) {
            None => {
                by_id.insert(
                    id,
                    Partial {
                        rows: vec![(time, response)],
                        covariates: covs,
                    },
                );
            }
            Some(partial) => {
                if partial.rows.iter().any(|&(t, _)| t == time) {
                    return Err(DataError::DuplicateTime { id, time });
                }
                for (k, (&seen, new)) in partial.covariates.iter().zip(covs.iter()).enumerate() {
                    if seen != *new {
                        return Err(DataError::CovariateVaries {
                            id,
                            column: schema.covariates[k].clone(),
                        });
                    }
                }
                partial.rows.push((time, response));
            }
        }
    }

    let records: Vec<SubjectRecord> = by_id
        .into_iter()
        .map(|(id, partial)| {
            let (times, responses) = partial.rows.iter().copied().unzip();
            let mut covariates = Vec::with_capacity(1 + partial.covariates.len());
            covariates.push(1.0);
            covariates.extend(partial.covariates);
            SubjectRecord {
                id,
                times,
                responses,
                covariates,
            }
        })
        .collect();
    let mut ds = LongitudinalDataset::from_records(records, schema.covariates.clone())?;
    ds.dropped_rows = dropped_rows;
    Ok(ds)
}

/// Pooled per-variable summary (min, quartiles, mean, max, n-1 SD).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariableSummary {
    pub name: String,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DescriptiveStats {
    pub variables: Vec<VariableSummary>,
}

pub(crate) fn quantile(sorted: &[f64], p: f64) -> f64 {
    // Linear interpolation between order statistics (R type 7).
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize_values(name: &str, values: &[f64]) -> VariableSummary {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    VariableSummary {
        name: name.to_string(),
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        mean,
        q3: quantile(&sorted, 0.75),
        max: sorted[n - 1],
        sd,
    }
}

/// Descriptive statistics over all observations pooled (covariates repeat
/// once per observation of their subject).
pub fn summarize_dataset(ds: &LongitudinalDataset) -> DescriptiveStats {
    let times = ds.pooled_times();
    let responses: Vec<f64> = ds
        .subjects()
        .iter()
        .flat_map(|s| s.responses.iter().copied())
        .collect();
    let mut variables = vec![
        summarize_values("time", &times),
        summarize_values("response", &responses),
    ];
    for (k, name) in ds.covariate_names().iter().enumerate() {
        let pooled: Vec<f64> = ds
            .subjects()
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.covariates[k + 1], s.times.len()))
            .collect();
        variables.push(summarize_values(name, &pooled));
    }
    DescriptiveStats { variables }
}

/// Returns a new dataset with transformed times. Log requires all times
/// positive and a not-yet-transformed dataset.
pub fn apply_time_transform(
    ds: &LongitudinalDataset,
    transform: TimeTransform,
) -> Result<LongitudinalDataset, DataError> {
    match transform {
        TimeTransform::None => Ok(ds.clone()),
        TimeTransform::Log => {
            if ds.time_transform_applied == TimeTransform::Log {
                return Err(DataError::AlreadyTransformed);
            }
            let offending: Vec<String> = ds
                .subjects
                .iter()
                .filter(|s| s.times.iter().any(|&t| t <= 0.0))
                .map(|s| s.id.clone())
                .collect();
            if !offending.is_empty() {
                return Err(DataError::NonPositiveTimes(offending));
            }
            let mut out = ds.clone();
            for s in &mut out.subjects {
                for t in &mut s.times {
                    *t = t.ln();
                }
            }
            out.time_transform_applied = TimeTransform::Log;
            Ok(out)
        }
    }
}

/// Model structure settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub spline_family: SplineFamily,
    pub n_interior_knots: usize,
    pub time_transform: TimeTransform,
    pub use_covariates: bool,
    #[serde(default)]
    pub covariate_selection: Vec<String>,
    #[serde(default = "default_knot_strategy")]
    pub knot_strategy: KnotStrategy,
    /// Pin the intercept column of the covariate coefficient matrix at zero.
    #[serde(default)]
    pub zero_intercept_row: bool,
    /// Sample the random-effects covariance as D·R·D with an extra M-H step
    /// on the log-scale diagonal, instead of a plain inverse Wishart draw.
    #[serde(default)]
    pub scaled_inverse_wishart: bool,
}

fn default_knot_strategy() -> KnotStrategy {
    KnotStrategy::EqualSpacing
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            spline_family: SplineFamily::NaturalCubic,
            n_interior_knots: 3,
            time_transform: TimeTransform::None,
            use_covariates: false,
            covariate_selection: Vec::new(),
            knot_strategy: KnotStrategy::EqualSpacing,
            zero_intercept_row: false,
            scaled_inverse_wishart: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, ds: &LongitudinalDataset) -> Result<(), DataError> {
        if self.use_covariates {
            if self.covariate_selection.is_empty() {
                return Err(DataError::InvalidConfig(
                    "use_covariates is set but covariate_selection is empty".into(),
                ));
            }
            for name in &self.covariate_selection {
                if !ds.covariate_names().iter().any(|c| c == name) {
                    return Err(DataError::UnknownCovariate(name.clone()));
                }
            }
        }
        Ok(())
    }
}

/// Hyperparameters of the priors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorConfig {
    pub sigma2_shape: f64,
    pub sigma2_scale: f64,
    pub alpha_var: f64,
    pub beta_var: f64,
    pub iw_df: f64,
    pub iw_scale: SpdMatrix,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            sigma2_shape: 0.001,
            sigma2_scale: 0.001,
            alpha_var: 1000.0,
            beta_var: 1000.0,
            iw_df: 3.0,
            iw_scale: SpdMatrix::scaled_identity(3, 0.01).expect("positive scale"),
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let positive = [
            ("sigma2_shape", self.sigma2_shape),
            ("sigma2_scale", self.sigma2_scale),
            ("alpha_var", self.alpha_var),
            ("beta_var", self.beta_var),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(DataError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.iw_df < 3.0 {
            return Err(DataError::InvalidConfig("iw_df must be >= 3".into()));
        }
        if self.iw_scale.dim() != 3 {
            return Err(DataError::InvalidConfig("iw_scale must be 3x3".into()));
        }
        cholesky(&self.iw_scale)
            .map_err(|e| DataError::InvalidConfig(format!("iw_scale not SPD: {e}")))?;
        Ok(())
    }
}

/// MCMC run controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McmcConfig {
    pub n_iterations: usize,
    pub burn_in_fraction: f64,
    pub thin: usize,
    pub n_chains: usize,
    #[serde(default = "default_proposal_df")]
    pub proposal_df: usize,
    #[serde(default = "default_target_acceptance")]
    pub target_acceptance: (f64, f64),
    #[serde(default = "default_adapt_interval")]
    pub adapt_interval: usize,
    pub seed: u64,
}

fn default_proposal_df() -> usize {
    5
}
fn default_target_acceptance() -> (f64, f64) {
    (0.20, 0.30)
}
fn default_adapt_interval() -> usize {
    100
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_iterations: 500_000,
            burn_in_fraction: 0.9,
            thin: 10,
            n_chains: 3,
            proposal_df: 5,
            target_acceptance: (0.20, 0.30),
            adapt_interval: 100,
            seed: 0,
        }
    }
}

impl McmcConfig {
    /// Number of leading iterations discarded as burn-in.
    pub fn burn_in_iterations(&self) -> usize {
        (self.n_iterations as f64 * self.burn_in_fraction).round() as usize
    }

    /// Exact retained-draw count: floor((n_iterations - burn_in) / thin).
    pub fn retained_draws(&self) -> usize {
        (self.n_iterations - self.burn_in_iterations()) / self.thin
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.burn_in_fraction > 0.0 && self.burn_in_fraction < 1.0) {
            return Err(DataError::InvalidConfig(
                "burn_in_fraction must lie in (0, 1)".into(),
            ));
        }
        if self.thin == 0 {
            return Err(DataError::InvalidConfig("thin must be >= 1".into()));
        }
        if self.n_chains == 0 {
            return Err(DataError::InvalidConfig("n_chains must be >= 1".into()));
        }
        if self.proposal_df < 3 {
            return Err(DataError::InvalidConfig("proposal_df must be >= 3".into()));
        }
        if self.adapt_interval == 0 {
            return Err(DataError::InvalidConfig("adapt_interval must be >= 1".into()));
        }
        let (lo, hi) = self.target_acceptance;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(DataError::InvalidConfig(
                "target_acceptance must satisfy 0 < lo < hi < 1".into(),
            ));
        }
        if self.retained_draws() == 0 {
            return Err(DataError::InvalidConfig(
                "configuration retains zero draws".into(),
            ));
        }
        Ok(())
    }
}

/// N x p design matrix of time-invariant covariates (intercept first), plus
/// the column labels. With `use_covariates = false` this is the N x 1 column
/// of ones.
pub fn design_matrix(
    ds: &LongitudinalDataset,
    cfg: &ModelConfig,
) -> Result<(DMatrix<f64>, Vec<String>), DataError> {
    cfg.validate(ds)?;
    let n = ds.n_subjects();
    if !cfg.use_covariates {
        return Ok((DMatrix::from_element(n, 1, 1.0), vec!["intercept".into()]));
    }
    let indices: Vec<usize> = cfg
        .covariate_selection
        .iter()
        .map(|name| {
            ds.covariate_names()
                .iter()
                .position(|c| c == name)
                .map(|k| k + 1)
                .ok_or_else(|| DataError::UnknownCovariate(name.clone()))
        })
        .collect::<Result<_, _>>()?;
    let p = 1 + indices.len();
    let mut x = DMatrix::zeros(n, p);
    for (i, subject) in ds.subjects().iter().enumerate() {
        x[(i, 0)] = 1.0;
        for (j, &idx) in indices.iter().enumerate() {
            x[(i, j + 1)] = subject.covariates[idx];
        }
    }
    let mut names = vec!["intercept".to_string()];
    names.extend(cfg.covariate_selection.iter().cloned());
    Ok((x, names))
}
