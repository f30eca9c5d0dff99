//! TOML run configuration: one file carries the data schema, model, priors,
//! MCMC controls, and per-command sections. Scalar fields can be overridden
//! by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use bsim_core::data::{
    CsvSchema, KnotStrategy, McmcConfig, ModelConfig, PriorConfig, SplineFamily, TimeTransform,
};
use bsim_core::dist::SpdMatrix;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<DataSection>,
    pub model: ModelSection,
    #[serde(default)]
    pub prior: PriorSection,
    pub mcmc: McmcSection,
    #[serde(default)]
    pub output: OutputSection,
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub diagnose: DiagnoseSection,
    pub compare: Option<CompareSection>,
    #[serde(default)]
    pub curves: CurvesSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
    pub id: String,
    pub time: String,
    pub response: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub time_unit: String,
    #[serde(default)]
    pub response_unit: String,
}

impl DataSection {
    pub fn csv_schema(&self) -> CsvSchema {
        CsvSchema {
            id: self.id.clone(),
            time: self.time.clone(),
            response: self.response.clone(),
            covariates: self.covariates.clone(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub spline_family: SplineFamily,
    pub n_interior_knots: usize,
    pub time_transform: TimeTransform,
    #[serde(default)]
    pub use_covariates: bool,
    #[serde(default)]
    pub covariate_selection: Vec<String>,
    #[serde(default = "default_knot_strategy")]
    pub knot_strategy: KnotStrategy,
    #[serde(default)]
    pub zero_intercept_row: bool,
    #[serde(default)]
    pub scaled_inverse_wishart: bool,
}

fn default_knot_strategy() -> KnotStrategy {
    KnotStrategy::EqualSpacing
}

impl ModelSection {
    pub fn to_model_config(&self) -> ModelConfig {
        ModelConfig {
            spline_family: self.spline_family,
            n_interior_knots: self.n_interior_knots,
            time_transform: self.time_transform,
            use_covariates: self.use_covariates,
            covariate_selection: self.covariate_selection.clone(),
            knot_strategy: self.knot_strategy,
            zero_intercept_row: self.zero_intercept_row,
            scaled_inverse_wishart: self.scaled_inverse_wishart,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    #[serde(default = "default_ig")]
    pub sigma2_shape: f64,
    #[serde(default = "default_ig")]
    pub sigma2_scale: f64,
    #[serde(default = "default_coef_var")]
    pub alpha_var: f64,
    #[serde(default = "default_coef_var")]
    pub beta_var: f64,
    #[serde(default = "default_iw_df")]
    pub iw_df: f64,
    #[serde(default = "default_iw_scale_diag")]
    pub iw_scale_diag: f64,
    /// Full 3x3 scale matrix; overrides `iw_scale_diag` when present.
    pub iw_scale: Option<Vec<Vec<f64>>>,
}

fn default_ig() -> f64 {
    0.001
}
fn default_coef_var() -> f64 {
    1000.0
}
fn default_iw_df() -> f64 {
    3.0
}
fn default_iw_scale_diag() -> f64 {
    0.01
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection {
            sigma2_shape: default_ig(),
            sigma2_scale: default_ig(),
            alpha_var: default_coef_var(),
            beta_var: default_coef_var(),
            iw_df: default_iw_df(),
            iw_scale_diag: default_iw_scale_diag(),
            iw_scale: None,
        }
    }
}

impl PriorSection {
    pub fn to_prior_config(&self) -> Result<PriorConfig> {
        let iw_scale = match &self.iw_scale {
            None => SpdMatrix::scaled_identity(3, self.iw_scale_diag)
                .context("prior.iw_scale_diag must be positive")?,
            Some(rows) => {
                let m = matrix_from_rows(rows, 3, "prior.iw_scale")?;
                SpdMatrix::new(m).context("prior.iw_scale must be symmetric positive definite")?
            }
        };
        let prior = PriorConfig {
            sigma2_shape: self.sigma2_shape,
            sigma2_scale: self.sigma2_scale,
            alpha_var: self.alpha_var,
            beta_var: self.beta_var,
            iw_df: self.iw_df,
            iw_scale,
        };
        prior.validate()?;
        Ok(prior)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcSection {
    pub iterations: usize,
    pub burn_in_fraction: f64,
    pub thin: usize,
    pub chains: usize,
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

impl McmcSection {
    pub fn to_mcmc_config(&self) -> Result<McmcConfig> {
        let cfg = McmcConfig {
            n_iterations: self.iterations,
            burn_in_fraction: self.burn_in_fraction,
            thin: self.thin,
            n_chains: self.chains,
            proposal_df: self.proposal_df,
            target_acceptance: self.target_acceptance,
            adapt_interval: self.adapt_interval,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    /// Present covariate effects multiplied by 100 (log-scale fits).
    #[serde(default)]
    pub percent_effects: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub n_subjects: usize,
    pub obs_per_subject: usize,
    /// Observation window in original time units.
    pub time_lower: f64,
    pub time_upper: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    /// Spline coefficients on the model (possibly log) time scale; length
    /// must equal n_interior_knots + 2.
    pub beta_true: Vec<f64>,
    pub sigma2_true: f64,
    pub sigma_gamma_diag: Option<Vec<f64>>,
    pub sigma_gamma: Option<Vec<Vec<f64>>>,
    /// 3 x p coefficient matrix (intercept column first).
    pub a_true: Option<Vec<Vec<f64>>>,
    /// Generators for design columns beyond the intercept:
    /// "bernoulli:p" or "normal:mean,sd".
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub covariate_names: Vec<String>,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Regular,
    UniformRandom,
}

fn default_schedule() -> Schedule {
    Schedule::Regular
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseSection {
    /// Directory holding a fit's outputs; defaults to the output dir.
    pub fit_dir: Option<PathBuf>,
    #[serde(default = "default_max_lag")]
    pub max_lag: usize,
}

fn default_max_lag() -> usize {
    50
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        DiagnoseSection {
            fit_dir: None,
            max_lag: default_max_lag(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    #[serde(default)]
    pub kappa_range: Vec<usize>,
    #[serde(default = "default_families")]
    pub families: Vec<SplineFamily>,
    /// Compare fits with and without the configured covariates.
    #[serde(default)]
    pub with_and_without_covariates: bool,
    /// Shorter per-fit budget for scans; defaults to [mcmc].iterations.
    pub iterations: Option<usize>,
}

fn default_families() -> Vec<SplineFamily> {
    vec![SplineFamily::NaturalCubic, SplineFamily::BSpline]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvesSection {
    pub fit_dir: Option<PathBuf>,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    /// Subject indices for subject-specific curve exports.
    #[serde(default)]
    pub subjects: Vec<usize>,
    /// Covariate profiles (intercept first) for population curves.
    #[serde(default)]
    pub covariate_profiles: Vec<Vec<f64>>,
}

fn default_grid_size() -> usize {
    512
}

impl Default for CurvesSection {
    fn default() -> Self {
        CurvesSection {
            fit_dir: None,
            grid_size: default_grid_size(),
            subjects: Vec::new(),
            covariate_profiles: Vec::new(),
        }
    }
}

pub fn matrix_from_rows(
    rows: &[Vec<f64>],
    dim: usize,
    what: &str,
) -> Result<nalgebra::DMatrix<f64>> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        bail!("{what} must be a {dim}x{dim} matrix");
    }
    Ok(nalgebra::DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let cfg: RunConfig =
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
    Ok(cfg)
}
