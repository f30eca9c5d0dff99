//! Posterior-derived growth analytics: mean and velocity curves with
//! pointwise credible bands, age at peak velocity, subject-specific curves,
//! and random-effects summary tables.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::data::{quantile, TimeTransform};
use crate::sampler::{Draw, PosteriorSamples, SIZE, TEMPO, VELOCITY};
use crate::spline::{family_eval, BasisEval};

#[derive(Debug, Error)]
pub enum GrowthError {
    #[error("need at least {needed} retained draws, got {got}")]
    TooFewDraws { needed: usize, got: usize },
    #[error("grid size {got} below minimum {needed}")]
    GridTooSmall { needed: usize, got: usize },
    #[error("covariate profile has length {got}, expected {expected}")]
    ProfileDimension { expected: usize, got: usize },
    #[error("subject index {index} out of range (N = {n})")]
    SubjectIndex { index: usize, n: usize },
    #[error("no chains supplied")]
    NoChains,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    Height,
    Velocity,
}

/// Pointwise posterior summary of a curve on a time grid in original units.
#[derive(Debug, Clone, Serialize)]
pub struct CurveEstimate {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub kind: CurveKind,
}

impl CurveEstimate {
    /// Pointwise band ordering; the percentile construction keeps the mean
    /// inside the band for any non-pathological posterior.
    pub fn band_is_ordered(&self) -> bool {
        self.mean
            .iter()
            .zip(self.lower.iter())
            .zip(self.upper.iter())
            .all(|((m, lo), hi)| lo <= m && m <= hi)
    }
}

/// Posterior summary of the age at peak velocity and the peak velocity.
#[derive(Debug, Clone, Serialize)]
pub struct ApvEstimate {
    pub apv_mean: f64,
    pub apv_lower: f64,
    pub apv_upper: f64,
    pub peak_mean: f64,
    pub peak_lower: f64,
    pub peak_upper: f64,
    /// Set when most draws peak at a grid boundary (monotone velocity).
    pub boundary_peak: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CovariateEffect {
    pub effect: &'static str,
    pub covariate: String,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Posterior means of the random-effect SDs, the residual SD, the
/// correlation matrix, and the covariate coefficient table.
#[derive(Debug, Clone, Serialize)]
pub struct EffectsSummary {
    pub sd_tempo: f64,
    pub sd_size: f64,
    pub sd_velocity: f64,
    pub residual_sd: f64,
    /// Row/column order: tempo, size, velocity.
    pub correlations: Vec<Vec<f64>>,
    pub covariate_table: Vec<CovariateEffect>,
    /// Entries of `covariate_table` were multiplied by 100 (log-scale
    /// percentage presentation).
    pub percent_scale: bool,
}

fn pooled_draws<'a>(chains: &'a [&PosteriorSamples]) -> Result<Vec<&'a Draw>, GrowthError> {
    if chains.is_empty() {
        return Err(GrowthError::NoChains);
    }
    let draws: Vec<&Draw> = chains.iter().flat_map(|c| c.draws.iter()).collect();
    if draws.is_empty() {
        return Err(GrowthError::TooFewDraws { needed: 1, got: 0 });
    }
    Ok(draws)
}

fn population_gamma(draw: &Draw, profile: Option<&DVector<f64>>) -> Result<DVector<f64>, GrowthError> {
    match profile {
        None => Ok(DVector::zeros(3)),
        Some(x) => {
            if x.len() != draw.coeff.ncols() {
                return Err(GrowthError::ProfileDimension {
                    expected: draw.coeff.ncols(),
                    got: x.len(),
                });
            }
            Ok(&draw.coeff * x)
        }
    }
}

fn model_grid(samples: &PosteriorSamples, grid_size: usize) -> Vec<f64> {
    let (lo, hi) = samples.knots.boundary;
    (0..grid_size)
        .map(|i| lo + (hi - lo) * i as f64 / (grid_size - 1) as f64)
        .collect()
}

fn to_original_units(u: f64, transform: TimeTransform) -> f64 {
    match transform {
        TimeTransform::None => u,
        TimeTransform::Log => u.exp(),
    }
}

/// Curve value at model-scale time `u` under latent effects `gamma`.
fn curve_value(eval: &BasisEval, beta: &DVector<f64>, gamma: &DVector<f64>, u: f64, buf: &mut [f64]) -> f64 {
    let w = gamma[VELOCITY].exp() * (u - gamma[TEMPO]);
    eval.basis_row(w, 0, buf);
    let mut v = gamma[SIZE];
    for (b, c) in buf.iter().zip(beta.iter()) {
        v += b * c;
    }
    v
}

/// Velocity in original time units at model-scale time `u`: the warped
/// spline slope, chain-ruled through the log transform when one applied.
fn velocity_value(
    eval: &BasisEval,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
    u: f64,
    transform: TimeTransform,
    buf: &mut [f64],
) -> f64 {
    let rate = gamma[VELOCITY].exp();
    let w = rate * (u - gamma[TEMPO]);
    eval.basis_row(w, 1, buf);
    let mut slope = 0.0;
    for (b, c) in buf.iter().zip(beta.iter()) {
        slope += b * c;
    }
    slope *= rate;
    match transform {
        TimeTransform::None => slope,
        TimeTransform::Log => slope / u.exp(),
    }
}

fn summarize_curves(
    grid: Vec<f64>,
    per_draw: Vec<Vec<f64>>,
    kind: CurveKind,
) -> CurveEstimate {
    let n_draws = per_draw.len();
    let g = grid.len();
    let mut mean = vec![0.0; g];
    let mut lower = vec![0.0; g];
    let mut upper = vec![0.0; g];
    let mut column = vec![0.0; n_draws];
    for j in 0..g {
        for (d, values) in per_draw.iter().enumerate() {
            column[d] = values[j];
        }
        mean[j] = column.iter().sum::<f64>() / n_draws as f64;
        let mut sorted = column.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        lower[j] = quantile(&sorted, 0.025);
        upper[j] = quantile(&sorted, 0.975);
    }
    CurveEstimate {
        grid,
        mean,
        lower,
        upper,
        kind,
    }
}

/// Population mean curve with pointwise 95% bands, evaluated per draw at
/// the population latent effects (zero without covariates, `A x` at the
/// supplied profile with them); the grid is returned in original time units.
pub fn mean_curve(
    chains: &[&PosteriorSamples],
    grid_size: usize,
    profile: Option<&DVector<f64>>,
) -> Result<CurveEstimate, GrowthError> {
    if grid_size < 2 {
        return Err(GrowthError::GridTooSmall {
            needed: 2,
            got: grid_size,
        });
    }
    let draws = pooled_draws(chains)?;
    let samples = chains[0];
    let eval = family_eval(&samples.knots, samples.family);
    let model_u = model_grid(samples, grid_size);
    let mut buf = vec![0.0; samples.knots.n_basis()];
    let mut per_draw = Vec::with_capacity(draws.len());
    for draw in &draws {
        let gamma = population_gamma(draw, profile)?;
        per_draw.push(
            model_u
                .iter()
                .map(|&u| curve_value(&eval, &draw.beta, &gamma, u, &mut buf))
                .collect(),
        );
    }
    let grid = model_u
        .iter()
        .map(|&u| to_original_units(u, samples.time_transform))
        .collect();
    Ok(summarize_curves(grid, per_draw, CurveKind::Height))
}

/// First derivative of the population curve in response-per-original-time
/// units, with pointwise 95% bands.
pub fn velocity_curve(
    chains: &[&PosteriorSamples],
    grid_size: usize,
    profile: Option<&DVector<f64>>,
) -> Result<CurveEstimate, GrowthError> {
    if grid_size < 2 {
        return Err(GrowthError::GridTooSmall {
            needed: 2,
            got: grid_size,
        });
    }
    let draws = pooled_draws(chains)?;
    let samples = chains[0];
    let eval = family_eval(&samples.knots, samples.family);
    let model_u = model_grid(samples, grid_size);
    let mut buf = vec![0.0; samples.knots.n_basis()];
    let mut per_draw = Vec::with_capacity(draws.len());
    for draw in &draws {
        let gamma = population_gamma(draw, profile)?;
        per_draw.push(
            model_u
                .iter()
                .map(|&u| {
                    velocity_value(&eval, &draw.beta, &gamma, u, samples.time_transform, &mut buf)
                })
                .collect(),
        );
    }
    let grid = model_u
        .iter()
        .map(|&u| to_original_units(u, samples.time_transform))
        .collect();
    Ok(summarize_curves(grid, per_draw, CurveKind::Velocity))
}

/// Posterior summary of the age at peak velocity and of the peak velocity:
/// per draw, a coarse argmax over the grid is refined once at tenfold
/// resolution around the winning cell. Flags when the velocity is monotone
/// (peak at a grid boundary) for most draws.
pub fn age_at_peak_velocity(
    chains: &[&PosteriorSamples],
    grid_size: usize,
    profile: Option<&DVector<f64>>,
) -> Result<ApvEstimate, GrowthError> {
    if grid_size < 64 {
        return Err(GrowthError::GridTooSmall {
            needed: 64,
            got: grid_size,
        });
    }
    let draws = pooled_draws(chains)?;
    let samples = chains[0];
    let eval = family_eval(&samples.knots, samples.family);
    let model_u = model_grid(samples, grid_size);
    let mut buf = vec![0.0; samples.knots.n_basis()];
    let mut apvs = Vec::with_capacity(draws.len());
    let mut peaks = Vec::with_capacity(draws.len());
    let mut boundary_hits = 0usize;
    for draw in &draws {
        let gamma = population_gamma(draw, profile)?;
        let vel = |u: f64, buf: &mut [f64]| {
            velocity_value(&eval, &draw.beta, &gamma, u, samples.time_transform, buf)
        };
        let coarse: Vec<f64> = model_u.iter().map(|&u| vel(u, &mut buf)).collect();
        let mut arg = 0;
        for (j, &v) in coarse.iter().enumerate() {
            if v > coarse[arg] {
                arg = j;
            }
        }
        if arg == 0 || arg == grid_size - 1 {
            boundary_hits += 1;
        }
        let lo_idx = arg.saturating_sub(1);
        let hi_idx = (arg + 1).min(grid_size - 1);
        let (lo_u, hi_u) = (model_u[lo_idx], model_u[hi_idx]);
        let refine_n = 10 * (hi_idx - lo_idx) + 1;
        let mut best_u = model_u[arg];
        let mut best_v = coarse[arg];
        for r in 0..refine_n {
            let u = lo_u + (hi_u - lo_u) * r as f64 / (refine_n - 1) as f64;
            let v = vel(u, &mut buf);
            if v > best_v {
                best_v = v;
                best_u = u;
            }
        }
        apvs.push(to_original_units(best_u, samples.time_transform));
        peaks.push(best_v);
    }
    let summarize = |values: &[f64]| {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        (mean, quantile(&sorted, 0.025), quantile(&sorted, 0.975))
    };
    let (apv_mean, apv_lower, apv_upper) = summarize(&apvs);
    let (peak_mean, peak_lower, peak_upper) = summarize(&peaks);
    Ok(ApvEstimate {
        apv_mean,
        apv_lower,
        apv_upper,
        peak_mean,
        peak_lower,
        peak_upper,
        boundary_peak: 2 * boundary_hits > draws.len(),
    })
}

/// Posterior summary of one subject's fitted curve.
pub fn subject_curve(
    chains: &[&PosteriorSamples],
    subject_index: usize,
    grid_size: usize,
) -> Result<CurveEstimate, GrowthError> {
    if grid_size < 2 {
        return Err(GrowthError::GridTooSmall {
            needed: 2,
            got: grid_size,
        });
    }
    let draws = pooled_draws(chains)?;
    let samples = chains[0];
    let n = draws[0].gamma.nrows();
    if subject_index >= n {
        return Err(GrowthError::SubjectIndex {
            index: subject_index,
            n,
        });
    }
    let eval = family_eval(&samples.knots, samples.family);
    let model_u = model_grid(samples, grid_size);
    let mut buf = vec![0.0; samples.knots.n_basis()];
    let mut per_draw = Vec::with_capacity(draws.len());
    for draw in &draws {
        let gamma = DVector::from_iterator(3, (0..3).map(|k| draw.gamma[(subject_index, k)]));
        per_draw.push(
            model_u
                .iter()
                .map(|&u| curve_value(&eval, &draw.beta, &gamma, u, &mut buf))
                .collect(),
        );
    }
    let grid = model_u
        .iter()
        .map(|&u| to_original_units(u, samples.time_transform))
        .collect();
    Ok(summarize_curves(grid, per_draw, CurveKind::Height))
}

/// Posterior means of the random-effect SDs and correlations, the residual
/// SD, and the covariate coefficient table with 95% intervals. `percent`
/// multiplies covariate effects by 100 (percentage reading for log-scale
/// fits).
pub fn effects_summary(
    chains: &[&PosteriorSamples],
    percent: bool,
) -> Result<EffectsSummary, GrowthError> {
    let draws = pooled_draws(chains)?;
    let samples = chains[0];
    let k = draws.len() as f64;
    let mut sd = [0.0f64; 3];
    let mut residual_sd = 0.0;
    let mut corr = DMatrix::<f64>::zeros(3, 3);
    for draw in &draws {
        for (i, s) in sd.iter_mut().enumerate() {
            *s += draw.sigma_gamma[(i, i)].sqrt();
        }
        residual_sd += draw.sigma2.sqrt();
        for i in 0..3 {
            for j in 0..3 {
                let denom = (draw.sigma_gamma[(i, i)] * draw.sigma_gamma[(j, j)]).sqrt();
                corr[(i, j)] += if denom > 0.0 {
                    draw.sigma_gamma[(i, j)] / denom
                } else {
                    (i == j) as usize as f64
                };
            }
        }
    }
    for s in &mut sd {
        *s /= k;
    }
    residual_sd /= k;
    corr /= k;
    for i in 0..3 {
        corr[(i, i)] = 1.0;
    }

    let scale = if percent { 100.0 } else { 1.0 };
    let effect_names = ["tempo", "size", "velocity"];
    let mut covariate_table = Vec::new();
    let p = draws[0].coeff.ncols();
    let labels = &samples.covariate_labels;
    let has_covariates = draws.iter().any(|d| d.coeff.iter().any(|&v| v != 0.0));
    if has_covariates {
        for (r, effect) in effect_names.iter().enumerate() {
            for c in 0..p {
                let vals: Vec<f64> = draws.iter().map(|d| d.coeff[(r, c)] * scale).collect();
                let mean = vals.iter().sum::<f64>() / k;
                let mut sorted = vals;
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                covariate_table.push(CovariateEffect {
                    effect,
                    covariate: labels
                        .get(c)
                        .cloned()
                        .unwrap_or_else(|| format!("covariate{c}")),
                    mean,
                    lower: quantile(&sorted, 0.025),
                    upper: quantile(&sorted, 0.975),
                });
            }
        }
    }
    Ok(EffectsSummary {
        sd_tempo: sd[TEMPO],
        sd_size: sd[SIZE],
        sd_velocity: sd[VELOCITY],
        residual_sd,
        correlations: (0..3)
            .map(|i| (0..3).map(|j| corr[(i, j)]).collect())
            .collect(),
        covariate_table,
        percent_scale: percent,
    })
}
