//! Generative-model simulator plus the brute-force oracles the test and
//! acceptance suites check the sampler against.
//!
//! Oracle code deliberately avoids the production kernels: basis rows come
//! from the raw truncated-power definition, matrix inverses from LU rather
//! than the sampler's Cholesky path, densities from longhand formulas. A
//! bug shared with the implementation cannot validate itself.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::data::{
    LongitudinalDataset, McmcConfig, ModelConfig, PriorConfig, SplineFamily, SubjectRecord,
};
use crate::dist::{sample_mvn, DistError, RngStream, SpdMatrix};
use crate::sampler::{
    log_conditional_gamma_i, run_chain, Globals, PosteriorSamples, SamplerError, SIZE, TEMPO,
    VELOCITY,
};
use crate::spline::{BasisEval, KnotSet};

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("inconsistent dimensions: {0}")]
    Dimensions(String),
    #[error(
        "grid too narrow: endpoint density {endpoint_ratio:.3e} of max exceeds 1e-6; \
         widen the grid"
    )]
    GridTooNarrow { endpoint_ratio: f64 },
    #[error("need at least one replicate")]
    NoReplicates,
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

/// Ground truth for a simulated cohort. `gamma_true` is filled with the
/// realized latent effects by `generate_dataset`.
#[derive(Debug, Clone)]
pub struct TruthRecord {
    pub beta_true: DVector<f64>,
    /// Residual variance; zero generates noiseless data.
    pub sigma2_true: f64,
    pub sigma_gamma_true: SpdMatrix,
    /// 3 x p coefficient matrix; all zeros for a covariate-free truth.
    pub a_true: DMatrix<f64>,
    pub gamma_true: DMatrix<f64>,
    pub knots: KnotSet,
    pub family: SplineFamily,
}

/// Observation schedule and covariates for each simulated subject.
/// Covariate vectors include the leading intercept 1.
#[derive(Debug, Clone)]
pub struct DesignSpec {
    pub time_grids: Vec<Vec<f64>>,
    pub covariates: Vec<Vec<f64>>,
    pub covariate_names: Vec<String>,
}

impl DesignSpec {
    /// Regular design: every subject observed on the same uniform grid,
    /// intercept-only covariates.
    pub fn regular(n_subjects: usize, obs_per_subject: usize, lo: f64, hi: f64) -> Self {
        let grid: Vec<f64> = (0..obs_per_subject)
            .map(|j| lo + (hi - lo) * j as f64 / (obs_per_subject - 1).max(1) as f64)
            .collect();
        DesignSpec {
            time_grids: vec![grid; n_subjects],
            covariates: vec![vec![1.0]; n_subjects],
            covariate_names: Vec::new(),
        }
    }
}

/// Draws latent effects `gamma_i ~ N3(A x_i, Sigma_gamma)` and responses
/// `y_ij = gamma_size + B(exp(gamma_velocity)(t - gamma_tempo)) beta + noise`,
/// returning the dataset together with the realized truth.
pub fn generate_dataset<R: Rng + ?Sized>(
    truth: &TruthRecord,
    design: &DesignSpec,
    rng: &mut R,
) -> Result<(LongitudinalDataset, TruthRecord), SyntheticError> {
    let n = design.time_grids.len();
    if design.covariates.len() != n {
        return Err(SyntheticError::Dimensions(format!(
            "{} time grids but {} covariate vectors",
            n,
            design.covariates.len()
        )));
    }
    let p = truth.a_true.ncols();
    if design.covariates.iter().any(|c| c.len() != p) {
        return Err(SyntheticError::Dimensions(format!(
            "covariate vectors must have length {p}"
        )));
    }
    if truth.beta_true.len() != truth.knots.n_basis() {
        return Err(SyntheticError::Dimensions(format!(
            "beta has length {}, basis has {} columns",
            truth.beta_true.len(),
            truth.knots.n_basis()
        )));
    }
    let eval = crate::spline::family_eval(&truth.knots, truth.family);
    let m = truth.knots.n_basis();
    let sigma = truth.sigma2_true.sqrt();
    let mut gamma_true = DMatrix::zeros(n, 3);
    let mut records = Vec::with_capacity(n);
    let width = ((n.max(2) - 1) as f64).log10().floor() as usize + 1;
    let mut row = vec![0.0; m];
    for i in 0..n {
        let x_i = DVector::from_vec(design.covariates[i].clone());
        let mean = &truth.a_true * &x_i;
        let gamma_i = sample_mvn(&mean, &truth.sigma_gamma_true, rng)?;
        for k in 0..3 {
            gamma_true[(i, k)] = gamma_i[k];
        }
        let rate = gamma_i[VELOCITY].exp();
        let times = design.time_grids[i].clone();
        let mut responses = Vec::with_capacity(times.len());
        for &t in &times {
            eval.basis_row(rate * (t - gamma_i[TEMPO]), 0, &mut row);
            let mut y = gamma_i[SIZE];
            for k in 0..m {
                y += row[k] * truth.beta_true[k];
            }
            let z: f64 = rng.sample(StandardNormal);
            responses.push(y + sigma * z);
        }
        records.push(SubjectRecord {
            id: format!("sim{i:0width$}"),
            times,
            responses,
            covariates: design.covariates[i].clone(),
        });
    }
    let ds = LongitudinalDataset::from_records(records, design.covariate_names.clone())?;
    let mut realized = truth.clone();
    realized.gamma_true = gamma_true;
    Ok((ds, realized))
}

/// Normalizes log-weights to probabilities with max subtraction, so the
/// result is exactly invariant to adding a constant.
pub fn normalize_log_weights(log_w: &[f64]) -> Vec<f64> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = log_w.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreeComponent {
    Tempo,
    Size,
    Velocity,
}

impl FreeComponent {
    fn index(self) -> usize {
        match self {
            FreeComponent::Tempo => TEMPO,
            FreeComponent::Size => SIZE,
            FreeComponent::Velocity => VELOCITY,
        }
    }
}

/// Exhaustive-grid evaluation of one subject's conditional with one latent
/// component free and the other two fixed: the oracle the Metropolis step is
/// checked against. The grid must cover essentially all mass (endpoint
/// density below 1e-6 of the maximum).
pub fn grid_posterior_1d(
    subject: &SubjectRecord,
    x_i: &DVector<f64>,
    fixed_gamma: &DVector<f64>,
    free: FreeComponent,
    globals: &Globals,
    eval: &BasisEval,
    grid: &[f64],
) -> Result<Vec<f64>, SyntheticError> {
    let idx = free.index();
    let log_density: Vec<f64> = grid
        .iter()
        .map(|&g| {
            let mut gamma = fixed_gamma.clone();
            gamma[idx] = g;
            log_conditional_gamma_i(&gamma, subject, x_i, globals, eval)
        })
        .collect();
    let probs = normalize_log_weights(&log_density);
    let max_p = probs.iter().copied().fold(0.0f64, f64::max);
    let endpoint = probs[0].max(*probs.last().unwrap());
    if endpoint > 1e-6 * max_p {
        return Err(SyntheticError::GridTooNarrow {
            endpoint_ratio: endpoint / max_p,
        });
    }
    Ok(probs)
}

/// Coverage/bias bookkeeping for one scalar parameter of the recovery study.
#[derive(Debug, Clone, Serialize)]
pub struct ParamCoverage {
    pub name: String,
    pub covered: usize,
    pub total: usize,
    pub mean_bias: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RecoveryReport {
    pub n_replicates: usize,
    pub n_failures: usize,
    pub coverage: Vec<ParamCoverage>,
}

impl RecoveryReport {
    pub fn coverage_rate(&self, name: &str) -> Option<f64> {
        self.coverage
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.covered as f64 / c.total as f64)
    }
}

/// A complete simulate-fit scenario for the recovery study.
pub struct RecoveryScenario {
    pub truth: TruthRecord,
    pub design: DesignSpec,
    pub model: ModelConfig,
    pub prior: PriorConfig,
    pub mcmc: McmcConfig,
}

/// Generates, fits, and scores `n_replicates` independent datasets,
/// recording 95% credible-interval coverage and posterior-mean bias of the
/// global parameters. Replicates run in parallel on disjoint RNG streams;
/// per-replicate failures are counted and skipped.
pub fn recovery_study(
    scenario: &RecoveryScenario,
    n_replicates: usize,
    base_seed: u64,
) -> Result<RecoveryReport, SyntheticError> {
    if n_replicates == 0 {
        return Err(SyntheticError::NoReplicates);
    }
    let results: Vec<Option<Vec<(String, bool, f64)>>> = (0..n_replicates)
        .into_par_iter()
        .map(|r| replicate(scenario, r, base_seed).ok())
        .collect();

    let mut coverage: Vec<ParamCoverage> = Vec::new();
    let mut n_failures = 0;
    for result in results {
        match result {
            None => n_failures += 1,
            Some(entries) => {
                for (name, covered, bias) in entries {
                    match coverage.iter_mut().find(|c| c.name == name) {
                        Some(c) => {
                            c.covered += covered as usize;
                            c.total += 1;
                            c.mean_bias += bias;
                        }
                        None => coverage.push(ParamCoverage {
                            name,
                            covered: covered as usize,
                            total: 1,
                            mean_bias: bias,
                        }),
                    }
                }
            }
        }
    }
    for c in &mut coverage {
        if c.total > 0 {
            c.mean_bias /= c.total as f64;
        }
    }
    Ok(RecoveryReport {
        n_replicates,
        n_failures,
        coverage,
    })
}

fn replicate(
    scenario: &RecoveryScenario,
    r: usize,
    base_seed: u64,
) -> Result<Vec<(String, bool, f64)>, SyntheticError> {
    let mut gen_rng = RngStream::new(base_seed, 1_000_000 + r as u64);
    let (ds, realized) = generate_dataset(&scenario.truth, &scenario.design, &mut gen_rng)?;
    let mut mcmc = scenario.mcmc.clone();
    mcmc.seed = base_seed.wrapping_add(911 * (r as u64 + 1));
    let samples = run_chain(&ds, &scenario.model, &scenario.prior, &mcmc, 0)?;

    let mut entries = Vec::new();
    let mut record = |name: String, draws: Vec<f64>, truth: f64| {
        let mut sorted = draws.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = crate::data::quantile(&sorted, 0.025);
        let hi = crate::data::quantile(&sorted, 0.975);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        entries.push((name, lo <= truth && truth <= hi, mean - truth));
    };

    let m = realized.beta_true.len();
    for k in 0..m {
        record(
            format!("beta[{k}]"),
            samples.draws.iter().map(|d| d.beta[k]).collect(),
            realized.beta_true[k],
        );
    }
    record(
        "sigma2".into(),
        samples.draws.iter().map(|d| d.sigma2).collect(),
        realized.sigma2_true,
    );
    for k in 0..3 {
        record(
            format!("sigma_gamma[{k}][{k}]"),
            samples
                .draws
                .iter()
                .map(|d| d.sigma_gamma[(k, k)])
                .collect(),
            realized.sigma_gamma_true.as_matrix()[(k, k)],
        );
    }
    if scenario.model.use_covariates {
        for row in 0..3 {
            for c in 0..realized.a_true.ncols() {
                record(
                    format!("a[{row}][{c}]"),
                    samples.draws.iter().map(|d| d.coeff[(row, c)]).collect(),
                    realized.a_true[(row, c)],
                );
            }
        }
    }
    Ok(entries)
}

/// Fraction of subjects whose posterior-mean latent effects sit within `k`
/// posterior SDs of zero; round-trip sanity for zero-truth fits.
pub fn share_of_subjects_near_zero(samples: &PosteriorSamples, k: f64) -> f64 {
    let n = samples.draws[0].gamma.nrows();
    let d = samples.draws.len() as f64;
    let mut near = 0;
    for i in 0..n {
        let mut ok = true;
        for c in 0..3 {
            let vals: Vec<f64> = samples.draws.iter().map(|dr| dr.gamma[(i, c)]).collect();
            let mean = vals.iter().sum::<f64>() / d;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d - 1.0)).sqrt();
            if mean.abs() > k * sd.max(1e-12) {
                ok = false;
            }
        }
        near += ok as usize;
    }
    near as f64 / n as f64
}

/// Independent oracle implementations.
pub mod oracles {
    use super::*;

    /// Natural cubic basis row from the raw truncated-power definition,
    /// with no boundary special-casing.
    pub fn naive_natural_basis_row(all_knots: &[f64], x: f64) -> Vec<f64> {
        let k_total = all_knots.len();
        let xi_last = all_knots[k_total - 1];
        let tp3 = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
        let d =
            |k: usize| (tp3(x - all_knots[k]) - tp3(x - xi_last)) / (xi_last - all_knots[k]);
        let mut out = vec![1.0, x];
        let d_last = d(k_total - 2);
        for k in 0..k_total - 2 {
            out.push(d(k) - d_last);
        }
        out
    }

    /// Longhand scalar normal log-density.
    pub fn naive_lognormal(y: f64, mean: f64, var: f64) -> f64 {
        let two_pi = 2.0 * std::f64::consts::PI;
        -(two_pi * var).ln() / 2.0 - (y - mean) * (y - mean) / (2.0 * var)
    }

    /// Trivariate normal log-density via explicit LU inverse and
    /// determinant.
    pub fn naive_logpdf_mvn3(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let inv = cov
            .clone()
            .try_inverse()
            .expect("oracle covariance invertible");
        let det = cov.determinant();
        let c = x - mean;
        let quad = (c.transpose() * inv * &c)[0];
        -0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() + det.ln() + quad)
    }

    /// Full conditional of one subject's latent triple, reassembled from
    /// naive parts (natural family only).
    #[allow(clippy::too_many_arguments)]
    pub fn naive_log_conditional(
        gamma_i: &DVector<f64>,
        times: &[f64],
        responses: &[f64],
        x_i: &DVector<f64>,
        all_knots: &[f64],
        beta: &DVector<f64>,
        coeff: &DMatrix<f64>,
        sigma2: f64,
        sigma_gamma: &DMatrix<f64>,
    ) -> f64 {
        let mean = coeff * x_i;
        let mut lp = naive_logpdf_mvn3(gamma_i, &mean, sigma_gamma);
        for (&t, &y) in times.iter().zip(responses.iter()) {
            let warped = gamma_i[VELOCITY].exp() * (t - gamma_i[TEMPO]);
            let basis = naive_natural_basis_row(all_knots, warped);
            let fitted = gamma_i[SIZE]
                + basis
                    .iter()
                    .zip(beta.iter())
                    .map(|(b, c)| b * c)
                    .sum::<f64>();
            lp += naive_lognormal(y, fitted, sigma2);
        }
        lp
    }

    /// Residual sum of squares by plain double loop (natural family only).
    pub fn naive_rss(
        ds: &LongitudinalDataset,
        gamma: &DMatrix<f64>,
        all_knots: &[f64],
        beta: &DVector<f64>,
    ) -> f64 {
        let mut rss = 0.0;
        for (i, subject) in ds.subjects().iter().enumerate() {
            for (j, &t) in subject.times.iter().enumerate() {
                let warped = gamma[(i, VELOCITY)].exp() * (t - gamma[(i, TEMPO)]);
                let basis = naive_natural_basis_row(all_knots, warped);
                let fitted = gamma[(i, SIZE)]
                    + basis
                        .iter()
                        .zip(beta.iter())
                        .map(|(b, c)| b * c)
                        .sum::<f64>();
                let r = subject.responses[j] - fitted;
                rss += r * r;
            }
        }
        rss
    }

    /// Conditional deviance by plain double loop (natural family only).
    pub fn naive_deviance(
        ds: &LongitudinalDataset,
        gamma: &DMatrix<f64>,
        all_knots: &[f64],
        beta: &DVector<f64>,
        sigma2: f64,
    ) -> f64 {
        let mut total = 0.0;
        for (i, subject) in ds.subjects().iter().enumerate() {
            for (j, &t) in subject.times.iter().enumerate() {
                let warped = gamma[(i, VELOCITY)].exp() * (t - gamma[(i, TEMPO)]);
                let basis = naive_natural_basis_row(all_knots, warped);
                let fitted = gamma[(i, SIZE)]
                    + basis
                        .iter()
                        .zip(beta.iter())
                        .map(|(b, c)| b * c)
                        .sum::<f64>();
                total += naive_lognormal(subject.responses[j], fitted, sigma2);
            }
        }
        -2.0 * total
    }

    /// Analytic conditional moments of the spline-coefficient update:
    /// covariance `(sigma^-2 ZᵀZ + beta_var^-1 I)^-1` via LU, mean
    /// `cov sigma^-2 Zᵀ r`.
    pub fn beta_conditional_moments(
        z: &DMatrix<f64>,
        resid: &DVector<f64>,
        sigma2: f64,
        beta_var: f64,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let m = z.ncols();
        let precision = z.transpose() * z / sigma2 + DMatrix::identity(m, m) / beta_var;
        let cov = precision.try_inverse().expect("oracle precision invertible");
        let mean = &cov * (z.transpose() * resid / sigma2);
        (mean, cov)
    }

    /// Analytic conditional moments of vec(A) for the latent-effect
    /// regression, via Kronecker assembly and LU inversion.
    pub fn alpha_conditional_moments(
        x: &DMatrix<f64>,
        gamma: &DMatrix<f64>,
        sigma_gamma: &DMatrix<f64>,
        alpha_var: f64,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let p = x.ncols();
        let sg_inv = sigma_gamma
            .clone()
            .try_inverse()
            .expect("oracle sigma_gamma invertible");
        let xtx = x.transpose() * x;
        let mut precision = DMatrix::zeros(3 * p, 3 * p);
        for a in 0..p {
            for b in 0..p {
                for i in 0..3 {
                    for j in 0..3 {
                        precision[(3 * a + i, 3 * b + j)] = xtx[(a, b)] * sg_inv[(i, j)];
                    }
                }
            }
        }
        precision += DMatrix::identity(3 * p, 3 * p) / alpha_var;
        let cov = precision.try_inverse().expect("oracle precision invertible");
        let linear_matrix = &sg_inv * (gamma.transpose() * x);
        let linear = DVector::from_iterator(
            3 * p,
            (0..p)
                .flat_map(|j| (0..3).map(move |r| (r, j)))
                .map(|(r, j)| linear_matrix[(r, j)]),
        );
        let mean = &cov * linear;
        (mean, cov)
    }

    /// Analytic mean of the residual-variance conditional.
    pub fn sigma2_conditional_mean(a: f64, b: f64, rss: f64, n: usize) -> f64 {
        (b + rss / 2.0) / (a + n as f64 / 2.0 - 1.0)
    }

    /// Analytic mean of the random-effects covariance conditional.
    pub fn sigma_gamma_conditional_mean(
        psi: &DMatrix<f64>,
        scatter: &DMatrix<f64>,
        delta: f64,
        n: usize,
    ) -> DMatrix<f64> {
        (psi + scatter) / (delta + n as f64 - 4.0)
    }
}
