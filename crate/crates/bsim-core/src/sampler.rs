//! The MCMC engine: conjugate Gibbs updates for the spline coefficients,
//! covariate coefficients, residual variance, and random-effects covariance,
//! with a per-subject random-walk Metropolis-Hastings step for the latent
//! (tempo, size, velocity) triples. Handles burn-in adaptation, thinning,
//! and deterministic multi-chain orchestration.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{
    apply_time_transform, design_matrix, DataError, LongitudinalDataset, McmcConfig, ModelConfig,
    PriorConfig, SplineFamily, SubjectRecord, TimeTransform,
};
use crate::dist::{
    cholesky, logpdf_mvn, logpdf_normal, sample_inverse_gamma, sample_inverse_wishart,
    sample_mvn_precision, sample_mvt, DistError, RngStream, SpdMatrix,
};
use crate::spline::{family_eval, place_knots, BasisEval, KnotSet, SplineError};

/// Indices of the latent effect triple.
pub const TEMPO: usize = 0;
pub const SIZE: usize = 1;
pub const VELOCITY: usize = 2;

/// Stream-id layout: each chain owns a 32-bit block; the first slots are
/// reserved for initialization and the global-update stream, subjects start
/// at a fixed offset keyed by their stable index in the dataset.
const STREAM_INIT: u64 = 0;
const STREAM_GLOBALS: u64 = 1;
const SUBJECT_STREAM_OFFSET: u64 = 16;

fn chain_stream(chain_id: usize, slot: u64) -> u64 {
    ((chain_id as u64) << 32) | slot
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(
        "design is degenerate: {distinct_times} distinct times cannot identify {n_basis} \
         basis coefficients; reduce the number of interior knots"
    )]
    DegenerateDesign {
        distinct_times: usize,
        n_basis: usize,
    },
    #[error("SPD failure in {update} at iteration {iteration}: {source}")]
    SpdAbort {
        update: &'static str,
        iteration: usize,
        #[source]
        source: DistError,
        /// JSON snapshot of the chain state for post-mortem inspection.
        state_dump: String,
    },
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// Per-subject Metropolis-Hastings bookkeeping.
#[derive(Debug, Clone, Default, Serialize)]
pub struct AcceptCounter {
    pub window_accepted: usize,
    pub window_proposed: usize,
    pub post_burn_in_accepted: usize,
    pub post_burn_in_proposed: usize,
    pub total_accepted: usize,
    pub total_proposed: usize,
}

/// Full mutable state of one chain.
#[derive(Debug, Clone)]
pub struct ChainState {
    /// N x 3 latent effects; columns are (tempo, size, velocity).
    pub gamma: DMatrix<f64>,
    /// Spline coefficients, length kappa + 2.
    pub beta: DVector<f64>,
    /// 3 x p covariate coefficient matrix A (all zeros when covariates are
    /// disabled; the intercept column may be pinned at zero by config).
    pub coeff: DMatrix<f64>,
    pub sigma2: f64,
    pub sigma_gamma: SpdMatrix,
    pub proposal_scales: Vec<SpdMatrix>,
    pub accept_counts: Vec<AcceptCounter>,
    pub iteration: usize,
    /// Set at the end of burn-in; adaptation becomes a no-op.
    pub adaptation_frozen: bool,
    /// Log-scale diagonal of the scaled inverse-Wishart decomposition
    /// (only advanced when that variant is enabled).
    pub log_scale_diag: DVector<f64>,
}

#[derive(Serialize)]
struct StateDump<'a> {
    iteration: usize,
    sigma2: f64,
    beta: Vec<f64>,
    coeff_rows: Vec<Vec<f64>>,
    sigma_gamma: &'a SpdMatrix,
    gamma_rows: Vec<Vec<f64>>,
}

impl ChainState {
    fn dump_json(&self) -> String {
        let dump = StateDump {
            iteration: self.iteration,
            sigma2: self.sigma2,
            beta: self.beta.iter().copied().collect(),
            coeff_rows: (0..self.coeff.nrows())
                .map(|r| (0..self.coeff.ncols()).map(|c| self.coeff[(r, c)]).collect())
                .collect(),
            sigma_gamma: &self.sigma_gamma,
            gamma_rows: (0..self.gamma.nrows())
                .map(|r| (0..3).map(|c| self.gamma[(r, c)]).collect())
                .collect(),
        };
        serde_json::to_string(&dump).unwrap_or_else(|_| "{}".into())
    }

    pub fn gamma_row(&self, i: usize) -> DVector<f64> {
        DVector::from_iterator(3, (0..3).map(|k| self.gamma[(i, k)]))
    }

    /// SHA-256 over the proposal scale entries, for freeze checks.
    pub fn proposal_scales_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for s in &self.proposal_scales {
            for v in s.as_matrix().iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_digest(hasher)
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// One retained posterior draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub iteration: usize,
    pub gamma: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub coeff: DMatrix<f64>,
    pub sigma2: f64,
    pub sigma_gamma: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct SubjectAcceptance {
    pub subject_id: String,
    pub accepted: usize,
    pub proposed: usize,
}

impl SubjectAcceptance {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Thinned post-burn-in draws from one chain, plus the run metadata needed
/// to interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub draws: Vec<Draw>,
    pub chain_id: usize,
    pub config_fingerprint: String,
    pub knots: KnotSet,
    pub family: SplineFamily,
    pub time_transform: TimeTransform,
    pub covariate_labels: Vec<String>,
    pub subject_ids: Vec<String>,
    pub seed: u64,
    /// Post-burn-in Metropolis-Hastings acceptance per subject.
    pub acceptance: Vec<SubjectAcceptance>,
    pub proposal_scales_hash_at_freeze: String,
    pub proposal_scales_hash_at_end: String,
}

/// Everything immutable over a run: transformed data, knots, basis
/// evaluator, design matrix, and configuration.
pub struct ModelContext {
    pub ds: LongitudinalDataset,
    pub knots: KnotSet,
    pub family: SplineFamily,
    pub eval: BasisEval,
    /// N x p design matrix of time-invariant covariates (intercept first).
    pub x: DMatrix<f64>,
    pub x_rows: Vec<DVector<f64>>,
    pub covariate_labels: Vec<String>,
    /// Coefficient vector reproducing the constant-1 function in the basis;
    /// direction of the curve-level recentering move.
    pub constant_combo: DVector<f64>,
    pub model: ModelConfig,
    pub prior: PriorConfig,
}

impl ModelContext {
    pub fn n_basis(&self) -> usize {
        self.knots.n_basis()
    }
}

/// Transforms the data as configured, places knots on the transformed
/// observed times (frozen for the whole run), and assembles the design
/// matrix.
pub fn build_context(
    ds: &LongitudinalDataset,
    model: &ModelConfig,
    prior: &PriorConfig,
) -> Result<ModelContext, SamplerError> {
    prior.validate()?;
    let ds = match (ds.time_transform_applied(), model.time_transform) {
        (TimeTransform::None, TimeTransform::Log) => apply_time_transform(ds, TimeTransform::Log)?,
        (TimeTransform::Log, TimeTransform::None) => {
            return Err(SamplerError::Data(DataError::InvalidConfig(
                "dataset is log-transformed but the model asks for untransformed time".into(),
            )))
        }
        _ => ds.clone(),
    };
    let times = ds.pooled_times();
    let knots = place_knots(&times, model.n_interior_knots, model.knot_strategy)?;
    let eval = family_eval(&knots, model.spline_family);
    let (x, covariate_labels) = design_matrix(&ds, model)?;
    let x_rows = (0..x.nrows())
        .map(|i| DVector::from_iterator(x.ncols(), (0..x.ncols()).map(|j| x[(i, j)])))
        .collect();
    let constant_combo = constant_reproducing_coefficients(&knots, &eval);
    Ok(ModelContext {
        ds,
        knots,
        family: model.spline_family,
        eval,
        x,
        x_rows,
        covariate_labels,
        constant_combo,
        model: model.clone(),
        prior: prior.clone(),
    })
}

/// Least-squares coefficients of the all-ones function over the knot range;
/// both families reproduce constants, so the residual is at rounding level.
fn constant_reproducing_coefficients(knots: &KnotSet, eval: &BasisEval) -> DVector<f64> {
    let m = eval.n_basis();
    let (lo, hi) = knots.boundary;
    let g = 256;
    let mut basis = DMatrix::zeros(g, m);
    let mut row = vec![0.0; m];
    for i in 0..g {
        let u = lo + (hi - lo) * i as f64 / (g - 1) as f64;
        eval.basis_row(u, 0, &mut row);
        for k in 0..m {
            basis[(i, k)] = row[k];
        }
    }
    let ones = DVector::from_element(g, 1.0);
    basis
        .svd(true, true)
        .solve(&ones, 1e-12)
        .expect("constant projection")
}

/// Basis matrix of one subject's observations under the warp
/// `exp(gamma_velocity) * (t - gamma_tempo)`.
pub fn warped_basis_row(
    subject: &SubjectRecord,
    gamma_i: &DVector<f64>,
    knots: &KnotSet,
    family: SplineFamily,
) -> DMatrix<f64> {
    let eval = family_eval(knots, family);
    warped_basis_with(subject, gamma_i, &eval)
}

fn warped_basis_with(
    subject: &SubjectRecord,
    gamma_i: &DVector<f64>,
    eval: &BasisEval,
) -> DMatrix<f64> {
    let m = eval.n_basis();
    let rate = gamma_i[VELOCITY].exp();
    let mut out = DMatrix::zeros(subject.times.len(), m);
    let mut row = vec![0.0; m];
    for (j, &t) in subject.times.iter().enumerate() {
        eval.basis_row(rate * (t - gamma_i[TEMPO]), 0, &mut row);
        for k in 0..m {
            out[(j, k)] = row[k];
        }
    }
    out
}

/// The global parameters one subject's conditional depends on.
pub struct Globals<'a> {
    pub beta: &'a DVector<f64>,
    pub coeff: &'a DMatrix<f64>,
    pub sigma2: f64,
    pub sigma_gamma: &'a SpdMatrix,
}

impl<'a> Globals<'a> {
    pub fn of(state: &'a ChainState) -> Self {
        Globals {
            beta: &state.beta,
            coeff: &state.coeff,
            sigma2: state.sigma2,
            sigma_gamma: &state.sigma_gamma,
        }
    }
}

/// Log of the full conditional of one subject's latent triple: trivariate
/// normal prior at `A x_i` plus the Gaussian likelihood of the subject's
/// observations under the warped curve. Normalizing constants included.
pub fn log_conditional_gamma_i(
    gamma_i: &DVector<f64>,
    subject: &SubjectRecord,
    x_i: &DVector<f64>,
    globals: &Globals,
    eval: &BasisEval,
) -> f64 {
    let prior_mean = globals.coeff * x_i;
    let prior = match logpdf_mvn(gamma_i, &prior_mean, globals.sigma_gamma) {
        Ok(v) => v,
        Err(_) => return f64::NEG_INFINITY,
    };
    let m = eval.n_basis();
    let rate = gamma_i[VELOCITY].exp();
    let mut row = vec![0.0; m];
    let mut loglik = 0.0;
    for (j, &t) in subject.times.iter().enumerate() {
        eval.basis_row(rate * (t - gamma_i[TEMPO]), 0, &mut row);
        let mut fitted = gamma_i[SIZE];
        for k in 0..m {
            fitted += row[k] * globals.beta[k];
        }
        loglik += logpdf_normal(subject.responses[j], fitted, globals.sigma2);
    }
    prior + loglik
}

/// One random-walk Metropolis-Hastings step with a symmetric multivariate-t
/// proposal. The uniform accept-draw is always consumed so accepted and
/// rejected paths advance the stream identically; a non-finite candidate
/// density auto-rejects.
pub fn mh_step<R: Rng + ?Sized>(
    current: &DVector<f64>,
    current_logp: f64,
    scale: &SpdMatrix,
    df: usize,
    logp: impl Fn(&DVector<f64>) -> f64,
    rng: &mut R,
) -> Result<(DVector<f64>, f64, bool), DistError> {
    let candidate = sample_mvt(current, scale, df, rng)?;
    let candidate_logp = logp(&candidate);
    let u: f64 = rng.random();
    if candidate_logp.is_finite() && u.ln() < candidate_logp - current_logp {
        Ok((candidate, candidate_logp, true))
    } else {
        Ok((current.clone(), current_logp, false))
    }
}

/// Metropolis-Hastings update of subject `i`'s latent triple.
pub fn update_gamma_i<R: Rng + ?Sized>(
    state: &mut ChainState,
    ctx: &ModelContext,
    i: usize,
    proposal_df: usize,
    rng: &mut R,
) -> Result<bool, DistError> {
    let subject = &ctx.ds.subjects()[i];
    let current = state.gamma_row(i);
    let (next, accepted) = {
        let globals = Globals::of(state);
        let current_logp =
            log_conditional_gamma_i(&current, subject, &ctx.x_rows[i], &globals, &ctx.eval);
        let (next, _, accepted) = mh_step(
            &current,
            current_logp,
            &state.proposal_scales[i],
            proposal_df,
            |g| log_conditional_gamma_i(g, subject, &ctx.x_rows[i], &globals, &ctx.eval),
            rng,
        )?;
        (next, accepted)
    };
    for k in 0..3 {
        state.gamma[(i, k)] = next[k];
    }
    record_acceptance(state, i, accepted);
    Ok(accepted)
}

fn record_acceptance(state: &mut ChainState, i: usize, accepted: bool) {
    let in_post_burn_in = state.adaptation_frozen;
    let c = &mut state.accept_counts[i];
    c.window_proposed += 1;
    c.total_proposed += 1;
    if accepted {
        c.window_accepted += 1;
        c.total_accepted += 1;
    }
    if in_post_burn_in {
        c.post_burn_in_proposed += 1;
        if accepted {
            c.post_burn_in_accepted += 1;
        }
    }
}

/// Stacked warped basis under the current latent effects.
struct StackedDesign {
    ztz: DMatrix<f64>,
    ztr: DVector<f64>,
}

fn stack_design(state: &ChainState, ctx: &ModelContext) -> StackedDesign {
    let m = ctx.n_basis();
    let mut ztz = DMatrix::zeros(m, m);
    let mut ztr = DVector::zeros(m);
    for (i, subject) in ctx.ds.subjects().iter().enumerate() {
        let gamma_i = state.gamma_row(i);
        let z_i = warped_basis_with(subject, &gamma_i, &ctx.eval);
        let r_i = DVector::from_iterator(
            subject.responses.len(),
            subject.responses.iter().map(|&y| y - gamma_i[SIZE]),
        );
        ztz += z_i.transpose() * &z_i;
        ztr += z_i.transpose() * r_i;
    }
    StackedDesign { ztz, ztr }
}

/// Conjugate draw of the spline coefficients: precision
/// `sigma^-2 ZᵀZ + beta_var^-1 I`, linear term
/// `sigma^-2 Zᵀ(y - gamma_size)`.
pub fn update_beta<R: Rng + ?Sized>(
    state: &mut ChainState,
    ctx: &ModelContext,
    rng: &mut R,
) -> Result<(), SamplerError> {
    let design = stack_design(state, ctx);
    let m = ctx.n_basis();
    let inv_sigma2 = 1.0 / state.sigma2;
    let precision_matrix =
        &design.ztz * inv_sigma2 + DMatrix::identity(m, m) / ctx.prior.beta_var;
    let precision = SpdMatrix::new(precision_matrix).map_err(|e| spd_abort(state, "beta", e))?;
    let b = &design.ztr * inv_sigma2;
    let beta = sample_mvn_precision(&b, &precision, rng).map_err(|e| spd_abort(state, "beta", e))?;
    state.beta = beta;
    Ok(())
}

fn spd_abort(state: &ChainState, update: &'static str, source: DistError) -> SamplerError {
    SamplerError::SpdAbort {
        update,
        iteration: state.iteration,
        source,
        state_dump: state.dump_json(),
    }
}

fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    DMatrix::from_fn(ar * br, ac * bc, |i, j| {
        a[(i / br, j / bc)] * b[(i % br, j % bc)]
    })
}

fn sigma_gamma_inverse(state: &ChainState) -> Result<DMatrix<f64>, DistError> {
    let l = cholesky(&state.sigma_gamma)?;
    let eye = DMatrix::identity(3, 3);
    let y = l
        .solve_lower_triangular(&eye)
        .ok_or_else(|| DistError::DimensionMismatch("triangular solve failed".into()))?;
    l.transpose()
        .solve_upper_triangular(&y)
        .ok_or_else(|| DistError::DimensionMismatch("triangular solve failed".into()))
}

/// Conjugate draw of the covariate coefficient matrix A for the
/// multivariate regression `gamma_i ~ N3(A x_i, Sigma_gamma)` with prior
/// `vec(A) ~ N(0, alpha_var I)`: precision `(XᵀX) ⊗ Sigma_gamma^-1 +
/// alpha_var^-1 I`, linear term `vec(Sigma_gamma^-1 Gammaᵀ X)`. With
/// `zero_intercept_row` the intercept column is excluded from the
/// regression and pinned at zero.
pub fn update_alpha<R: Rng + ?Sized>(
    state: &mut ChainState,
    ctx: &ModelContext,
    rng: &mut R,
) -> Result<(), SamplerError> {
    let p = ctx.x.ncols();
    let col_range: Vec<usize> = if ctx.model.zero_intercept_row {
        (1..p).collect()
    } else {
        (0..p).collect()
    };
    if col_range.is_empty() {
        state.coeff.fill(0.0);
        return Ok(());
    }
    let xe = ctx.x.select_columns(col_range.iter());
    let pe = xe.ncols();
    let sg_inv = sigma_gamma_inverse(state).map_err(|e| spd_abort(state, "alpha", e))?;
    let xtx = xe.transpose() * &xe;
    let precision_matrix =
        kron(&xtx, &sg_inv) + DMatrix::identity(3 * pe, 3 * pe) / ctx.prior.alpha_var;
    let precision = SpdMatrix::new(precision_matrix).map_err(|e| spd_abort(state, "alpha", e))?;
    // vec(Sigma^-1 Gammaᵀ Xe), columns stacked.
    let linear_matrix = &sg_inv * (state.gamma.transpose() * &xe);
    let linear = DVector::from_iterator(
        3 * pe,
        (0..pe).flat_map(|j| (0..3).map(move |r| (r, j))).map(|(r, j)| linear_matrix[(r, j)]),
    );
    let vec_a =
        sample_mvn_precision(&linear, &precision, rng).map_err(|e| spd_abort(state, "alpha", e))?;
    state.coeff.fill(0.0);
    for (jj, &col) in col_range.iter().enumerate() {
        for r in 0..3 {
            state.coeff[(r, col)] = vec_a[3 * jj + r];
        }
    }
    Ok(())
}

/// Residual sum of squares under the current latent effects and
/// coefficients.
pub fn residual_sum_of_squares(state: &ChainState, ctx: &ModelContext) -> f64 {
    let m = ctx.n_basis();
    let mut rss = 0.0;
    let mut row = vec![0.0; m];
    for (i, subject) in ctx.ds.subjects().iter().enumerate() {
        let tempo = state.gamma[(i, TEMPO)];
        let size = state.gamma[(i, SIZE)];
        let rate = state.gamma[(i, VELOCITY)].exp();
        for (j, &t) in subject.times.iter().enumerate() {
            ctx.eval.basis_row(rate * (t - tempo), 0, &mut row);
            let mut fitted = size;
            for k in 0..m {
                fitted += row[k] * state.beta[k];
            }
            let r = subject.responses[j] - fitted;
            rss += r * r;
        }
    }
    rss
}

/// Conjugate inverse-gamma draw of the residual variance:
/// `IG(a + n/2, b + RSS/2)` with `n` the total observation count.
pub fn update_sigma2<R: Rng + ?Sized>(
    state: &mut ChainState,
    ctx: &ModelContext,
    rng: &mut R,
) -> Result<(), SamplerError> {
    let rss = residual_sum_of_squares(state, ctx);
    let shape = ctx.prior.sigma2_shape + ctx.ds.n_obs_total() as f64 / 2.0;
    let scale = ctx.prior.sigma2_scale + rss / 2.0;
    state.sigma2 = sample_inverse_gamma(shape, scale, rng)?;
    Ok(())
}

/// Latent-effect residuals around their modeled means: `gamma` itself
/// without covariates, `gamma - X Aᵀ` with.
fn effect_residuals(state: &ChainState, ctx: &ModelContext, use_covariates: bool) -> DMatrix<f64> {
    if use_covariates {
        &state.gamma - &ctx.x * state.coeff.transpose()
    } else {
        state.gamma.clone()
    }
}

/// Conjugate inverse-Wishart draw of the random-effects covariance:
/// `IW(delta + N, psi + SᵀS)` where `S` collects the latent-effect
/// residuals. The scaled variant decomposes `Sigma = D R D` and adds a
/// random-walk step on `log diag(D)`.
pub fn update_sigma_gamma<R: Rng + ?Sized>(
    state: &mut ChainState,
    ctx: &ModelContext,
    use_covariates: bool,
    rng: &mut R,
) -> Result<(), SamplerError> {
    let s = effect_residuals(state, ctx, use_covariates);
    let n = ctx.ds.n_subjects() as f64;
    if !ctx.model.scaled_inverse_wishart {
        let scale_matrix = ctx.prior.iw_scale.as_matrix() + s.transpose() * &s;
        let scale =
            SpdMatrix::new(scale_matrix).map_err(|e| spd_abort(state, "sigma_gamma", e))?;
        let draw = sample_inverse_wishart(ctx.prior.iw_df + n, &scale, rng)
            .map_err(|e| spd_abort(state, "sigma_gamma", e))?;
        state.sigma_gamma = draw;
        return Ok(());
    }

    // Scaled variant: R | D is conjugate IW on the D^-1-standardized
    // residuals, then one random-walk M-H step on log diag(D) with N(0,1)
    // priors; Sigma = D R D.
    let d_vec = state.log_scale_diag.map(|v| v.exp());
    let u = DMatrix::from_fn(s.nrows(), 3, |i, k| s[(i, k)] / d_vec[k]);
    let scale_matrix = ctx.prior.iw_scale.as_matrix() + u.transpose() * &u;
    let scale = SpdMatrix::new(scale_matrix).map_err(|e| spd_abort(state, "sigma_gamma", e))?;
    let r_draw = sample_inverse_wishart(ctx.prior.iw_df + n, &scale, rng)
        .map_err(|e| spd_abort(state, "sigma_gamma", e))?;

    let compose = |log_d: &DVector<f64>| -> Result<SpdMatrix, DistError> {
        let d = log_d.map(|v| v.exp());
        let m = DMatrix::from_fn(3, 3, |i, j| d[i] * r_draw.as_matrix()[(i, j)] * d[j]);
        SpdMatrix::new(m)
    };
    let log_target = |log_d: &DVector<f64>| -> f64 {
        let sigma = match compose(log_d) {
            Ok(m) => m,
            Err(_) => return f64::NEG_INFINITY,
        };
        let zero = DVector::zeros(3);
        let mut lp: f64 = log_d.iter().map(|&v| logpdf_normal(v, 0.0, 1.0)).sum();
        for i in 0..s.nrows() {
            let row = DVector::from_iterator(3, (0..3).map(|k| s[(i, k)]));
            match logpdf_mvn(&row, &zero, &sigma) {
                Ok(v) => lp += v,
                Err(_) => return f64::NEG_INFINITY,
            }
        }
        lp
    };
    let current = state.log_scale_diag.clone();
    let current_lp = log_target(&current);
    let step = SpdMatrix::scaled_identity(3, 0.05f64.powi(2)).expect("positive step");
    let (next, _, _) = mh_step(&current, current_lp, &step, 5, log_target, rng)?;
    state.log_scale_diag = next;
    state.sigma_gamma =
        compose(&state.log_scale_diag).map_err(|e| spd_abort(state, "sigma_gamma", e))?;
    Ok(())
}

/// Joint Metropolis move of the curve level against the size effects: the
/// coefficients move by `delta` along the constant-reproducing direction
/// while every size effect shifts by `-delta`. Fitted values are (nearly)
/// unchanged, so this walks the soft level/size direction directly; the
/// acceptance ratio is computed exactly, residuals included. Without it the
/// level mixes only through individual subject steps, with autocorrelation
/// times in the thousands at cohort size.
pub fn recenter_size<R: Rng + ?Sized>(
    state: &mut ChainState,
    ctx: &ModelContext,
    rng: &mut R,
) -> Result<bool, SamplerError> {
    let n = ctx.ds.n_subjects() as f64;
    let scale = (state.sigma_gamma.as_matrix()[(SIZE, SIZE)] / n).sqrt();
    let z: f64 = rng.sample(rand_distr::StandardNormal);
    let delta = scale * z;
    let u: f64 = rng.random();

    let beta_new = &state.beta + &ctx.constant_combo * delta;
    let mut log_ratio =
        (state.beta.norm_squared() - beta_new.norm_squared()) / (2.0 * ctx.prior.beta_var);

    let current_rss = residual_sum_of_squares(state, ctx);
    let mut shifted = state.clone();
    shifted.beta = beta_new;
    for i in 0..ctx.ds.n_subjects() {
        shifted.gamma[(i, SIZE)] -= delta;
    }
    let shifted_rss = residual_sum_of_squares(&shifted, ctx);
    log_ratio += (current_rss - shifted_rss) / (2.0 * state.sigma2);

    for i in 0..ctx.ds.n_subjects() {
        let mean = &state.coeff * &ctx.x_rows[i];
        let old = logpdf_mvn(&state.gamma_row(i), &mean, &state.sigma_gamma)
            .map_err(|e| spd_abort(state, "recenter_size", e))?;
        let new = logpdf_mvn(&shifted.gamma_row(i), &mean, &state.sigma_gamma)
            .map_err(|e| spd_abort(state, "recenter_size", e))?;
        log_ratio += new - old;
    }

    if log_ratio.is_finite() && u.ln() < log_ratio {
        state.beta = shifted.beta;
        state.gamma = shifted.gamma;
        Ok(true)
    } else {
        Ok(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptOutcome {
    Adapted,
    Frozen,
}

/// Burn-in proposal adaptation: each subject's scale matrix is multiplied by
/// `exp(0.5)` when its windowed acceptance exceeds the target band, by
/// `exp(-0.5)` when it falls below, and left alone inside the band. Window
/// counters reset. After burn-in the call is a no-op.
pub fn adapt_proposals(state: &mut ChainState, target: (f64, f64)) -> AdaptOutcome {
    if state.adaptation_frozen {
        return AdaptOutcome::Frozen;
    }
    let (lo, hi) = target;
    for (scale, counter) in state
        .proposal_scales
        .iter_mut()
        .zip(state.accept_counts.iter_mut())
    {
        if counter.window_proposed > 0 {
            let rate = counter.window_accepted as f64 / counter.window_proposed as f64;
            let factor = if rate > hi {
                0.5f64.exp()
            } else if rate < lo {
                (-0.5f64).exp()
            } else {
                1.0
            };
            if factor != 1.0 {
                *scale = SpdMatrix::new(scale.as_matrix() * factor).expect("scaling keeps SPD");
            }
        }
        counter.window_accepted = 0;
        counter.window_proposed = 0;
    }
    AdaptOutcome::Adapted
}

/// Ridge least-squares initialization: shared beta from the unwarped basis
/// fit, per-chain dispersed latent effects, residual variance from the fit.
pub fn initialize_state<R: Rng + ?Sized>(
    ctx: &ModelContext,
    rng: &mut R,
) -> Result<ChainState, SamplerError> {
    let m = ctx.n_basis();
    let times = ctx.ds.pooled_times();
    let mut distinct = times.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < m {
        return Err(SamplerError::DegenerateDesign {
            distinct_times: distinct.len(),
            n_basis: m,
        });
    }
    let n = ctx.ds.n_obs_total();
    let mut basis = DMatrix::zeros(n, m);
    let mut y = DVector::zeros(n);
    let mut row = vec![0.0; m];
    let mut offset = 0;
    for subject in ctx.ds.subjects() {
        for (j, (&t, &resp)) in subject.times.iter().zip(subject.responses.iter()).enumerate() {
            ctx.eval.basis_row(t, 0, &mut row);
            for k in 0..m {
                basis[(offset + j, k)] = row[k];
            }
            y[offset + j] = resp;
        }
        offset += subject.times.len();
    }
    let btb = basis.transpose() * &basis + DMatrix::identity(m, m) * 1e-6;
    let bty = basis.transpose() * &y;
    let beta = btb.lu().solve(&bty).ok_or(SamplerError::DegenerateDesign {
        distinct_times: distinct.len(),
        n_basis: m,
    })?;
    let fitted = &basis * &beta;
    let rss = (&y - &fitted).norm_squared();
    let sigma2 = (rss / n as f64).max(1e-12);

    let n_subj = ctx.ds.n_subjects();
    let gamma = DMatrix::from_fn(n_subj, 3, |_, _| {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        0.01 * z
    });
    Ok(ChainState {
        gamma,
        beta,
        coeff: DMatrix::zeros(3, ctx.x.ncols()),
        sigma2,
        sigma_gamma: SpdMatrix::scaled_identity(3, 0.01).expect("positive scale"),
        proposal_scales: vec![
            SpdMatrix::scaled_identity(3, 0.01).expect("positive scale");
            n_subj
        ],
        accept_counts: vec![AcceptCounter::default(); n_subj],
        iteration: 0,
        adaptation_frozen: false,
        log_scale_diag: DVector::zeros(3),
    })
}

/// SHA-256 fingerprint of the full configuration triple.
pub fn config_fingerprint(model: &ModelConfig, prior: &PriorConfig, mcmc: &McmcConfig) -> String {
    #[derive(Serialize)]
    struct All<'a> {
        model: &'a ModelConfig,
        prior: &'a PriorConfig,
        mcmc: &'a McmcConfig,
    }
    let json = serde_json::to_string(&All { model, prior, mcmc }).expect("configs serialize");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    hex_digest(hasher)
}

/// Runs one chain: per iteration all subject M-H updates, then the
/// conjugate block updates in the order beta, alpha (when covariates are
/// active), sigma^2, Sigma_gamma. Proposal adaptation runs every
/// `adapt_interval` iterations during burn-in and is frozen afterwards;
/// post-burn-in draws are retained at the thinning stride. Fully
/// deterministic given `(seed, chain_id)`.
pub fn run_chain(
    ds: &LongitudinalDataset,
    model: &ModelConfig,
    prior: &PriorConfig,
    mcmc: &McmcConfig,
    chain_id: usize,
) -> Result<PosteriorSamples, SamplerError> {
    mcmc.validate()?;
    let ctx = build_context(ds, model, prior)?;
    run_chain_with_context(&ctx, mcmc, chain_id)
}

pub fn run_chain_with_context(
    ctx: &ModelContext,
    mcmc: &McmcConfig,
    chain_id: usize,
) -> Result<PosteriorSamples, SamplerError> {
    let mut init_rng = RngStream::new(mcmc.seed, chain_stream(chain_id, STREAM_INIT));
    let mut state = initialize_state(ctx, &mut init_rng)?;
    let mut global_rng = RngStream::new(mcmc.seed, chain_stream(chain_id, STREAM_GLOBALS));
    let mut subject_rngs: Vec<RngStream> = (0..ctx.ds.n_subjects())
        .map(|i| {
            RngStream::new(
                mcmc.seed,
                chain_stream(chain_id, SUBJECT_STREAM_OFFSET + i as u64),
            )
        })
        .collect();

    let burn_in = mcmc.burn_in_iterations();
    let retained = mcmc.retained_draws();
    let mut draws = Vec::with_capacity(retained);
    let mut freeze_hash = String::new();

    for it in 0..mcmc.n_iterations {
        state.iteration = it;
        sweep_gamma(&mut state, ctx, mcmc.proposal_df, &mut subject_rngs)?;
        recenter_size(&mut state, ctx, &mut global_rng)?;
        update_beta(&mut state, ctx, &mut global_rng)?;
        if ctx.model.use_covariates {
            update_alpha(&mut state, ctx, &mut global_rng)?;
        }
        update_sigma2(&mut state, ctx, &mut global_rng)?;
        update_sigma_gamma(&mut state, ctx, ctx.model.use_covariates, &mut global_rng)?;

        if !state.adaptation_frozen && (it + 1) % mcmc.adapt_interval == 0 {
            adapt_proposals(&mut state, mcmc.target_acceptance);
        }
        if it + 1 == burn_in {
            state.adaptation_frozen = true;
            freeze_hash = state.proposal_scales_hash();
        }
        if it >= burn_in && (it - burn_in + 1) % mcmc.thin == 0 {
            draws.push(Draw {
                iteration: it,
                gamma: state.gamma.clone(),
                beta: state.beta.clone(),
                coeff: state.coeff.clone(),
                sigma2: state.sigma2,
                sigma_gamma: state.sigma_gamma.as_matrix().clone(),
            });
        }
    }
    debug_assert_eq!(draws.len(), retained);

    let acceptance = ctx
        .ds
        .subjects()
        .iter()
        .zip(state.accept_counts.iter())
        .map(|(s, c)| SubjectAcceptance {
            subject_id: s.id.clone(),
            accepted: c.post_burn_in_accepted,
            proposed: c.post_burn_in_proposed,
        })
        .collect();

    Ok(PosteriorSamples {
        draws,
        chain_id,
        config_fingerprint: config_fingerprint(&ctx.model, &ctx.prior, mcmc),
        knots: ctx.knots.clone(),
        family: ctx.family,
        time_transform: ctx.model.time_transform,
        covariate_labels: ctx.covariate_labels.clone(),
        subject_ids: ctx.ds.subjects().iter().map(|s| s.id.clone()).collect(),
        seed: mcmc.seed,
        acceptance,
        proposal_scales_hash_at_freeze: freeze_hash,
        proposal_scales_hash_at_end: state.proposal_scales_hash(),
    })
}

/// All-subject Metropolis-Hastings sweep. Subjects are conditionally
/// independent given the globals and each owns its RNG stream, so parallel
/// and serial execution produce bit-identical results; outputs merge by
/// subject index.
fn sweep_gamma(
    state: &mut ChainState,
    ctx: &ModelContext,
    proposal_df: usize,
    subject_rngs: &mut [RngStream],
) -> Result<(), SamplerError> {
    let beta = state.beta.clone();
    let coeff = state.coeff.clone();
    let sigma2 = state.sigma2;
    let sigma_gamma = state.sigma_gamma.clone();
    let gamma_snapshot = state.gamma.clone();
    let scales = state.proposal_scales.clone();

    let results: Vec<Result<(DVector<f64>, bool), DistError>> = subject_rngs
        .par_iter_mut()
        .enumerate()
        .map(|(i, rng)| {
            let globals = Globals {
                beta: &beta,
                coeff: &coeff,
                sigma2,
                sigma_gamma: &sigma_gamma,
            };
            let subject = &ctx.ds.subjects()[i];
            let current = DVector::from_iterator(3, (0..3).map(|k| gamma_snapshot[(i, k)]));
            let current_logp =
                log_conditional_gamma_i(&current, subject, &ctx.x_rows[i], &globals, &ctx.eval);
            mh_step(
                &current,
                current_logp,
                &scales[i],
                proposal_df,
                |g| log_conditional_gamma_i(g, subject, &ctx.x_rows[i], &globals, &ctx.eval),
                rng,
            )
            .map(|(next, _, accepted)| (next, accepted))
        })
        .collect();

    for (i, result) in results.into_iter().enumerate() {
        let (next, accepted) = result.map_err(|e| spd_abort(state, "gamma", e))?;
        for k in 0..3 {
            state.gamma[(i, k)] = next[k];
        }
        record_acceptance(state, i, accepted);
    }
    Ok(())
}

/// Runs `n_chains` independent chains in parallel; results in chain order.
pub fn run_chains(
    ds: &LongitudinalDataset,
    model: &ModelConfig,
    prior: &PriorConfig,
    mcmc: &McmcConfig,
) -> Result<Vec<PosteriorSamples>, SamplerError> {
    mcmc.validate()?;
    let ctx = build_context(ds, model, prior)?;
    (0..mcmc.n_chains)
        .into_par_iter()
        .map(|chain_id| run_chain_with_context(&ctx, mcmc, chain_id))
        .collect()
}
