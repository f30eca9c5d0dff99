//! Random-variate generation and log-density evaluation for the sampler,
//! plus the SPD linear-algebra kernel behind every multivariate draw.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use thiserror::Error;

/// Jitter ladder bounds, relative to the mean diagonal entry.
const JITTER_START: f64 = 1e-12;
const JITTER_MAX: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DistError {
    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:.3e})")]
    NotSymmetric { max_asymmetry: f64 },
    #[error("matrix is not finite")]
    NotFinite,
    #[error(
        "matrix is not positive definite even after jitter up to {max_jitter:.3e} \
         (estimated minimum eigenvalue {min_eigenvalue:.6e})"
    )]
    NotPositiveDefinite {
        min_eigenvalue: f64,
        max_jitter: f64,
    },
    #[error("invalid {what}: {value}")]
    InvalidParameter { what: &'static str, value: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Symmetric positive-definite matrix. Symmetry is checked (and enforced
/// exactly) at construction; positive definiteness is established lazily by
/// the Cholesky kernel, which applies the jitter ladder before failing.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    values: DMatrix<f64>,
}

impl serde::Serialize for SpdMatrix {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..self.values.nrows())
            .map(|i| (0..self.values.ncols()).map(|j| self.values[(i, j)]).collect())
            .collect();
        rows.serialize(serializer)
    }
}

impl<'de> serde::Deserialize<'de> for SpdMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(serde::de::Error::custom("matrix rows have unequal lengths"));
        }
        let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        SpdMatrix::new(m).map_err(serde::de::Error::custom)
    }
}

impl SpdMatrix {
    /// Wraps a square matrix, requiring symmetry to 1e-12 relative to the
    /// largest entry. Stored values are exactly symmetrized.
    pub fn new(m: DMatrix<f64>) -> Result<Self, DistError> {
        if m.nrows() != m.ncols() {
            return Err(DistError::DimensionMismatch(format!(
                "{}x{} matrix is not square",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(DistError::NotFinite);
        }
        let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
        let mut max_asymmetry = 0.0f64;
        for i in 0..m.nrows() {
            for j in (i + 1)..m.ncols() {
                max_asymmetry = max_asymmetry.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        if max_asymmetry > 1e-12 * scale {
            return Err(DistError::NotSymmetric { max_asymmetry });
        }
        let mut values = m;
        for i in 0..values.nrows() {
            for j in (i + 1)..values.ncols() {
                let s = 0.5 * (values[(i, j)] + values[(j, i)]);
                values[(i, j)] = s;
                values[(j, i)] = s;
            }
        }
        Ok(SpdMatrix { values })
    }

    pub fn identity(dim: usize) -> Self {
        SpdMatrix {
            values: DMatrix::identity(dim, dim),
        }
    }

    /// `s * I`, requires `s > 0`.
    pub fn scaled_identity(dim: usize, s: f64) -> Result<Self, DistError> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(DistError::InvalidParameter {
                what: "identity scale",
                value: s,
            });
        }
        Ok(SpdMatrix {
            values: DMatrix::identity(dim, dim) * s,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.values
    }
}

/// Seeded, stream-addressed random generator. Identical `(seed, stream_id)`
/// pairs yield identical variate sequences; distinct stream ids are
/// statistically independent. The core generator is integer-based (ChaCha),
/// so sequences are reproducible across platforms.
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream { rng }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = m`.
///
/// Near-singular inputs are rescued by a jitter ladder: `1e-12·mean(diag)·I`
/// escalating tenfold up to `1e-6·mean(diag)`. Beyond that the factorization
/// fails with an estimate of the minimum eigenvalue.
pub fn cholesky(m: &SpdMatrix) -> Result<DMatrix<f64>, DistError> {
    let a = m.as_matrix();
    if let Some(l) = cholesky_raw(a) {
        return Ok(l);
    }
    let diag_mean = a.diagonal().mean().abs();
    let mut jitter = JITTER_START * diag_mean;
    let max_jitter = JITTER_MAX * diag_mean;
    while jitter > 0.0 && jitter <= max_jitter {
        let jittered = a + DMatrix::identity(a.nrows(), a.ncols()) * jitter;
        if let Some(l) = cholesky_raw(&jittered) {
            return Ok(l);
        }
        jitter *= 10.0;
    }
    let min_eigenvalue = a
        .clone_owned()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    Err(DistError::NotPositiveDefinite {
        min_eigenvalue,
        max_jitter,
    })
}

fn cholesky_raw(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[(i, i)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Some(l)
}

fn standard_normal_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}

/// Draw from `N(mean, cov)` as `mean + L z`.
pub fn sample_mvn<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &SpdMatrix,
    rng: &mut R,
) -> Result<DVector<f64>, DistError> {
    if mean.len() != cov.dim() {
        return Err(DistError::DimensionMismatch(format!(
            "mean has length {}, covariance is {}x{}",
            mean.len(),
            cov.dim(),
            cov.dim()
        )));
    }
    let l = cholesky(cov)?;
    let z = standard_normal_vector(mean.len(), rng);
    Ok(mean + l * z)
}

/// Draw from the Gaussian with precision matrix `P` and mean `P⁻¹ b`,
/// without forming the covariance: factor `P = L Lᵀ`, solve for the mean,
/// and return `mean + L⁻ᵀ z`.
pub fn sample_mvn_precision<R: Rng + ?Sized>(
    b: &DVector<f64>,
    precision: &SpdMatrix,
    rng: &mut R,
) -> Result<DVector<f64>, DistError> {
    if b.len() != precision.dim() {
        return Err(DistError::DimensionMismatch(format!(
            "linear term has length {}, precision is {}x{}",
            b.len(),
            precision.dim(),
            precision.dim()
        )));
    }
    let l = cholesky(precision)?;
    let lt = l.transpose();
    let y = l
        .solve_lower_triangular(b)
        .ok_or(DistError::DimensionMismatch("triangular solve failed".into()))?;
    let mean = lt
        .solve_upper_triangular(&y)
        .ok_or(DistError::DimensionMismatch("triangular solve failed".into()))?;
    let z = standard_normal_vector(b.len(), rng);
    let perturbation = lt
        .solve_upper_triangular(&z)
        .ok_or(DistError::DimensionMismatch("triangular solve failed".into()))?;
    Ok(mean + perturbation)
}

/// Inverse gamma draw under the (shape, scale) convention with mean
/// `scale / (shape - 1)` for `shape > 1`.
pub fn sample_inverse_gamma<R: Rng + ?Sized>(
    shape: f64,
    scale: f64,
    rng: &mut R,
) -> Result<f64, DistError> {
    if !(shape > 0.0) {
        return Err(DistError::InvalidParameter {
            what: "inverse gamma shape",
            value: shape,
        });
    }
    if !(scale > 0.0) {
        return Err(DistError::InvalidParameter {
            what: "inverse gamma scale",
            value: scale,
        });
    }
    let gamma = Gamma::new(shape, 1.0).map_err(|_| DistError::InvalidParameter {
        what: "inverse gamma shape",
        value: shape,
    })?;
    let g: f64 = gamma.sample(rng);
    Ok(scale / g)
}

/// Inverse Wishart draw under the convention with mean
/// `scale / (df - dim - 1)` for `df > dim + 1`.
///
/// Sampled via the Bartlett decomposition of the corresponding Wishart and
/// triangular solves; no explicit matrix inverse is formed.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(
    df: f64,
    scale: &SpdMatrix,
    rng: &mut R,
) -> Result<SpdMatrix, DistError> {
    let d = scale.dim();
    if df < d as f64 {
        return Err(DistError::InvalidParameter {
            what: "inverse Wishart degrees of freedom",
            value: df,
        });
    }
    let l_scale = cholesky(scale)?;
    // Bartlett factor of W ~ Wishart(df, scale⁻¹): lower triangular with
    // sqrt(chi-square) diagonal and standard normal strict lower part.
    let mut bartlett = DMatrix::zeros(d, d);
    for r in 0..d {
        let chi = ChiSquared::new(df - r as f64).map_err(|_| DistError::InvalidParameter {
            what: "inverse Wishart degrees of freedom",
            value: df,
        })?;
        let g: f64 = chi.sample(rng);
        bartlett[(r, r)] = g.sqrt();
        for c in 0..r {
            bartlett[(r, c)] = rng.sample(StandardNormal);
        }
    }
    // With W = (L⁻ᵀ A)(L⁻ᵀ A)ᵀ, the inverse draw is Σ = Tᵀ T for T = A⁻¹ Lᵀ.
    let t = bartlett
        .solve_lower_triangular(&l_scale.transpose())
        .ok_or(DistError::NotPositiveDefinite {
            min_eigenvalue: 0.0,
            max_jitter: 0.0,
        })?;
    SpdMatrix::new(t.transpose() * t)
}

/// Multivariate Student's-t draw: `center + L z sqrt(df / g)` with
/// `g ~ chi-square(df)`; symmetric about `center`.
pub fn sample_mvt<R: Rng + ?Sized>(
    center: &DVector<f64>,
    scale: &SpdMatrix,
    df: usize,
    rng: &mut R,
) -> Result<DVector<f64>, DistError> {
    if df == 0 {
        return Err(DistError::InvalidParameter {
            what: "multivariate t degrees of freedom",
            value: 0.0,
        });
    }
    if center.len() != scale.dim() {
        return Err(DistError::DimensionMismatch(format!(
            "center has length {}, scale is {}x{}",
            center.len(),
            scale.dim(),
            scale.dim()
        )));
    }
    let l = cholesky(scale)?;
    let z = standard_normal_vector(center.len(), rng);
    let chi = ChiSquared::new(df as f64).expect("df >= 1");
    let g: f64 = chi.sample(rng);
    Ok(center + l * z * (df as f64 / g).sqrt())
}

/// Exact multivariate normal log-density, normalizing constant included.
pub fn logpdf_mvn(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    cov: &SpdMatrix,
) -> Result<f64, DistError> {
    let d = cov.dim();
    if x.len() != d || mean.len() != d {
        return Err(DistError::DimensionMismatch(format!(
            "x has length {}, mean has length {}, covariance is {}x{}",
            x.len(),
            mean.len(),
            d,
            d
        )));
    }
    let l = cholesky(cov)?;
    let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let centered = x - mean;
    let u = l
        .solve_lower_triangular(&centered)
        .ok_or(DistError::DimensionMismatch("triangular solve failed".into()))?;
    let quad = u.dot(&u);
    Ok(-0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad))
}

/// Scalar normal log-density.
pub fn logpdf_normal(x: f64, mean: f64, var: f64) -> f64 {
    let r = x - mean;
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + r * r / var)
}
