//! Convergence and mixing diagnostics over retained draws: Gelman-Rubin
//! potential scale reduction, autocorrelation, effective sample size,
//! acceptance-rate reports, and Q-Q data export.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::sampler::PosteriorSamples;

/// Acceptance rates outside this band get flagged in reports.
pub const ACCEPTANCE_FLAG_BAND: (f64, f64) = (0.10, 0.40);
/// Conventional pass mark for the potential scale reduction.
pub const RHAT_PASS_MARK: f64 = 1.1;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("need at least {needed} chains, got {got}")]
    TooFewChains { needed: usize, got: usize },
    #[error("chains must share one length >= 2 (got {0:?})")]
    BadChainLengths(Vec<usize>),
    #[error("series is constant; statistic undefined")]
    ConstantSeries,
    #[error("series too short: {got} < {needed}")]
    SeriesTooShort { got: usize, needed: usize },
    #[error("max_lag {max_lag} must satisfy 1 <= max_lag < n = {n}")]
    BadLag { max_lag: usize, n: usize },
}

/// One scalar parameter's draws across chains (equal lengths).
#[derive(Debug, Clone)]
pub struct ScalarTrace {
    pub name: String,
    pub chains: Vec<Vec<f64>>,
}

impl ScalarTrace {
    pub fn new(name: impl Into<String>, chains: Vec<Vec<f64>>) -> Result<Self, DiagnosticsError> {
        if chains.is_empty() {
            return Err(DiagnosticsError::TooFewChains { needed: 1, got: 0 });
        }
        let n = chains[0].len();
        if n < 2 || chains.iter().any(|c| c.len() != n) {
            return Err(DiagnosticsError::BadChainLengths(
                chains.iter().map(|c| c.len()).collect(),
            ));
        }
        Ok(ScalarTrace {
            name: name.into(),
            chains,
        })
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RhatEstimate {
    pub value: f64,
    /// Set when every chain is constant and equal; the value is then 1.0 by
    /// convention.
    pub degenerate: bool,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Classic potential scale reduction over whole chains:
/// `sqrt((n-1)/n + B/(n W))` with `B` the between-chain and `W` the
/// within-chain variance. Split-chain variants are intentionally not
/// applied here; split the trace upstream if wanted.
pub fn gelman_rubin(trace: &ScalarTrace) -> Result<RhatEstimate, DiagnosticsError> {
    let m = trace.chains.len();
    if m < 2 {
        return Err(DiagnosticsError::TooFewChains { needed: 2, got: m });
    }
    let n = trace.chains[0].len() as f64;
    let chain_means: Vec<f64> = trace.chains.iter().map(|c| mean(c)).collect();
    let chain_vars: Vec<f64> = trace.chains.iter().map(|c| sample_variance(c)).collect();
    let w = mean(&chain_vars);
    let b = n * sample_variance(&chain_means);
    if w == 0.0 && b == 0.0 {
        return Ok(RhatEstimate {
            value: 1.0,
            degenerate: true,
        });
    }
    let value = ((n - 1.0) / n + b / (n * w)).sqrt();
    Ok(RhatEstimate {
        value,
        degenerate: false,
    })
}

/// Biased (1/n-normalized) sample autocorrelation for lags `0..=max_lag`;
/// lag 0 is exactly 1.
pub fn autocorrelation(series: &[f64], max_lag: usize) -> Result<Vec<f64>, DiagnosticsError> {
    let n = series.len();
    if max_lag == 0 || max_lag >= n {
        return Err(DiagnosticsError::BadLag { max_lag, n });
    }
    let m = mean(series);
    let c0: f64 = series.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        return Err(DiagnosticsError::ConstantSeries);
    }
    let mut acf = Vec::with_capacity(max_lag + 1);
    acf.push(1.0);
    for k in 1..=max_lag {
        let ck: f64 = (0..n - k)
            .map(|t| (series[t] - m) * (series[t + k] - m))
            .sum::<f64>()
            / n as f64;
        acf.push(ck / c0);
    }
    Ok(acf)
}

/// Effective sample size `n / (1 + 2 sum rho_k)` with the autocorrelation
/// sum truncated at the first non-positive consecutive-pair sum (initial
/// positive sequence rule).
pub fn effective_sample_size(series: &[f64]) -> Result<f64, DiagnosticsError> {
    let n = series.len();
    if n < 10 {
        return Err(DiagnosticsError::SeriesTooShort { got: n, needed: 10 });
    }
    let m = mean(series);
    let centered: Vec<f64> = series.iter().map(|x| x - m).collect();
    let c0: f64 = centered.iter().map(|x| x * x).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        return Err(DiagnosticsError::ConstantSeries);
    }
    let rho = |k: usize| -> f64 {
        let ck: f64 = (0..n - k).map(|t| centered[t] * centered[t + k]).sum::<f64>() / n as f64;
        ck / c0
    };
    let mut tau = 1.0;
    let mut k = 1;
    while k + 1 < n {
        let pair = rho(k) + rho(k + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 2;
    }
    Ok(n as f64 / tau)
}

#[derive(Debug, Clone, Serialize)]
pub struct SubjectRate {
    pub subject_id: String,
    pub accepted: usize,
    pub proposed: usize,
    pub rate: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AcceptanceReport {
    pub per_subject: Vec<SubjectRate>,
    pub mean_rate: f64,
    pub n_flagged: usize,
    pub share_in_band: f64,
}

/// Post-burn-in Metropolis-Hastings acceptance per subject, with subjects
/// outside the flag band called out. Counts are summed across the supplied
/// chains.
pub fn acceptance_report(chains: &[&PosteriorSamples]) -> AcceptanceReport {
    let (lo, hi) = ACCEPTANCE_FLAG_BAND;
    let mut per_subject: Vec<SubjectRate> = Vec::new();
    if let Some(first) = chains.first() {
        for (idx, subject) in first.acceptance.iter().enumerate() {
            let mut accepted = 0;
            let mut proposed = 0;
            for chain in chains {
                accepted += chain.acceptance[idx].accepted;
                proposed += chain.acceptance[idx].proposed;
            }
            let rate = if proposed == 0 {
                0.0
            } else {
                accepted as f64 / proposed as f64
            };
            per_subject.push(SubjectRate {
                subject_id: subject.subject_id.clone(),
                accepted,
                proposed,
                rate,
                flagged: !(lo..=hi).contains(&rate),
            });
        }
    }
    let n = per_subject.len().max(1);
    let mean_rate = per_subject.iter().map(|s| s.rate).sum::<f64>() / n as f64;
    let n_flagged = per_subject.iter().filter(|s| s.flagged).count();
    AcceptanceReport {
        share_in_band: (per_subject.len() - n_flagged) as f64 / n as f64,
        per_subject,
        mean_rate,
        n_flagged,
    }
}

/// Sorted values paired with standard-normal quantiles at `(i - 0.5) / n`.
pub fn qq_export(values: &[f64]) -> Result<Vec<(f64, f64)>, DiagnosticsError> {
    let n = values.len();
    if n < 3 {
        return Err(DiagnosticsError::SeriesTooShort { got: n, needed: 3 });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let normal = Normal::standard();
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, v)| (normal.inverse_cdf((i as f64 + 0.5) / n as f64), v))
        .collect())
}

/// Extracts per-parameter traces for every global parameter (sigma2, the
/// spline coefficients, the free covariance entries, and the covariate
/// coefficients when present) across chains.
pub fn global_traces(chains: &[&PosteriorSamples]) -> Vec<ScalarTrace> {
    if chains.is_empty() || chains[0].draws.is_empty() {
        return Vec::new();
    }
    let first = &chains[0];
    let m = first.draws[0].beta.len();
    let p = first.draws[0].coeff.ncols();
    let has_covariates = first
        .draws
        .iter()
        .any(|d| d.coeff.iter().any(|&v| v != 0.0));
    let mut traces = Vec::new();
    let mut push = |name: String, extract: &dyn Fn(&crate::sampler::Draw) -> f64| {
        let per_chain: Vec<Vec<f64>> = chains
            .iter()
            .map(|c| c.draws.iter().map(|d| extract(d)).collect())
            .collect();
        if let Ok(trace) = ScalarTrace::new(name, per_chain) {
            traces.push(trace);
        }
    };
    push("sigma2".into(), &|d| d.sigma2);
    for k in 0..m {
        push(format!("beta[{k}]"), &move |d| d.beta[k]);
    }
    for r in 0..3 {
        for c in r..3 {
            push(format!("sigma_gamma[{r}][{c}]"), &move |d| {
                d.sigma_gamma[(r, c)]
            });
        }
    }
    if has_covariates {
        for r in 0..3 {
            for c in 0..p {
                push(format!("a[{r}][{c}]"), &move |d| d.coeff[(r, c)]);
            }
        }
    }
    traces
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::RngStream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normal_series(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = RngStream::new(seed, 0);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn ar1_series(n: usize, phi: f64, seed: u64) -> Vec<f64> {
        let mut rng = RngStream::new(seed, 1);
        let mut x = 0.0;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let eps: f64 = rng.sample(StandardNormal);
            x = phi * x + eps;
            out.push(x);
        }
        out
    }

    #[test]
    fn identical_chains_give_exact_sub_unity_rhat() {
        let chain = normal_series(500, 3);
        for copies in [2, 4] {
            let trace = ScalarTrace::new("x", vec![chain.clone(); copies]).unwrap();
            let est = gelman_rubin(&trace).unwrap();
            let n = chain.len() as f64;
            assert_eq!(est.value, ((n - 1.0) / n).sqrt());
            assert!(!est.degenerate);
        }
    }

    #[test]
    fn same_distribution_chains_have_rhat_near_one() {
        let trace = ScalarTrace::new(
            "x",
            vec![normal_series(10_000, 5), normal_series(10_000, 6)],
        )
        .unwrap();
        let est = gelman_rubin(&trace).unwrap();
        assert!(est.value < 1.01, "rhat {}", est.value);
    }

    #[test]
    fn separated_chains_have_large_rhat() {
        let a = normal_series(2_000, 7);
        let b: Vec<f64> = normal_series(2_000, 8).iter().map(|v| v + 100.0).collect();
        let trace = ScalarTrace::new("x", vec![a, b]).unwrap();
        let est = gelman_rubin(&trace).unwrap();
        assert!(est.value > 10.0, "rhat {}", est.value);
    }

    #[test]
    fn constant_equal_chains_are_degenerate_unity() {
        let trace = ScalarTrace::new("x", vec![vec![2.5; 50], vec![2.5; 50]]).unwrap();
        let est = gelman_rubin(&trace).unwrap();
        assert_eq!(est.value, 1.0);
        assert!(est.degenerate);
    }

    #[test]
    fn rhat_needs_two_chains() {
        let trace = ScalarTrace::new("x", vec![normal_series(100, 1)]).unwrap();
        assert!(matches!(
            gelman_rubin(&trace),
            Err(DiagnosticsError::TooFewChains { .. })
        ));
    }

    #[test]
    fn acf_lag_zero_is_one_and_white_noise_decays() {
        let series = normal_series(100_000, 11);
        let acf = autocorrelation(&series, 10).unwrap();
        assert_eq!(acf[0], 1.0);
        for (k, &v) in acf.iter().enumerate().skip(1) {
            assert!(v.abs() < 0.02, "lag {k}: {v}");
        }
    }

    #[test]
    fn acf_recovers_ar1_coefficient() {
        let series = ar1_series(100_000, 0.9, 13);
        let acf = autocorrelation(&series, 3).unwrap();
        assert!((acf[1] - 0.9).abs() < 0.01, "acf(1) = {}", acf[1]);
    }

    #[test]
    fn acf_is_affine_invariant() {
        let series = ar1_series(5_000, 0.5, 17);
        let transformed: Vec<f64> = series.iter().map(|v| -3.2 * v + 40.0).collect();
        let a = autocorrelation(&series, 20).unwrap();
        let b = autocorrelation(&transformed, 20).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn acf_rejects_constant_series_and_bad_lags() {
        assert!(matches!(
            autocorrelation(&[1.0; 100], 5),
            Err(DiagnosticsError::ConstantSeries)
        ));
        assert!(matches!(
            autocorrelation(&[1.0, 2.0], 5),
            Err(DiagnosticsError::BadLag { .. })
        ));
    }

    #[test]
    fn ess_of_iid_draws_is_near_n() {
        let series = normal_series(10_000, 19);
        let ess = effective_sample_size(&series).unwrap();
        assert!(
            (8_500.0..=11_500.0).contains(&ess),
            "iid ESS {ess} out of band"
        );
    }

    #[test]
    fn ess_matches_ar1_theory() {
        let phi: f64 = 0.9;
        let n = 100_000;
        let series = ar1_series(n, phi, 23);
        let ess = effective_sample_size(&series).unwrap();
        let expected = n as f64 * (1.0 - phi) / (1.0 + phi);
        assert!(
            (ess - expected).abs() / expected < 0.15,
            "ESS {ess} vs {expected}"
        );
    }

    #[test]
    fn ess_bounds_on_short_and_anticorrelated_series() {
        assert!(matches!(
            effective_sample_size(&[1.0, 2.0, 3.0, 4.0, 5.0]),
            Err(DiagnosticsError::SeriesTooShort { .. })
        ));
        // Alternating series: negative lag-1 autocorrelation.
        let mut rng = RngStream::new(29, 0);
        let series: Vec<f64> = (0..10_000)
            .map(|t| if t % 2 == 0 { 1.0 } else { -1.0 } + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let ess = effective_sample_size(&series).unwrap();
        assert!(ess > 0.0);
        assert!(ess <= 10_000.0 * 1.2, "ESS {ess}");
    }

    #[test]
    fn qq_pairs_are_centered_and_sloped_correctly() {
        let sym = qq_export(&[-1.0, 0.0, 1.0]).unwrap();
        assert!((sym[1].0).abs() < 1e-12);
        assert_eq!(sym[1].1, 0.0);

        let sample = normal_series(10_000, 31);
        let pairs = qq_export(&sample).unwrap();
        // Least-squares slope of sample on theoretical quantiles.
        let tx: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ty: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let mx = mean(&tx);
        let my = mean(&ty);
        let sxy: f64 = tx.iter().zip(ty.iter()).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = tx.iter().map(|a| (a - mx) * (a - mx)).sum();
        let slope = sxy / sxx;
        assert!((0.97..=1.03).contains(&slope), "slope {slope}");

        let flat = qq_export(&[4.0; 100]).unwrap();
        let fy: Vec<f64> = flat.iter().map(|p| p.1).collect();
        assert!(fy.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn acceptance_report_flags_out_of_band_rates() {
        use crate::sampler::SubjectAcceptance;
        let mk = |acc: &[(usize, usize)]| PosteriorSamples {
            draws: Vec::new(),
            chain_id: 0,
            config_fingerprint: String::new(),
            knots: crate::spline::KnotSet::new(vec![], (0.0, 1.0)).unwrap(),
            family: crate::data::SplineFamily::NaturalCubic,
            time_transform: crate::data::TimeTransform::None,
            covariate_labels: vec![],
            subject_ids: acc.iter().enumerate().map(|(i, _)| format!("s{i}")).collect(),
            seed: 0,
            acceptance: acc
                .iter()
                .enumerate()
                .map(|(i, &(a, p))| SubjectAcceptance {
                    subject_id: format!("s{i}"),
                    accepted: a,
                    proposed: p,
                })
                .collect(),
            proposal_scales_hash_at_freeze: String::new(),
            proposal_scales_hash_at_end: String::new(),
        };
        let chain = mk(&[(100, 100), (25, 100), (5, 100)]);
        let report = acceptance_report(&[&chain]);
        assert!(report.per_subject[0].flagged);
        assert_eq!(report.per_subject[0].rate, 1.0);
        assert!(!report.per_subject[1].flagged);
        assert_eq!(report.per_subject[1].rate, 0.25);
        assert!(report.per_subject[2].flagged);
        assert_eq!(report.n_flagged, 2);
    }
}
