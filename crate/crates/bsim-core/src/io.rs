//! On-disk formats: the posterior draw CSV with its JSON metadata sidecar,
//! and the CSV tables for summaries, curves, scores, and diagnostics.
//!
//! Floats are written with the shortest round-trip representation, so a
//! written file parses back to bit-identical values.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DescriptiveStats, SplineFamily, TimeTransform};
use crate::diagnostics::{AcceptanceReport, RhatEstimate, RHAT_PASS_MARK};
use crate::growth::{ApvEstimate, CurveEstimate, EffectsSummary};
use crate::model_selection::{FitScore, ModelSelectionError};
use crate::sampler::{Draw, PosteriorSamples, SubjectAcceptance};
use crate::spline::KnotSet;

pub const POSTERIOR_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed posterior csv: {0}")]
    MalformedPosterior(String),
    #[error("metadata mismatch: {0}")]
    MetadataMismatch(String),
}

/// JSON sidecar describing a posterior CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitMetadata {
    pub schema_version: u32,
    pub chain_id: usize,
    pub seed: u64,
    pub config_fingerprint: String,
    pub family: SplineFamily,
    pub time_transform: TimeTransform,
    pub knots: KnotSet,
    pub covariate_labels: Vec<String>,
    pub subject_ids: Vec<String>,
    pub acceptance: Vec<SubjectAcceptance>,
    pub proposal_scales_hash_at_freeze: String,
    pub proposal_scales_hash_at_end: String,
    /// Convention recorded with every fit: chains flagged at this mark.
    pub rhat_pass_mark: f64,
    pub deviance_kind: String,
    /// Unit labels carried through from ingestion; purely descriptive.
    #[serde(default)]
    pub time_unit: String,
    #[serde(default)]
    pub response_unit: String,
}

impl FitMetadata {
    pub fn of(samples: &PosteriorSamples) -> Self {
        FitMetadata {
            schema_version: POSTERIOR_SCHEMA_VERSION,
            chain_id: samples.chain_id,
            seed: samples.seed,
            config_fingerprint: samples.config_fingerprint.clone(),
            family: samples.family,
            time_transform: samples.time_transform,
            knots: samples.knots.clone(),
            covariate_labels: samples.covariate_labels.clone(),
            subject_ids: samples.subject_ids.clone(),
            acceptance: samples.acceptance.clone(),
            proposal_scales_hash_at_freeze: samples.proposal_scales_hash_at_freeze.clone(),
            proposal_scales_hash_at_end: samples.proposal_scales_hash_at_end.clone(),
            rhat_pass_mark: RHAT_PASS_MARK,
            deviance_kind: "conditional".into(),
            time_unit: String::new(),
            response_unit: String::new(),
        }
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Upper-triangular index pairs of the 3x3 covariance, in header order.
const SIGMA_GAMMA_UPPER: [(usize, usize); 6] =
    [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

/// Column layout of the posterior CSV: iteration, sigma2, the spline
/// coefficients, the covariate coefficients, the free covariance entries,
/// then the per-subject latent effects `gamma[i][k]`.
pub fn posterior_headers(n_subjects: usize, n_basis: usize, p: usize) -> Vec<String> {
    let mut h = vec!["iteration".to_string(), "sigma2".to_string()];
    for k in 0..n_basis {
        h.push(format!("beta[{k}]"));
    }
    for r in 0..3 {
        for c in 0..p {
            h.push(format!("a[{r}][{c}]"));
        }
    }
    for (r, c) in SIGMA_GAMMA_UPPER {
        h.push(format!("sigma_gamma[{r}][{c}]"));
    }
    for i in 0..n_subjects {
        for k in 0..3 {
            h.push(format!("gamma[{i}][{k}]"));
        }
    }
    h
}

/// Writes the retained draws as a columnar CSV.
pub fn write_posterior_csv<W: Write>(samples: &PosteriorSamples, out: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    if samples.draws.is_empty() {
        return Err(IoError::MalformedPosterior("no draws to write".into()));
    }
    let first = &samples.draws[0];
    let n = first.gamma.nrows();
    let m = first.beta.len();
    let p = first.coeff.ncols();
    w.write_record(posterior_headers(n, m, p))?;
    for draw in &samples.draws {
        let mut rec: Vec<String> = Vec::with_capacity(2 + m + 3 * p + 6 + 3 * n);
        rec.push(draw.iteration.to_string());
        rec.push(fmt(draw.sigma2));
        for k in 0..m {
            rec.push(fmt(draw.beta[k]));
        }
        for r in 0..3 {
            for c in 0..p {
                rec.push(fmt(draw.coeff[(r, c)]));
            }
        }
        for (r, c) in SIGMA_GAMMA_UPPER {
            rec.push(fmt(draw.sigma_gamma[(r, c)]));
        }
        for i in 0..n {
            for k in 0..3 {
                rec.push(fmt(draw.gamma[(i, k)]));
            }
        }
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metadata_json<W: Write>(meta: &FitMetadata, mut out: W) -> Result<(), IoError> {
    serde_json::to_writer_pretty(&mut out, meta)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_metadata_json<R: Read>(input: R) -> Result<FitMetadata, IoError> {
    Ok(serde_json::from_reader(input)?)
}

/// Reads a posterior CSV back, taking shapes from the header row and run
/// context from the metadata sidecar.
pub fn read_posterior_csv<R: Read>(
    input: R,
    meta: &FitMetadata,
) -> Result<PosteriorSamples, IoError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = reader.headers()?.clone();
    let count_prefixed = |prefix: &str| headers.iter().filter(|h| h.starts_with(prefix)).count();
    let m = count_prefixed("beta[");
    let gamma_cols = count_prefixed("gamma[");
    let a_cols = count_prefixed("a[");
    if m == 0 || gamma_cols == 0 || gamma_cols % 3 != 0 || a_cols % 3 != 0 {
        return Err(IoError::MalformedPosterior(format!(
            "unexpected header shape: {m} beta, {a_cols} a, {gamma_cols} gamma columns"
        )));
    }
    let n = gamma_cols / 3;
    let p = a_cols / 3;
    if n != meta.subject_ids.len() {
        return Err(IoError::MetadataMismatch(format!(
            "csv has {n} subjects, metadata lists {}",
            meta.subject_ids.len()
        )));
    }
    let expected = posterior_headers(n, m, p);
    if headers.iter().ne(expected.iter().map(|s| s.as_str())) {
        return Err(IoError::MalformedPosterior(
            "header does not match the posterior schema".into(),
        ));
    }

    let mut draws = Vec::new();
    for record in reader.records() {
        let record = record?;
        let cell = |idx: usize| -> Result<f64, IoError> {
            record
                .get(idx)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| {
                    IoError::MalformedPosterior(format!("bad numeric cell at column {idx}"))
                })
        };
        let iteration = record
            .get(0)
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| IoError::MalformedPosterior("bad iteration cell".into()))?;
        let sigma2 = cell(1)?;
        let mut idx = 2;
        let mut beta = DVector::zeros(m);
        for k in 0..m {
            beta[k] = cell(idx)?;
            idx += 1;
        }
        let mut coeff = DMatrix::zeros(3, p);
        for r in 0..3 {
            for c in 0..p {
                coeff[(r, c)] = cell(idx)?;
                idx += 1;
            }
        }
        let mut sigma_gamma = DMatrix::zeros(3, 3);
        for (r, c) in SIGMA_GAMMA_UPPER {
            let v = cell(idx)?;
            sigma_gamma[(r, c)] = v;
            sigma_gamma[(c, r)] = v;
            idx += 1;
        }
        let mut gamma = DMatrix::zeros(n, 3);
        for i in 0..n {
            for k in 0..3 {
                gamma[(i, k)] = cell(idx)?;
                idx += 1;
            }
        }
        draws.push(Draw {
            iteration,
            gamma,
            beta,
            coeff,
            sigma2,
            sigma_gamma,
        });
    }
    if draws.is_empty() {
        return Err(IoError::MalformedPosterior("posterior csv has no rows".into()));
    }
    Ok(PosteriorSamples {
        draws,
        chain_id: meta.chain_id,
        config_fingerprint: meta.config_fingerprint.clone(),
        knots: meta.knots.clone(),
        family: meta.family,
        time_transform: meta.time_transform,
        covariate_labels: meta.covariate_labels.clone(),
        subject_ids: meta.subject_ids.clone(),
        seed: meta.seed,
        acceptance: meta.acceptance.clone(),
        proposal_scales_hash_at_freeze: meta.proposal_scales_hash_at_freeze.clone(),
        proposal_scales_hash_at_end: meta.proposal_scales_hash_at_end.clone(),
    })
}

/// Descriptive-statistics table (variable, min, quartiles, mean, max, SD).
pub fn write_summary_csv<W: Write>(stats: &DescriptiveStats, out: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variable", "min", "q1", "median", "mean", "q3", "max", "sd"])?;
    for v in &stats.variables {
        w.write_record([
            v.name.clone(),
            fmt(v.min),
            fmt(v.q1),
            fmt(v.median),
            fmt(v.mean),
            fmt(v.q3),
            fmt(v.max),
            fmt(v.sd),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_curve_csv<W: Write>(curve: &CurveEstimate, out: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["grid", "mean", "lower", "upper"])?;
    for j in 0..curve.grid.len() {
        w.write_record([
            fmt(curve.grid[j]),
            fmt(curve.mean[j]),
            fmt(curve.lower[j]),
            fmt(curve.upper[j]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Random-effect and residual SD table.
pub fn write_effects_csv<W: Write>(summary: &EffectsSummary, out: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["statistic", "value"])?;
    w.write_record(["residual_sd".into(), fmt(summary.residual_sd)])?;
    w.write_record(["sd_of_size".into(), fmt(summary.sd_size)])?;
    w.write_record(["sd_of_tempo".into(), fmt(summary.sd_tempo)])?;
    w.write_record(["sd_of_velocity".into(), fmt(summary.sd_velocity)])?;
    w.flush()?;
    Ok(())
}

/// 3x3 correlation table in (size, tempo, velocity) presentation order.
pub fn write_correlations_csv<W: Write>(summary: &EffectsSummary, out: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    // Internal order is (tempo, size, velocity); present size first.
    let order = [1usize, 0, 2];
    let names = ["size", "tempo", "velocity"];
    w.write_record(["", names[0], names[1], names[2]])?;
    for (row_pos, &r) in order.iter().enumerate() {
        let mut rec = vec![names[row_pos].to_string()];
        for &c in &order {
            rec.push(fmt(summary.correlations[r][c]));
        }
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_covariate_table_csv<W: Write>(
    summary: &EffectsSummary,
    out: W,
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["effect", "covariate", "mean", "lower", "upper"])?;
    for row in &summary.covariate_table {
        w.write_record([
            row.effect.to_string(),
            row.covariate.clone(),
            fmt(row.mean),
            fmt(row.lower),
            fmt(row.upper),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the model-comparison table (DIC per spline family).
#[derive(Debug, Clone, Serialize)]
pub struct DicTableRow {
    pub model: String,
    pub natural_cubic: Option<f64>,
    pub b_spline: Option<f64>,
}

pub fn write_dic_table_csv<W: Write>(rows: &[DicTableRow], out: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "natural_cubic", "b_spline"])?;
    for row in rows {
        w.write_record([
            row.model.clone(),
            row.natural_cubic.map(fmt).unwrap_or_default(),
            row.b_spline.map(fmt).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_knot_scan_csv<W: Write>(
    entries: &[(usize, Result<FitScore, ModelSelectionError>)],
    out: W,
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "kappa",
        "bic",
        "dic",
        "p_d",
        "mean_deviance",
        "k_parameters",
        "error",
    ])?;
    for (kappa, entry) in entries {
        match entry {
            Ok(score) => w.write_record([
                kappa.to_string(),
                fmt(score.bic),
                fmt(score.dic),
                fmt(score.p_d),
                fmt(score.mean_deviance),
                score.k_parameters.to_string(),
                String::new(),
            ])?,
            Err(e) => w.write_record([
                kappa.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                e.to_string(),
            ])?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_rhat_csv<W: Write>(
    rhats: &[(String, RhatEstimate)],
    out: W,
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["parameter", "rhat", "degenerate"])?;
    for (name, est) in rhats {
        w.write_record([
            name.clone(),
            fmt(est.value),
            est.degenerate.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ess_csv<W: Write>(rows: &[(String, usize, f64)], out: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["parameter", "chain", "ess"])?;
    for (name, chain, ess) in rows {
        w.write_record([name.clone(), chain.to_string(), fmt(*ess)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_acf_csv<W: Write>(
    rows: &[(String, usize, usize, f64)],
    out: W,
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["parameter", "chain", "lag", "acf"])?;
    for (name, chain, lag, value) in rows {
        w.write_record([name.clone(), chain.to_string(), lag.to_string(), fmt(*value)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_acceptance_csv<W: Write>(report: &AcceptanceReport, out: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["subject_id", "accepted", "proposed", "rate", "flagged"])?;
    for s in &report.per_subject {
        w.write_record([
            s.subject_id.clone(),
            s.accepted.to_string(),
            s.proposed.to_string(),
            fmt(s.rate),
            s.flagged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_qq_csv<W: Write>(
    rows: &[(String, Vec<(f64, f64)>)],
    out: W,
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["column", "theoretical", "sample"])?;
    for (label, pairs) in rows {
        for (theoretical, sample) in pairs {
            w.write_record([label.clone(), fmt(*theoretical), fmt(*sample)])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_apv_json<W: Write>(apv: &ApvEstimate, mut out: W) -> Result<(), IoError> {
    serde_json::to_writer_pretty(&mut out, apv)?;
    out.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LongitudinalDataset, McmcConfig, ModelConfig, PriorConfig, SubjectRecord};
    use crate::sampler::run_chain;

    fn small_samples() -> PosteriorSamples {
        let subjects = (0..3)
            .map(|i| SubjectRecord {
                id: format!("s{i}"),
                times: vec![0.0, 1.0, 2.0, 3.0],
                responses: vec![1.0 + i as f64 * 0.3, 2.0, 3.0, 3.5],
                covariates: vec![1.0],
            })
            .collect();
        let ds = LongitudinalDataset::from_records(subjects, vec![]).unwrap();
        let mcmc = McmcConfig {
            n_iterations: 80,
            burn_in_fraction: 0.5,
            thin: 4,
            n_chains: 1,
            seed: 7,
            ..McmcConfig::default()
        };
        let model = ModelConfig {
            n_interior_knots: 1,
            ..ModelConfig::default()
        };
        run_chain(&ds, &model, &PriorConfig::default(), &mcmc, 0).unwrap()
    }

    #[test]
    fn posterior_csv_round_trips_bit_exactly() {
        let samples = small_samples();
        let mut csv_bytes = Vec::new();
        write_posterior_csv(&samples, &mut csv_bytes).unwrap();
        let meta = FitMetadata::of(&samples);
        let mut json_bytes = Vec::new();
        write_metadata_json(&meta, &mut json_bytes).unwrap();

        let meta_back = read_metadata_json(json_bytes.as_slice()).unwrap();
        let back = read_posterior_csv(csv_bytes.as_slice(), &meta_back).unwrap();
        assert_eq!(back, samples);

        let mut rewritten = Vec::new();
        write_posterior_csv(&back, &mut rewritten).unwrap();
        assert_eq!(rewritten, csv_bytes);
    }

    #[test]
    fn posterior_headers_have_exact_names() {
        let h = posterior_headers(2, 3, 1);
        assert_eq!(h[0], "iteration");
        assert_eq!(h[1], "sigma2");
        assert_eq!(h[2], "beta[0]");
        assert_eq!(h[5], "a[0][0]");
        assert_eq!(h[8], "sigma_gamma[0][0]");
        assert_eq!(h[13], "sigma_gamma[2][2]");
        assert_eq!(h[14], "gamma[0][0]");
        assert_eq!(h.last().unwrap(), "gamma[1][2]");
    }

    #[test]
    fn mismatched_metadata_is_rejected() {
        let samples = small_samples();
        let mut csv_bytes = Vec::new();
        write_posterior_csv(&samples, &mut csv_bytes).unwrap();
        let mut meta = FitMetadata::of(&samples);
        meta.subject_ids.pop();
        assert!(matches!(
            read_posterior_csv(csv_bytes.as_slice(), &meta),
            Err(IoError::MetadataMismatch(_))
        ));
    }

    #[test]
    fn table_writers_emit_exact_headers() {
        let stats = DescriptiveStats {
            variables: vec![crate::data::VariableSummary {
                name: "time".into(),
                min: 0.0,
                q1: 1.0,
                median: 2.0,
                mean: 2.5,
                q3: 3.0,
                max: 9.0,
                sd: 1.25,
            }],
        };
        let mut buf = Vec::new();
        write_summary_csv(&stats, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("variable,min,q1,median,mean,q3,max,sd\n"));
        assert!(text.contains("time,0,1,2,2.5,3,9,1.25"));

        let curve = CurveEstimate {
            grid: vec![1.0, 2.0],
            mean: vec![3.0, 4.0],
            lower: vec![2.5, 3.5],
            upper: vec![3.5, 4.5],
            kind: crate::growth::CurveKind::Height,
        };
        let mut buf = Vec::new();
        write_curve_csv(&curve, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("grid,mean,lower,upper\n"));

        let rows = vec![DicTableRow {
            model: "without_covariates".into(),
            natural_cubic: Some(19430.39),
            b_spline: Some(24718.74),
        }];
        let mut buf = Vec::new();
        write_dic_table_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("model,natural_cubic,b_spline\n"));
        assert!(text.contains("without_covariates,19430.39,24718.74"));
    }

    #[test]
    fn correlation_table_presents_size_first() {
        let summary = EffectsSummary {
            sd_tempo: 1.0,
            sd_size: 2.0,
            sd_velocity: 0.1,
            residual_sd: 0.5,
            correlations: vec![
                vec![1.0, 0.6, -0.37],
                vec![0.6, 1.0, 0.32],
                vec![-0.37, 0.32, 1.0],
            ],
            covariate_table: vec![],
            percent_scale: false,
        };
        let mut buf = Vec::new();
        write_correlations_csv(&summary, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], ",size,tempo,velocity");
        // size row: corr(size,size)=1, corr(size,tempo)=0.6, corr(size,velocity)=0.32
        assert_eq!(lines[1], "size,1,0.6,0.32");
    }
}
