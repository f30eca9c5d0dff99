//! `bsim diagnose`: convergence and mixing diagnostics over a previous
//! fit's outputs.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Result;
use serde::Serialize;

use bsim_core::diagnostics::{
    acceptance_report, autocorrelation, effective_sample_size, gelman_rubin, global_traces,
    qq_export, RHAT_PASS_MARK,
};
use bsim_core::io::{
    write_acceptance_csv, write_acf_csv, write_ess_csv, write_qq_csv, write_rhat_csv,
};
use bsim_core::sampler::PosteriorSamples;

use super::{create_file, ensure_out_dir, read_fit_outputs, EXIT_CONVERGENCE_WARNING, EXIT_OK};
use crate::config::RunConfig;
use crate::manifest::ManifestBuilder;

#[derive(Serialize)]
struct DiagnoseSummary {
    rhat_pass_mark: f64,
    rhat: BTreeMap<String, f64>,
    max_rhat: Option<f64>,
    converged: Option<bool>,
    min_ess: Option<f64>,
    mean_acceptance_rate: f64,
    share_acceptance_in_band: f64,
    n_flagged_subjects: usize,
    n_chains: usize,
}

pub fn run(cfg: &RunConfig, config_path: &Path, out_dir: &Path) -> Result<i32> {
    let fit_dir = cfg.diagnose.fit_dir.clone().unwrap_or_else(|| out_dir.to_path_buf());
    let chains = read_fit_outputs(&fit_dir)?;
    let chain_refs: Vec<&PosteriorSamples> = chains.iter().collect();

    ensure_out_dir(out_dir)?;
    let mut manifest = ManifestBuilder::new(
        "diagnose",
        config_path,
        out_dir,
        chains[0].config_fingerprint.clone(),
    );

    let traces = global_traces(&chain_refs);
    let mut rhat_rows = Vec::new();
    let mut rhat_map = BTreeMap::new();
    let mut max_rhat: Option<f64> = None;
    if chains.len() >= 2 {
        for trace in &traces {
            let est = gelman_rubin(trace)?;
            rhat_map.insert(trace.name.clone(), est.value);
            if max_rhat.is_none_or(|m| est.value > m) {
                max_rhat = Some(est.value);
            }
            rhat_rows.push((trace.name.clone(), est));
        }
        let rhat_path = out_dir.join("rhat.csv");
        write_rhat_csv(&rhat_rows, create_file(&rhat_path)?)?;
        manifest.add(rhat_path);
    }

    let mut ess_rows = Vec::new();
    let mut min_ess: Option<f64> = None;
    let mut acf_rows = Vec::new();
    let max_lag = cfg.diagnose.max_lag;
    for trace in &traces {
        for (chain_idx, series) in trace.chains.iter().enumerate() {
            if let Ok(ess) = effective_sample_size(series) {
                if min_ess.is_none_or(|m| ess < m) {
                    min_ess = Some(ess);
                }
                ess_rows.push((trace.name.clone(), chain_idx, ess));
            }
            if let Ok(acf) = autocorrelation(series, max_lag.min(series.len() - 1)) {
                for (lag, value) in acf.iter().enumerate() {
                    acf_rows.push((trace.name.clone(), chain_idx, lag, *value));
                }
            }
        }
    }
    let ess_path = out_dir.join("ess.csv");
    write_ess_csv(&ess_rows, create_file(&ess_path)?)?;
    manifest.add(ess_path);
    let acf_path = out_dir.join("autocorrelation.csv");
    write_acf_csv(&acf_rows, create_file(&acf_path)?)?;
    manifest.add(acf_path);

    // Q-Q data for the posterior-mean latent effects across subjects.
    let n_subjects = chains[0].draws[0].gamma.nrows();
    let n_draws: usize = chains.iter().map(|c| c.draws.len()).sum();
    let mut qq_rows = Vec::new();
    for (k, label) in [(0usize, "tempo"), (1, "size"), (2, "velocity")] {
        let mut means = vec![0.0; n_subjects];
        for chain in &chains {
            for draw in &chain.draws {
                for (i, m) in means.iter_mut().enumerate() {
                    *m += draw.gamma[(i, k)];
                }
            }
        }
        for m in &mut means {
            *m /= n_draws as f64;
        }
        if let Ok(pairs) = qq_export(&means) {
            qq_rows.push((label.to_string(), pairs));
        }
    }
    let qq_path = out_dir.join("qq.csv");
    write_qq_csv(&qq_rows, create_file(&qq_path)?)?;
    manifest.add(qq_path);

    let report = acceptance_report(&chain_refs);
    let acceptance_path = out_dir.join("acceptance.csv");
    write_acceptance_csv(&report, create_file(&acceptance_path)?)?;
    manifest.add(acceptance_path);

    let summary = DiagnoseSummary {
        rhat_pass_mark: RHAT_PASS_MARK,
        rhat: rhat_map,
        max_rhat,
        converged: max_rhat.map(|m| m < RHAT_PASS_MARK),
        min_ess,
        mean_acceptance_rate: report.mean_rate,
        share_acceptance_in_band: report.share_in_band,
        n_flagged_subjects: report.n_flagged,
        n_chains: chains.len(),
    };
    let summary_path = out_dir.join("diagnostics.json");
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    std::fs::write(&summary_path, json)?;
    manifest.add(summary_path);

    manifest.finish()?;

    if max_rhat.is_some_and(|m| m >= RHAT_PASS_MARK) {
        eprintln!("convergence warning: max rhat {:.4}", max_rhat.unwrap());
        return Ok(EXIT_CONVERGENCE_WARNING);
    }
    Ok(EXIT_OK)
}
