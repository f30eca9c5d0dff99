//! `bsim fit`: run the configured chains, write per-chain posteriors with
//! metadata, pooled diagnostics, and the dataset summary.

use std::path::Path;

use anyhow::Result;
use serde::Serialize;

use bsim_core::data::summarize_dataset;
use bsim_core::diagnostics::{acceptance_report, gelman_rubin, global_traces, RHAT_PASS_MARK};
use bsim_core::io::{
    write_acceptance_csv, write_metadata_json, write_posterior_csv, write_rhat_csv,
    write_summary_csv, FitMetadata,
};
use bsim_core::sampler::{config_fingerprint, run_chains, PosteriorSamples};

use super::{
    create_file, ensure_out_dir, load_configured_dataset, posterior_paths, EXIT_CONVERGENCE_WARNING,
    EXIT_OK,
};
use crate::config::RunConfig;
use crate::manifest::ManifestBuilder;

#[derive(Serialize)]
struct FitDiagnosticsSummary {
    rhat_pass_mark: f64,
    max_rhat: Option<f64>,
    worst_parameter: Option<String>,
    converged: Option<bool>,
    offending_parameters: Vec<String>,
    mean_acceptance_rate: f64,
    share_acceptance_in_band: f64,
    n_chains: usize,
    retained_draws_per_chain: usize,
}

pub fn run(cfg: &RunConfig, config_path: &Path, out_dir: &Path) -> Result<i32> {
    let model = cfg.model.to_model_config();
    let prior = cfg.prior.to_prior_config()?;
    let mcmc = cfg.mcmc.to_mcmc_config()?;
    let ds = load_configured_dataset(cfg)?;

    ensure_out_dir(out_dir)?;
    let fingerprint = config_fingerprint(&model, &prior, &mcmc);
    let mut manifest = ManifestBuilder::new("fit", config_path, out_dir, fingerprint);

    let summary_path = out_dir.join("summary.csv");
    write_summary_csv(&summarize_dataset(&ds), create_file(&summary_path)?)?;
    manifest.add(summary_path);

    let chains = run_chains(&ds, &model, &prior, &mcmc)?;
    let data_section = cfg.data.as_ref();
    for chain in &chains {
        let (csv_path, json_path) = posterior_paths(out_dir, chain.chain_id);
        write_posterior_csv(chain, create_file(&csv_path)?)?;
        let mut meta = FitMetadata::of(chain);
        if let Some(data) = data_section {
            meta.time_unit = data.time_unit.clone();
            meta.response_unit = data.response_unit.clone();
        }
        write_metadata_json(&meta, create_file(&json_path)?)?;
        manifest.add(csv_path);
        manifest.add(json_path);
    }

    let chain_refs: Vec<&PosteriorSamples> = chains.iter().collect();
    let report = acceptance_report(&chain_refs);
    let acceptance_path = out_dir.join("acceptance.csv");
    write_acceptance_csv(&report, create_file(&acceptance_path)?)?;
    manifest.add(acceptance_path);

    let mut offending = Vec::new();
    let mut max_rhat: Option<f64> = None;
    let mut worst = None;
    if chains.len() >= 2 {
        let mut rhats = Vec::new();
        for trace in global_traces(&chain_refs) {
            let est = gelman_rubin(&trace)?;
            if max_rhat.is_none_or(|m| est.value > m) {
                max_rhat = Some(est.value);
                worst = Some(trace.name.clone());
            }
            if est.value >= RHAT_PASS_MARK {
                offending.push(format!("{} (rhat {:.4})", trace.name, est.value));
            }
            rhats.push((trace.name, est));
        }
        let rhat_path = out_dir.join("rhat.csv");
        write_rhat_csv(&rhats, create_file(&rhat_path)?)?;
        manifest.add(rhat_path);
    }

    let diag = FitDiagnosticsSummary {
        rhat_pass_mark: RHAT_PASS_MARK,
        max_rhat,
        worst_parameter: worst,
        converged: max_rhat.map(|m| m < RHAT_PASS_MARK),
        offending_parameters: offending.clone(),
        mean_acceptance_rate: report.mean_rate,
        share_acceptance_in_band: report.share_in_band,
        n_chains: chains.len(),
        retained_draws_per_chain: chains[0].draws.len(),
    };
    let diag_path = out_dir.join("diagnostics.json");
    let mut json = serde_json::to_string_pretty(&diag)?;
    json.push('\n');
    std::fs::write(&diag_path, json)?;
    manifest.add(diag_path);

    manifest.finish()?;

    if !offending.is_empty() {
        eprintln!(
            "convergence warning: rhat >= {RHAT_PASS_MARK} for {}",
            offending.join(", ")
        );
        return Ok(EXIT_CONVERGENCE_WARNING);
    }
    Ok(EXIT_OK)
}
