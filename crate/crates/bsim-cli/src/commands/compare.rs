//! `bsim compare`: DIC comparison across spline families (with and without
//! covariates when configured) and a BIC scan over knot counts.

use std::path::Path;

use anyhow::Result;

use bsim_core::data::{ModelConfig, SplineFamily};
use bsim_core::io::{write_dic_table_csv, write_knot_scan_csv, DicTableRow};
use bsim_core::model_selection::{bic_knot_scan, dic};
use bsim_core::sampler::{build_context, config_fingerprint, run_chain_with_context};

use super::{create_file, ensure_out_dir, load_configured_dataset, EXIT_OK};
use crate::config::RunConfig;
use crate::manifest::ManifestBuilder;

pub fn run(cfg: &RunConfig, config_path: &Path, out_dir: &Path) -> Result<i32> {
    let compare = cfg
        .compare
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("config is missing the [compare] section"))?;
    let base_model = cfg.model.to_model_config();
    let prior = cfg.prior.to_prior_config()?;
    let mut mcmc = cfg.mcmc.to_mcmc_config()?;
    if let Some(iterations) = compare.iterations {
        mcmc.n_iterations = iterations;
        mcmc.validate()?;
    }
    let ds = load_configured_dataset(cfg)?;

    ensure_out_dir(out_dir)?;
    let fingerprint = config_fingerprint(&base_model, &prior, &mcmc);
    let mut manifest = ManifestBuilder::new("compare", config_path, out_dir, fingerprint);

    let score = |model: &ModelConfig| -> Result<f64> {
        let ctx = build_context(&ds, model, &prior)?;
        let samples = run_chain_with_context(&ctx, &mcmc, 0)?;
        Ok(dic(&[&samples], &ctx)?.dic)
    };

    let covariate_settings: Vec<bool> = if compare.with_and_without_covariates
        && !base_model.covariate_selection.is_empty()
    {
        vec![false, true]
    } else {
        vec![base_model.use_covariates]
    };
    let mut rows = Vec::new();
    for &use_covariates in &covariate_settings {
        let label = if use_covariates {
            "with_covariates"
        } else {
            "without_covariates"
        };
        let mut row = DicTableRow {
            model: label.to_string(),
            natural_cubic: None,
            b_spline: None,
        };
        for &family in &compare.families {
            let model = ModelConfig {
                spline_family: family,
                use_covariates,
                ..base_model.clone()
            };
            let value = score(&model)?;
            match family {
                SplineFamily::NaturalCubic => row.natural_cubic = Some(value),
                SplineFamily::BSpline => row.b_spline = Some(value),
            }
        }
        rows.push(row);
    }
    let dic_path = out_dir.join("dic_table.csv");
    write_dic_table_csv(&rows, create_file(&dic_path)?)?;
    manifest.add(dic_path);

    if !compare.kappa_range.is_empty() {
        let scan = bic_knot_scan(&ds, &base_model, &prior, &mcmc, &compare.kappa_range);
        let scan_path = out_dir.join("knot_scan.csv");
        write_knot_scan_csv(&scan, create_file(&scan_path)?)?;
        manifest.add(scan_path);
    }

    manifest.finish()?;
    Ok(EXIT_OK)
}
