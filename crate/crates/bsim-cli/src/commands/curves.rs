//! `bsim curves`: posterior growth analytics from a previous fit — mean and
//! velocity curves, age at peak velocity, subject curves, and the
//! random-effects summary tables.

use std::path::Path;

use anyhow::Result;
use nalgebra::DVector;

use bsim_core::growth::{
    age_at_peak_velocity, effects_summary, mean_curve, subject_curve, velocity_curve,
};
use bsim_core::io::{
    write_apv_json, write_correlations_csv, write_covariate_table_csv, write_curve_csv,
    write_effects_csv,
};
use bsim_core::sampler::PosteriorSamples;

use super::{create_file, ensure_out_dir, read_fit_outputs, EXIT_OK};
use crate::config::RunConfig;
use crate::manifest::ManifestBuilder;

pub fn run(cfg: &RunConfig, config_path: &Path, out_dir: &Path) -> Result<i32> {
    let fit_dir = cfg.curves.fit_dir.clone().unwrap_or_else(|| out_dir.to_path_buf());
    let chains = read_fit_outputs(&fit_dir)?;
    let chain_refs: Vec<&PosteriorSamples> = chains.iter().collect();
    let grid_size = cfg.curves.grid_size;

    ensure_out_dir(out_dir)?;
    let mut manifest = ManifestBuilder::new(
        "curves",
        config_path,
        out_dir,
        chains[0].config_fingerprint.clone(),
    );

    let profiles: Vec<(String, Option<DVector<f64>>)> = if cfg.curves.covariate_profiles.is_empty()
    {
        vec![(String::new(), None)]
    } else {
        cfg.curves
            .covariate_profiles
            .iter()
            .enumerate()
            .map(|(k, p)| (format!("_profile{k}"), Some(DVector::from_vec(p.clone()))))
            .collect()
    };

    for (suffix, profile) in &profiles {
        let mean = mean_curve(&chain_refs, grid_size, profile.as_ref())?;
        let mean_path = out_dir.join(format!("mean_curve{suffix}.csv"));
        write_curve_csv(&mean, create_file(&mean_path)?)?;
        manifest.add(mean_path);

        let velocity = velocity_curve(&chain_refs, grid_size, profile.as_ref())?;
        let velocity_path = out_dir.join(format!("velocity_curve{suffix}.csv"));
        write_curve_csv(&velocity, create_file(&velocity_path)?)?;
        manifest.add(velocity_path);

        let apv = age_at_peak_velocity(&chain_refs, grid_size.max(64), profile.as_ref())?;
        let apv_path = out_dir.join(format!("apv{suffix}.json"));
        write_apv_json(&apv, create_file(&apv_path)?)?;
        manifest.add(apv_path);
    }

    for &subject_index in &cfg.curves.subjects {
        let curve = subject_curve(&chain_refs, subject_index, grid_size)?;
        let path = out_dir.join(format!("subject_{subject_index}_curve.csv"));
        write_curve_csv(&curve, create_file(&path)?)?;
        manifest.add(path);
    }

    let summary = effects_summary(&chain_refs, cfg.output.percent_effects)?;
    let effects_path = out_dir.join("effects.csv");
    write_effects_csv(&summary, create_file(&effects_path)?)?;
    manifest.add(effects_path);
    let corr_path = out_dir.join("correlations.csv");
    write_correlations_csv(&summary, create_file(&corr_path)?)?;
    manifest.add(corr_path);
    if !summary.covariate_table.is_empty() {
        let cov_path = out_dir.join("covariate_effects.csv");
        write_covariate_table_csv(&summary, create_file(&cov_path)?)?;
        manifest.add(cov_path);
    }

    manifest.finish()?;
    Ok(EXIT_OK)
}
