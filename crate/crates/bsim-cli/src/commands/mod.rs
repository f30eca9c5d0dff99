pub mod compare;
pub mod curves;
pub mod diagnose;
pub mod fit;
pub mod simulate;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use bsim_core::data::{load_dataset, LongitudinalDataset};
use bsim_core::io::{read_metadata_json, read_posterior_csv, FitMetadata};
use bsim_core::sampler::PosteriorSamples;

use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONVERGENCE_WARNING: i32 = 2;

pub fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub fn create_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| {
        format!("cannot create {}", path.display())
    })?))
}

pub fn load_configured_dataset(cfg: &RunConfig) -> Result<LongitudinalDataset> {
    let data = cfg
        .data
        .as_ref()
        .context("config is missing the [data] section")?;
    let ds = load_dataset(&data.path, &data.csv_schema())
        .with_context(|| format!("cannot load dataset {}", data.path.display()))?;
    Ok(ds)
}

pub fn posterior_paths(dir: &Path, chain_id: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("posterior_chain{chain_id}.csv")),
        dir.join(format!("metadata_chain{chain_id}.json")),
    )
}

/// Loads every chain written by a previous fit from `dir`.
pub fn read_fit_outputs(dir: &Path) -> Result<Vec<PosteriorSamples>> {
    let mut chains = Vec::new();
    for chain_id in 0.. {
        let (csv_path, json_path) = posterior_paths(dir, chain_id);
        if !csv_path.exists() {
            break;
        }
        let meta: FitMetadata = read_metadata_json(
            File::open(&json_path)
                .with_context(|| format!("cannot open {}", json_path.display()))?,
        )?;
        let samples = read_posterior_csv(
            File::open(&csv_path)
                .with_context(|| format!("cannot open {}", csv_path.display()))?,
            &meta,
        )?;
        chains.push(samples);
    }
    anyhow::ensure!(
        !chains.is_empty(),
        "no posterior_chain*.csv found in {}",
        dir.display()
    );
    Ok(chains)
}
