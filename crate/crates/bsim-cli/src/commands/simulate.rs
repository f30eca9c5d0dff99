//! `bsim simulate`: draw a synthetic cohort from a configured truth and
//! write it as a fit-ready CSV plus a truth JSON.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use bsim_core::data::{KnotStrategy, TimeTransform};
use bsim_core::dist::{RngStream, SpdMatrix};
use bsim_core::sampler::config_fingerprint;
use bsim_core::spline::place_knots;
use bsim_core::synthetic::{generate_dataset, DesignSpec, TruthRecord};

use super::{create_file, ensure_out_dir, EXIT_OK};
use crate::config::{matrix_from_rows, RunConfig, Schedule};
use crate::manifest::ManifestBuilder;

#[derive(Serialize)]
struct TruthJson {
    beta_true: Vec<f64>,
    sigma2_true: f64,
    sigma_gamma_true: Vec<Vec<f64>>,
    a_true: Vec<Vec<f64>>,
    gamma_true: Vec<Vec<f64>>,
    knots_interior: Vec<f64>,
    knots_boundary: (f64, f64),
    family: bsim_core::data::SplineFamily,
    time_transform: TimeTransform,
    seed: u64,
}

enum CovariateGen {
    Bernoulli(f64),
    Normal(f64, f64),
}

fn parse_covariate_gen(spec: &str) -> Result<CovariateGen> {
    let (kind, args) = spec
        .split_once(':')
        .with_context(|| format!("covariate generator '{spec}' must look like 'bernoulli:0.5'"))?;
    match kind {
        "bernoulli" => Ok(CovariateGen::Bernoulli(args.parse()?)),
        "normal" => {
            let (m, s) = args
                .split_once(',')
                .context("normal generator needs 'normal:mean,sd'")?;
            Ok(CovariateGen::Normal(m.parse()?, s.parse()?))
        }
        other => bail!("unknown covariate generator '{other}'"),
    }
}

pub fn run(cfg: &RunConfig, config_path: &Path, out_dir: &Path) -> Result<i32> {
    let sim = cfg
        .simulate
        .as_ref()
        .context("config is missing the [simulate] section")?;
    let model = cfg.model.to_model_config();
    let prior = cfg.prior.to_prior_config()?;
    let mcmc = cfg.mcmc.to_mcmc_config()?;
    let seed = mcmc.seed;

    let transform = model.time_transform;
    let to_model = |t: f64| match transform {
        TimeTransform::None => t,
        TimeTransform::Log => t.ln(),
    };
    let to_original = |u: f64| match transform {
        TimeTransform::None => u,
        TimeTransform::Log => u.exp(),
    };
    if transform == TimeTransform::Log && sim.time_lower <= 0.0 {
        bail!("log time transform requires time_lower > 0");
    }

    let (lo, hi) = (to_model(sim.time_lower), to_model(sim.time_upper));
    let knots = place_knots(&[lo, hi], model.n_interior_knots, KnotStrategy::EqualSpacing)?;
    if sim.beta_true.len() != knots.n_basis() {
        bail!(
            "beta_true has length {}, expected {} (n_interior_knots + 2)",
            sim.beta_true.len(),
            knots.n_basis()
        );
    }
    let sigma_gamma_true = match (&sim.sigma_gamma, &sim.sigma_gamma_diag) {
        (Some(rows), _) => SpdMatrix::new(matrix_from_rows(rows, 3, "simulate.sigma_gamma")?)
            .context("simulate.sigma_gamma must be SPD")?,
        (None, Some(diag)) => {
            anyhow::ensure!(diag.len() == 3, "sigma_gamma_diag needs 3 entries");
            SpdMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(diag.clone())))
                .context("sigma_gamma_diag must be positive")?
        }
        (None, None) => bail!("simulate needs sigma_gamma or sigma_gamma_diag"),
    };
    let generators: Vec<CovariateGen> = sim
        .covariates
        .iter()
        .map(|s| parse_covariate_gen(s))
        .collect::<Result<_>>()?;
    let p = 1 + generators.len();
    let a_true = match &sim.a_true {
        None => DMatrix::zeros(3, p),
        Some(rows) => {
            anyhow::ensure!(
                rows.len() == 3 && rows.iter().all(|r| r.len() == p),
                "a_true must be 3 x {p} (intercept column first)"
            );
            DMatrix::from_fn(3, p, |i, j| rows[i][j])
        }
    };
    let covariate_names = if sim.covariate_names.len() == generators.len() {
        sim.covariate_names.clone()
    } else if sim.covariate_names.is_empty() {
        (0..generators.len()).map(|k| format!("x{k}")).collect()
    } else {
        bail!("covariate_names must match the covariates list length");
    };

    // Observation schedules in model-scale time, covariates per subject.
    let mut design_rng = RngStream::new(seed, 2);
    let mut time_grids = Vec::with_capacity(sim.n_subjects);
    let mut covariates = Vec::with_capacity(sim.n_subjects);
    for _ in 0..sim.n_subjects {
        let grid: Vec<f64> = match sim.schedule {
            Schedule::Regular => (0..sim.obs_per_subject)
                .map(|j| lo + (hi - lo) * j as f64 / (sim.obs_per_subject - 1).max(1) as f64)
                .collect(),
            Schedule::UniformRandom => {
                let mut t: Vec<f64> = (0..sim.obs_per_subject)
                    .map(|_| lo + (hi - lo) * design_rng.random::<f64>())
                    .collect();
                t.sort_by(|a, b| a.partial_cmp(b).unwrap());
                t
            }
        };
        time_grids.push(grid);
        let mut x = vec![1.0];
        for g in &generators {
            let v = match g {
                CovariateGen::Bernoulli(prob) => (design_rng.random::<f64>() < *prob) as u8 as f64,
                CovariateGen::Normal(mean, sd) => {
                    let z: f64 = design_rng.sample(rand_distr::StandardNormal);
                    mean + sd * z
                }
            };
            x.push(v);
        }
        covariates.push(x);
    }
    let design = DesignSpec {
        time_grids,
        covariates,
        covariate_names: covariate_names.clone(),
    };
    let truth = TruthRecord {
        beta_true: DVector::from_vec(sim.beta_true.clone()),
        sigma2_true: sim.sigma2_true,
        sigma_gamma_true,
        a_true,
        gamma_true: DMatrix::zeros(0, 3),
        knots,
        family: model.spline_family,
    };
    let mut gen_rng = RngStream::new(seed, 3);
    let (ds, realized) = generate_dataset(&truth, &design, &mut gen_rng)?;

    ensure_out_dir(out_dir)?;
    let fingerprint = config_fingerprint(&model, &prior, &mcmc);
    let mut manifest = ManifestBuilder::new("simulate", config_path, out_dir, fingerprint);

    // Fit-ready CSV in original time units, with the column names the
    // [data] section expects so the same config drives a fit.
    let (id_col, time_col, resp_col) = match &cfg.data {
        Some(d) => (d.id.clone(), d.time.clone(), d.response.clone()),
        None => ("id".into(), "time".into(), "response".into()),
    };
    let data_path = out_dir.join("data.csv");
    {
        let mut w = create_file(&data_path)?;
        let mut header = format!("{id_col},{time_col},{resp_col}");
        for name in &covariate_names {
            header.push(',');
            header.push_str(name);
        }
        writeln!(w, "{header}")?;
        for subject in ds.subjects() {
            for (t, y) in subject.times.iter().zip(subject.responses.iter()) {
                let mut line = format!("{},{},{}", subject.id, to_original(*t), y);
                for v in &subject.covariates[1..] {
                    line.push_str(&format!(",{v}"));
                }
                writeln!(w, "{line}")?;
            }
        }
    }
    manifest.add(data_path);

    let truth_path = out_dir.join("truth.json");
    let truth_json = TruthJson {
        beta_true: realized.beta_true.iter().copied().collect(),
        sigma2_true: realized.sigma2_true,
        sigma_gamma_true: (0..3)
            .map(|i| (0..3).map(|j| realized.sigma_gamma_true.as_matrix()[(i, j)]).collect())
            .collect(),
        a_true: (0..3)
            .map(|i| (0..realized.a_true.ncols()).map(|j| realized.a_true[(i, j)]).collect())
            .collect(),
        gamma_true: (0..realized.gamma_true.nrows())
            .map(|i| (0..3).map(|j| realized.gamma_true[(i, j)]).collect())
            .collect(),
        knots_interior: realized.knots.interior.clone(),
        knots_boundary: realized.knots.boundary,
        family: realized.family,
        time_transform: transform,
        seed,
    };
    let mut json = serde_json::to_string_pretty(&truth_json)?;
    json.push('\n');
    std::fs::write(&truth_path, json)?;
    manifest.add(truth_path);

    manifest.finish()?;
    Ok(EXIT_OK)
}
