//! End-to-end tests of the `bsim` binary: the full
//! simulate/fit/diagnose/curves/compare pipeline, exit codes, output
//! schemas, and bit-level reproducibility.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bsim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bsim"))
}

fn run_ok(args: &[&str]) -> Output {
    run_expecting(args, &[0])
}

/// Runs the binary and asserts the exit code is one of `accept`.
fn run_expecting(args: &[&str], accept: &[i32]) -> Output {
    let out = bsim()
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .unwrap();
    let code = out.status.code();
    assert!(
        code.is_some_and(|c| accept.contains(&c)),
        "command {:?} exited {:?} (wanted {:?})\nstdout: {}\nstderr: {}",
        args,
        code,
        accept,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn base_config(dir: &Path, iterations: usize, chains: usize, sigma_gamma: &str) -> String {
    format!(
        r#"
[data]
path = "{dir}/sim/data.csv"
id = "id"
time = "age"
response = "height"

[model]
spline_family = "natural_cubic"
n_interior_knots = 2
time_transform = "none"

[prior]

[mcmc]
iterations = {iterations}
burn_in_fraction = 0.5
thin = 5
chains = {chains}
seed = 20240817

[output]
dir = "{dir}/out"

[simulate]
n_subjects = 100
obs_per_subject = 10
time_lower = 0.0
time_upper = 10.0
beta_true = [80.0, 1.5, -0.8, 0.4]
sigma2_true = 0.25
sigma_gamma_diag = {sigma_gamma}

[diagnose]
fit_dir = "{dir}/fit"
max_lag = 10

[compare]
kappa_range = [0, 1]
families = ["natural_cubic"]
iterations = 1500

[curves]
fit_dir = "{dir}/fit"
grid_size = 64
subjects = [0]
"#,
        dir = dir.display()
    )
}

fn schema_validator(name: &str) -> jsonschema::Validator {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("schemas")
        .join(name);
    let schema: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

fn assert_valid(schema: &str, path: &Path) {
    let value: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let validator = schema_validator(schema);
    let errors: Vec<String> = validator.iter_errors(&value).map(|e| e.to_string()).collect();
    assert!(
        errors.is_empty(),
        "{} fails {schema}: {errors:?}",
        path.display()
    );
}

fn manifest_artifacts(dir: &Path) -> Vec<PathBuf> {
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap())
            .unwrap();
    manifest["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| dir.join(a.as_str().unwrap()))
        .collect()
}

fn hash_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            out.insert(
                entry.file_name().to_string_lossy().into_owned(),
                std::fs::read(entry.path()).unwrap(),
            );
        }
    }
    out
}

#[test]
fn full_pipeline_produces_schema_valid_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, base_config(dir, 20000, 3, "[0.09, 4.0, 0.01]")).unwrap();
    let cfg = config_path.to_str().unwrap();

    // simulate
    let sim_dir = dir.join("sim");
    run_ok(&["simulate", "--config", cfg, "--out", sim_dir.to_str().unwrap()]);
    assert!(sim_dir.join("data.csv").exists());
    assert_valid("truth.schema.json", &sim_dir.join("truth.json"));
    assert_valid("manifest.schema.json", &sim_dir.join("manifest.json"));
    let data_text = std::fs::read_to_string(sim_dir.join("data.csv")).unwrap();
    assert!(data_text.starts_with("id,age,height\n"));

    // fit
    let fit_dir = dir.join("fit");
    run_ok(&["fit", "--config", cfg, "--out", fit_dir.to_str().unwrap()]);
    for artifact in manifest_artifacts(&fit_dir) {
        assert!(artifact.exists(), "missing {}", artifact.display());
    }
    assert_valid("manifest.schema.json", &fit_dir.join("manifest.json"));
    for chain in 0..3 {
        assert_valid(
            "fit_metadata.schema.json",
            &fit_dir.join(format!("metadata_chain{chain}.json")),
        );
    }
    assert_valid("fit_diagnostics.schema.json", &fit_dir.join("diagnostics.json"));
    let posterior = std::fs::read_to_string(fit_dir.join("posterior_chain0.csv")).unwrap();
    let header = posterior.lines().next().unwrap();
    assert!(header.starts_with("iteration,sigma2,beta[0],beta[1],beta[2],beta[3],a[0][0],"));
    assert!(header.contains("sigma_gamma[0][0]"));
    assert!(header.contains("gamma[0][0]"));
    assert!(header.ends_with("gamma[99][2]"));
    let summary = std::fs::read_to_string(fit_dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("variable,min,q1,median,mean,q3,max,sd\n"));

    // diagnose
    let diag_dir = dir.join("diag");
    run_ok(&["diagnose", "--config", cfg, "--out", diag_dir.to_str().unwrap()]);
    assert_valid("diagnostics.schema.json", &diag_dir.join("diagnostics.json"));
    assert_valid("manifest.schema.json", &diag_dir.join("manifest.json"));
    for file in ["rhat.csv", "ess.csv", "autocorrelation.csv", "qq.csv", "acceptance.csv"] {
        assert!(diag_dir.join(file).exists(), "missing {file}");
    }

    // curves
    let curves_dir = dir.join("curves");
    run_ok(&["curves", "--config", cfg, "--out", curves_dir.to_str().unwrap()]);
    assert_valid("apv.schema.json", &curves_dir.join("apv.json"));
    let mean_curve = std::fs::read_to_string(curves_dir.join("mean_curve.csv")).unwrap();
    assert!(mean_curve.starts_with("grid,mean,lower,upper\n"));
    assert_eq!(mean_curve.lines().count(), 65);
    assert!(curves_dir.join("subject_0_curve.csv").exists());
    assert!(curves_dir.join("effects.csv").exists());
    let corr = std::fs::read_to_string(curves_dir.join("correlations.csv")).unwrap();
    assert!(corr.starts_with(",size,tempo,velocity\n"));

    // compare
    let cmp_dir = dir.join("cmp");
    run_ok(&["compare", "--config", cfg, "--out", cmp_dir.to_str().unwrap()]);
    let dic_table = std::fs::read_to_string(cmp_dir.join("dic_table.csv")).unwrap();
    assert!(dic_table.starts_with("model,natural_cubic,b_spline\n"));
    let scan = std::fs::read_to_string(cmp_dir.join("knot_scan.csv")).unwrap();
    assert!(scan.starts_with("kappa,bic,dic,p_d,mean_deviance,k_parameters,error\n"));
    assert_eq!(scan.lines().count(), 3);
}

#[test]
fn rerun_overwrites_with_bit_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, base_config(dir, 400, 2, "[0.01, 0.04, 0.001]")).unwrap();
    let cfg = config_path.to_str().unwrap();
    let sim_dir = dir.join("sim");
    run_ok(&["simulate", "--config", cfg, "--out", sim_dir.to_str().unwrap()]);

    let fit_dir = dir.join("fit");
    run_expecting(&["fit", "--config", cfg, "--out", fit_dir.to_str().unwrap()], &[0, 2]);
    let first = hash_dir(&fit_dir);
    run_expecting(&["fit", "--config", cfg, "--out", fit_dir.to_str().unwrap()], &[0, 2]);
    let second = hash_dir(&fit_dir);
    assert_eq!(first, second, "re-run changed output bytes");
}

#[test]
fn parallel_and_serial_posteriors_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, base_config(dir, 400, 2, "[0.01, 0.04, 0.001]")).unwrap();
    let cfg = config_path.to_str().unwrap();
    let sim_dir = dir.join("sim");
    run_ok(&["simulate", "--config", cfg, "--out", sim_dir.to_str().unwrap()]);

    let serial_dir = dir.join("serial");
    let parallel_dir = dir.join("parallel");
    run_expecting(
        &["fit", "--config", cfg, "--out", serial_dir.to_str().unwrap(), "--threads", "1"],
        &[0, 2],
    );
    run_expecting(
        &["fit", "--config", cfg, "--out", parallel_dir.to_str().unwrap(), "--threads", "8"],
        &[0, 2],
    );
    for chain in 0..2 {
        let a = std::fs::read(serial_dir.join(format!("posterior_chain{chain}.csv"))).unwrap();
        let b = std::fs::read(parallel_dir.join(format!("posterior_chain{chain}.csv"))).unwrap();
        assert_eq!(a, b, "chain {chain} differs between 1 and 8 threads");
    }
}

#[test]
fn missing_dataset_exits_one_and_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, base_config(dir, 400, 1, "[0.01, 0.04, 0.001]")).unwrap();
    // No simulate step: the dataset path does not exist.
    let out = bsim()
        .args(["fit", "--config", config_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("sim/data.csv"), "stderr: {stderr}");
}

#[test]
fn under_budget_fit_exits_two_with_rhat_listing() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config_path = dir.join("config.toml");
    // Large latent variance and a tiny iteration budget: two chains cannot
    // converge, so the fit must flag rhat and exit 2.
    std::fs::write(&config_path, base_config(dir, 60, 2, "[0.5, 9.0, 0.05]")).unwrap();
    let cfg = config_path.to_str().unwrap();
    let sim_dir = dir.join("sim");
    run_ok(&["simulate", "--config", cfg, "--out", sim_dir.to_str().unwrap()]);

    let fit_dir = dir.join("fit");
    let out = bsim()
        .args(["fit", "--config", cfg, "--out", fit_dir.to_str().unwrap()])
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(2),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("rhat"), "stderr: {stderr}");
    // Outputs are still written in full on a warning exit.
    for artifact in manifest_artifacts(&fit_dir) {
        assert!(artifact.exists());
    }
}

#[test]
fn bad_flags_exit_one() {
    let out = bsim().args(["fit", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}
