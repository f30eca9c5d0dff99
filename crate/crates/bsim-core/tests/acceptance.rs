//! Acceptance suite: one test per release criterion, each printing a
//! pass/fail line (run with `cargo test --test acceptance -- --nocapture`
//! to see them). Tolerances are pinned in code next to each check.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use bsim_core::data::{
    KnotStrategy, LongitudinalDataset, McmcConfig, ModelConfig, PriorConfig, SplineFamily,
    SubjectRecord, TimeTransform,
};
use bsim_core::diagnostics::{
    acceptance_report, autocorrelation, effective_sample_size, gelman_rubin, global_traces,
    ScalarTrace,
};
use bsim_core::dist::{RngStream, SpdMatrix};
use bsim_core::growth::{age_at_peak_velocity, velocity_curve};
use bsim_core::io::write_posterior_csv;
use bsim_core::model_selection::{bic_knot_scan, dic};
use bsim_core::sampler::{
    adapt_proposals, build_context, initialize_state, run_chain, run_chain_with_context,
    update_alpha, update_beta, update_gamma_i, update_sigma2, update_sigma_gamma, ChainState,
    Draw, Globals, PosteriorSamples, SIZE, TEMPO, VELOCITY,
};
use bsim_core::spline::{eval_basis, place_knots, KnotSet};
use bsim_core::synthetic::{
    generate_dataset, grid_posterior_1d, oracles, DesignSpec, FreeComponent, TruthRecord,
};

fn pass(criterion: &str, detail: String) {
    println!("[PASS] {criterion}: {detail}");
}

fn ls_fit_beta(knots: &KnotSet, target: impl Fn(f64) -> f64) -> DVector<f64> {
    let (lo, hi) = knots.boundary;
    let grid: Vec<f64> = (0..512)
        .map(|i| lo + (hi - lo) * i as f64 / 511.0)
        .collect();
    let basis = eval_basis(knots, SplineFamily::NaturalCubic, &grid);
    let y = DVector::from_iterator(512, grid.iter().map(|&u| target(u)));
    basis.values.svd(true, true).solve(&y, 1e-12).unwrap()
}

fn quantile_of(draws: &[f64], p: f64) -> f64 {
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

// ---------------------------------------------------------------- criterion 1

struct FixedInstance {
    ctx: bsim_core::sampler::ModelContext,
    state: ChainState,
}

/// N = 3, T_i = 4, kappa = 2, p = 2, with every parameter pinned to fixed
/// values so each conjugate update draws from one analytic conditional.
fn fixed_instance() -> FixedInstance {
    let subjects = vec![
        SubjectRecord {
            id: "s0".into(),
            times: vec![0.0, 1.0, 2.0, 3.0],
            responses: vec![1.1, 1.9, 2.7, 3.9],
            covariates: vec![1.0, 0.0],
        },
        SubjectRecord {
            id: "s1".into(),
            times: vec![0.5, 1.5, 2.5, 3.5],
            responses: vec![1.4, 2.3, 3.1, 4.4],
            covariates: vec![1.0, 1.0],
        },
        SubjectRecord {
            id: "s2".into(),
            times: vec![0.2, 1.2, 2.4, 3.6],
            responses: vec![0.9, 2.1, 3.3, 4.1],
            covariates: vec![1.0, 2.0],
        },
    ];
    let ds = LongitudinalDataset::from_records(subjects, vec!["dose".into()]).unwrap();
    let model = ModelConfig {
        n_interior_knots: 2,
        use_covariates: true,
        covariate_selection: vec!["dose".into()],
        ..ModelConfig::default()
    };
    let prior = PriorConfig {
        iw_df: 10.0,
        iw_scale: SpdMatrix::scaled_identity(3, 0.5).unwrap(),
        ..PriorConfig::default()
    };
    let ctx = build_context(&ds, &model, &prior).unwrap();
    let mut rng = RngStream::new(1, 0);
    let mut state = initialize_state(&ctx, &mut rng).unwrap();
    state.gamma = DMatrix::from_row_slice(
        3,
        3,
        &[0.10, 0.50, -0.05, -0.20, -0.30, 0.10, 0.05, 0.20, 0.00],
    );
    state.beta = DVector::from_vec(vec![1.0, 0.4, -0.3, 0.2]);
    state.sigma2 = 0.3;
    state.sigma_gamma = SpdMatrix::new(DMatrix::from_row_slice(
        3,
        3,
        &[0.20, 0.05, 0.00, 0.05, 0.30, 0.02, 0.00, 0.02, 0.10],
    ))
    .unwrap();
    state.coeff = DMatrix::from_row_slice(3, 2, &[0.10, 0.20, 0.30, -0.10, 0.00, 0.05]);
    FixedInstance { ctx, state }
}

/// Warped basis rows stacked by the independent oracle path.
fn oracle_design(inst: &FixedInstance) -> (DMatrix<f64>, DVector<f64>) {
    let all_knots = inst.ctx.knots.all_knots();
    let n_obs = inst.ctx.ds.n_obs_total();
    let m = inst.ctx.n_basis();
    let mut z = DMatrix::zeros(n_obs, m);
    let mut resid = DVector::zeros(n_obs);
    let mut row_idx = 0;
    for (i, subject) in inst.ctx.ds.subjects().iter().enumerate() {
        let g = &inst.state.gamma;
        for (j, &t) in subject.times.iter().enumerate() {
            let warped = g[(i, VELOCITY)].exp() * (t - g[(i, TEMPO)]);
            let basis = oracles::naive_natural_basis_row(&all_knots, warped);
            for k in 0..m {
                z[(row_idx, k)] = basis[k];
            }
            resid[row_idx] = subject.responses[j] - g[(i, SIZE)];
            row_idx += 1;
        }
    }
    (z, resid)
}

fn check_mean_within_4se(
    label: &str,
    draws: &[DVector<f64>],
    expected: &DVector<f64>,
) {
    let k = draws.len() as f64;
    for c in 0..expected.len() {
        let vals: Vec<f64> = draws.iter().map(|d| d[c]).collect();
        let mean = vals.iter().sum::<f64>() / k;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
        let se = sd / k.sqrt();
        assert!(
            (mean - expected[c]).abs() < 4.0 * se,
            "{label}[{c}]: mean {mean} vs {} (se {se})",
            expected[c]
        );
    }
}

fn check_cov_within_10pct(label: &str, draws: &[DVector<f64>], expected: &DMatrix<f64>) {
    let k = draws.len() as f64;
    let dim = expected.nrows();
    let mut means = vec![0.0; dim];
    for d in draws {
        for c in 0..dim {
            means[c] += d[c];
        }
    }
    for m in &mut means {
        *m /= k;
    }
    let mut emp = DMatrix::zeros(dim, dim);
    for d in draws {
        for a in 0..dim {
            for b in 0..dim {
                emp[(a, b)] += (d[a] - means[a]) * (d[b] - means[b]);
            }
        }
    }
    emp /= k - 1.0;
    for a in 0..dim {
        for b in 0..dim {
            // Near-zero entries are judged on the correlation scale.
            let scale = (expected[(a, a)] * expected[(b, b)]).sqrt();
            let denom = expected[(a, b)].abs().max(scale);
            let rel = (emp[(a, b)] - expected[(a, b)]).abs() / denom;
            assert!(
                rel < 0.10,
                "{label} cov ({a},{b}): {} vs {} (rel {rel})",
                emp[(a, b)],
                expected[(a, b)]
            );
        }
    }
}

#[test]
fn criterion_1_conjugate_update_oracles() {
    let start = std::time::Instant::now();
    let n_draws = 20_000;

    // beta | rest.
    let inst = fixed_instance();
    let (z, resid) = oracle_design(&inst);
    let (exp_mean, exp_cov) =
        oracles::beta_conditional_moments(&z, &resid, inst.state.sigma2, inst.ctx.prior.beta_var);
    let mut state = inst.state.clone();
    let mut rng = RngStream::new(100, 0);
    let draws: Vec<DVector<f64>> = (0..n_draws)
        .map(|_| {
            update_beta(&mut state, &inst.ctx, &mut rng).unwrap();
            state.beta.clone()
        })
        .collect();
    check_mean_within_4se("beta", &draws, &exp_mean);
    check_cov_within_10pct("beta", &draws, &exp_cov);

    // vec(A) | rest.
    let (exp_mean_a, exp_cov_a) = oracles::alpha_conditional_moments(
        &inst.ctx.x,
        &inst.state.gamma,
        inst.state.sigma_gamma.as_matrix(),
        inst.ctx.prior.alpha_var,
    );
    let mut state = inst.state.clone();
    let mut rng = RngStream::new(101, 0);
    let draws: Vec<DVector<f64>> = (0..n_draws)
        .map(|_| {
            update_alpha(&mut state, &inst.ctx, &mut rng).unwrap();
            DVector::from_iterator(
                6,
                (0..2).flat_map(|c| (0..3).map(move |r| (r, c))).map(|(r, c)| state.coeff[(r, c)]),
            )
        })
        .collect();
    check_mean_within_4se("alpha", &draws, &exp_mean_a);
    check_cov_within_10pct("alpha", &draws, &exp_cov_a);

    // sigma2 | rest, plus the RSS oracle.
    let rss_oracle = oracles::naive_rss(
        &inst.ctx.ds,
        &inst.state.gamma,
        &inst.ctx.knots.all_knots(),
        &inst.state.beta,
    );
    let rss = bsim_core::sampler::residual_sum_of_squares(&inst.state, &inst.ctx);
    assert!(
        (rss - rss_oracle).abs() / rss_oracle < 1e-10,
        "rss {rss} vs oracle {rss_oracle}"
    );
    let n_obs = inst.ctx.ds.n_obs_total();
    let expected_sigma2 = oracles::sigma2_conditional_mean(
        inst.ctx.prior.sigma2_shape,
        inst.ctx.prior.sigma2_scale,
        rss_oracle,
        n_obs,
    );
    let mut state = inst.state.clone();
    let mut rng = RngStream::new(102, 0);
    let draws: Vec<f64> = (0..n_draws)
        .map(|_| {
            state.gamma = inst.state.gamma.clone();
            state.beta = inst.state.beta.clone();
            update_sigma2(&mut state, &inst.ctx, &mut rng).unwrap();
            state.sigma2
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n_draws as f64;
    let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_draws - 1) as f64).sqrt();
    let se = sd / (n_draws as f64).sqrt();
    assert!(
        (mean - expected_sigma2).abs() < 4.0 * se,
        "sigma2 mean {mean} vs {expected_sigma2} (se {se})"
    );

    // Sigma_gamma | rest (with covariates: scatter of gamma - X A').
    let s = &inst.state.gamma - &inst.ctx.x * inst.state.coeff.transpose();
    let scatter = s.transpose() * &s;
    let expected_sg = oracles::sigma_gamma_conditional_mean(
        inst.ctx.prior.iw_scale.as_matrix(),
        &scatter,
        inst.ctx.prior.iw_df,
        3,
    );
    let mut state = inst.state.clone();
    let mut rng = RngStream::new(103, 0);
    let draws: Vec<DVector<f64>> = (0..n_draws)
        .map(|_| {
            update_sigma_gamma(&mut state, &inst.ctx, true, &mut rng).unwrap();
            let m = state.sigma_gamma.as_matrix();
            DVector::from_iterator(9, (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| m[(r, c)]))
        })
        .collect();
    let expected_vec = DVector::from_iterator(
        9,
        (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| expected_sg[(r, c)]),
    );
    check_mean_within_4se("sigma_gamma", &draws, &expected_vec);

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 30, "criterion 1 took {elapsed:?}");
    pass(
        "criterion 1 (conjugate-update oracles)",
        format!("4 updates x {n_draws} draws matched analytic conditionals in {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_metropolis_vs_grid_oracle() {
    let start = std::time::Instant::now();
    let ds = LongitudinalDataset::from_records(
        vec![SubjectRecord {
            id: "only".into(),
            times: vec![2.0, 7.0],
            responses: vec![1.3, 2.1],
            covariates: vec![1.0],
        }],
        vec![],
    )
    .unwrap();
    let model = ModelConfig {
        n_interior_knots: 1,
        ..ModelConfig::default()
    };
    let ctx = build_context(&ds, &model, &PriorConfig::default()).unwrap();
    let fixed_size = 0.10;
    let fixed_velocity = 0.05;
    // Hand-built state (two observations cannot identify three coefficients,
    // so the ridge initializer does not apply here).
    let mut state = ChainState {
        gamma: DMatrix::from_row_slice(1, 3, &[0.0, fixed_size, fixed_velocity]),
        beta: DVector::from_vec(vec![0.5, 0.25, -0.1]),
        coeff: DMatrix::zeros(3, 1),
        sigma2: 0.5,
        sigma_gamma: SpdMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![
            0.25, 0.04, 0.01,
        ])))
        .unwrap(),
        // Essentially zero proposal variance pins the other two components.
        proposal_scales: vec![SpdMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(
            vec![0.04, 1e-30, 1e-30],
        )))
        .unwrap()],
        accept_counts: vec![Default::default()],
        iteration: 0,
        adaptation_frozen: false,
        log_scale_diag: DVector::zeros(3),
    };

    let burn_in = 20_000;
    let post = 200_000;
    let mut mh_rng = RngStream::new(7, 16);
    let mut tempo_draws = Vec::with_capacity(post);
    let mut accepted_post = 0usize;
    for it in 0..(burn_in + post) {
        let accepted = update_gamma_i(&mut state, &ctx, 0, 5, &mut mh_rng).unwrap();
        if it < burn_in {
            if (it + 1) % 200 == 0 {
                adapt_proposals(&mut state, (0.20, 0.30));
            }
            if it + 1 == burn_in {
                state.adaptation_frozen = true;
            }
        } else {
            tempo_draws.push(state.gamma[(0, TEMPO)]);
            accepted_post += accepted as usize;
        }
    }
    // The pinned components never moved meaningfully.
    assert!((state.gamma[(0, SIZE)] - fixed_size).abs() < 1e-6);
    assert!((state.gamma[(0, VELOCITY)] - fixed_velocity).abs() < 1e-6);

    let grid: Vec<f64> = (0..2001).map(|i| -3.0 + 6.0 * i as f64 / 2000.0).collect();
    let globals = Globals::of(&state);
    let fixed = DVector::from_vec(vec![0.0, fixed_size, fixed_velocity]);
    let x_i = DVector::from_vec(vec![1.0]);
    let grid_probs = grid_posterior_1d(
        &ctx.ds.subjects()[0],
        &x_i,
        &fixed,
        FreeComponent::Tempo,
        &globals,
        &ctx.eval,
        &grid,
    )
    .unwrap();

    // Aggregate both distributions over equal-width bins and compare.
    let n_bins = 100;
    let (lo, hi) = (grid[0], *grid.last().unwrap());
    let bin_of = |x: f64| {
        (((x - lo) / (hi - lo) * n_bins as f64).floor() as isize).clamp(0, n_bins as isize - 1)
            as usize
    };
    let mut grid_mass = vec![0.0; n_bins];
    for (x, p) in grid.iter().zip(grid_probs.iter()) {
        grid_mass[bin_of(*x)] += p;
    }
    let mut mh_mass = vec![0.0; n_bins];
    for x in &tempo_draws {
        mh_mass[bin_of(*x)] += 1.0 / post as f64;
    }
    let tvd: f64 = grid_mass
        .iter()
        .zip(mh_mass.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / 2.0;
    assert!(tvd < 0.05, "total variation distance {tvd}");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "criterion 2 took {elapsed:?}");
    pass(
        "criterion 2 (M-H vs grid oracle)",
        format!(
            "TVD {tvd:.4} over {post} draws (acceptance {:.2}) in {elapsed:.2?}",
            accepted_post as f64 / post as f64
        ),
    );
}

// ---------------------------------------------------------------- criterion 3

fn desk_scale_truth() -> (TruthRecord, DesignSpec) {
    let knots = place_knots(&[0.0, 10.0], 3, KnotStrategy::EqualSpacing).unwrap();
    let beta_true = ls_fit_beta(&knots, |u| 85.0 + 1.2 * u + 10.0 / (1.0 + (-(1.5 * (u - 5.0))).exp()));
    let sigma_gamma_true = SpdMatrix::new(DMatrix::from_row_slice(
        3,
        3,
        &[0.09, 0.30, 0.0, 0.30, 4.0, 0.0, 0.0, 0.0, 0.01],
    ))
    .unwrap();
    let truth = TruthRecord {
        beta_true,
        sigma2_true: 0.25,
        sigma_gamma_true,
        a_true: DMatrix::zeros(3, 1),
        gamma_true: DMatrix::zeros(0, 3),
        knots,
        family: SplineFamily::NaturalCubic,
    };
    // Irregular per-subject schedules: 10 sorted uniform times each.
    let mut design_rng = RngStream::new(999, 0);
    let time_grids: Vec<Vec<f64>> = (0..100)
        .map(|_| {
            let mut t: Vec<f64> = (0..10).map(|_| design_rng.random::<f64>() * 10.0).collect();
            t.sort_by(|a, b| a.partial_cmp(b).unwrap());
            t
        })
        .collect();
    let design = DesignSpec {
        covariates: vec![vec![1.0]; time_grids.len()],
        covariate_names: Vec::new(),
        time_grids,
    };
    (truth, design)
}

#[test]
fn criterion_3_parameter_recovery_at_desk_scale() {
    let start = std::time::Instant::now();
    let (truth, design) = desk_scale_truth();
    let mut gen_rng = RngStream::new(4242, 0);
    let (ds, realized) = generate_dataset(&truth, &design, &mut gen_rng).unwrap();
    let model = ModelConfig {
        n_interior_knots: 3,
        ..ModelConfig::default()
    };
    let prior = PriorConfig::default();
    let mcmc = McmcConfig {
        n_iterations: 20_000,
        burn_in_fraction: 0.5,
        thin: 5,
        n_chains: 3,
        seed: 4242,
        ..McmcConfig::default()
    };

    // Single-threaded by construction: chains run sequentially in a
    // one-thread pool.
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let chains: Vec<PosteriorSamples> = pool.install(|| {
        (0..mcmc.n_chains)
            .map(|chain_id| run_chain(&ds, &model, &prior, &mcmc, chain_id).unwrap())
            .collect()
    });
    let chain_refs: Vec<&PosteriorSamples> = chains.iter().collect();

    // Convergence of every global parameter.
    let mut max_rhat: f64 = 0.0;
    let mut worst = String::new();
    for trace in global_traces(&chain_refs) {
        let est = gelman_rubin(&trace).unwrap();
        if est.value > max_rhat {
            max_rhat = est.value;
            worst = trace.name.clone();
        }
        assert!(est.value < 1.1, "{}: rhat {}", trace.name, est.value);
    }

    // Recovery: 15% relative or truth inside the 95% interval.
    let pooled: Vec<&Draw> = chains.iter().flat_map(|c| c.draws.iter()).collect();
    let check = |name: &str, vals: Vec<f64>, truth_v: f64| {
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let rel_ok = truth_v != 0.0 && ((mean - truth_v) / truth_v).abs() < 0.15;
        let lo = quantile_of(&vals, 0.025);
        let hi = quantile_of(&vals, 0.975);
        let ci_ok = lo <= truth_v && truth_v <= hi;
        assert!(
            rel_ok || ci_ok,
            "{name}: mean {mean} vs truth {truth_v} (CI [{lo}, {hi}])"
        );
    };
    check(
        "sigma2",
        pooled.iter().map(|d| d.sigma2).collect(),
        realized.sigma2_true,
    );
    for k in 0..3 {
        check(
            &format!("sigma_gamma[{k}][{k}]"),
            pooled.iter().map(|d| d.sigma_gamma[(k, k)]).collect(),
            realized.sigma_gamma_true.as_matrix()[(k, k)],
        );
    }
    for c in 0..realized.beta_true.len() {
        check(
            &format!("beta[{c}]"),
            pooled.iter().map(|d| d.beta[c]).collect(),
            realized.beta_true[c],
        );
    }

    // Metropolis acceptance tuning landed in the target band.
    let report = acceptance_report(&chain_refs);
    let in_band = report
        .per_subject
        .iter()
        .filter(|s| (0.15..=0.35).contains(&s.rate))
        .count();
    let share = in_band as f64 / report.per_subject.len() as f64;
    assert!(share >= 0.9, "only {share:.2} of subjects in [0.15, 0.35]");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 600, "criterion 3 took {elapsed:?}");
    pass(
        "criterion 3 (desk-scale recovery)",
        format!(
            "max rhat {max_rhat:.4} ({worst}), {share:.2} subjects in band, in {elapsed:.2?}"
        ),
    );
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_4_retained_draw_arithmetic() {
    let reference = McmcConfig {
        n_iterations: 500_000,
        burn_in_fraction: 0.9,
        thin: 10,
        ..McmcConfig::default()
    };
    assert_eq!(reference.burn_in_iterations(), 450_000);
    assert_eq!(reference.retained_draws(), 5_000);

    // The formula holds exactly across a sweep of configurations.
    for (iters, frac, thin, expected) in [
        (500_000usize, 0.9f64, 10usize, 5_000usize),
        (20_000, 0.5, 5, 2_000),
        (1_000, 0.25, 7, 107),
        (999, 0.33, 7, 95),
        (10, 0.5, 1, 5),
    ] {
        let cfg = McmcConfig {
            n_iterations: iters,
            burn_in_fraction: frac,
            thin,
            ..McmcConfig::default()
        };
        assert_eq!(cfg.retained_draws(), expected, "{iters}/{frac}/{thin}");
    }
    pass(
        "criterion 4 (retained-draw arithmetic)",
        "500,000 iterations, 90% burn-in, thin 10 -> exactly 5,000 draws".into(),
    );
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_5_spline_invariants() {
    let start = std::time::Instant::now();
    let families = [SplineFamily::NaturalCubic, SplineFamily::BSpline];

    // Dimension kappa + 2 for kappa in 0..=6, both families.
    for kappa in 0..=6usize {
        let knots = place_knots(&[0.0, 10.0], kappa, KnotStrategy::EqualSpacing).unwrap();
        for family in families {
            let b = eval_basis(&knots, family, &[0.0, 2.5, 9.9]);
            assert_eq!(b.values.ncols(), kappa + 2);
        }
    }

    let knots = place_knots(&[0.0, 10.0], 3, KnotStrategy::EqualSpacing).unwrap();
    let m = knots.n_basis();

    // Natural boundary second derivatives via one-sided differences into
    // the linear extrapolation region.
    let eval = bsim_core::spline::family_eval(&knots, SplineFamily::NaturalCubic);
    let h = 1e-2;
    let mut rows = [vec![0.0; m], vec![0.0; m], vec![0.0; m]];
    for &b in &[0.0, 10.0] {
        let sign = if b == 0.0 { -1.0 } else { 1.0 };
        for (r, row) in rows.iter_mut().enumerate() {
            eval.basis_row(b + sign * h * r as f64, 0, row);
        }
        for k in 0..m {
            let second = (rows[2][k] - 2.0 * rows[1][k] + rows[0][k]) / (h * h);
            assert!(second.abs() < 1e-8, "boundary {b} column {k}: {second}");
        }
    }

    // Linear reproduction.
    let grid: Vec<f64> = (0..512).map(|i| 10.0 * i as f64 / 511.0).collect();
    let basis = eval_basis(&knots, SplineFamily::NaturalCubic, &grid);
    let target = DVector::from_iterator(512, grid.iter().map(|&u| 3.5 * u - 2.0));
    let coef = basis.values.clone().svd(true, true).solve(&target, 1e-12).unwrap();
    let residual = (&basis.values * coef - target).amax();
    assert!(residual < 1e-10, "linear reproduction residual {residual}");

    // Analytic derivative vs central differences at 100 pseudo-random
    // points (including beyond the boundary).
    let mut rng = RngStream::new(55, 0);
    let fd_h = 1e-5;
    for family in families {
        let eval = bsim_core::spline::family_eval(&knots, family);
        let mut lo_row = vec![0.0; m];
        let mut hi_row = vec![0.0; m];
        let mut an_row = vec![0.0; m];
        for _ in 0..100 {
            let x = rng.random::<f64>() * 14.0 - 2.0;
            eval.basis_row(x - fd_h, 0, &mut lo_row);
            eval.basis_row(x + fd_h, 0, &mut hi_row);
            eval.basis_row(x, 1, &mut an_row);
            for k in 0..m {
                let fd = (hi_row[k] - lo_row[k]) / (2.0 * fd_h);
                let rel = (an_row[k] - fd).abs() / fd.abs().max(1.0);
                assert!(rel < 1e-6, "{family:?} col {k} at {x}: {} vs {fd}", an_row[k]);
            }
        }
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 5, "criterion 5 took {elapsed:?}");
    pass(
        "criterion 5 (spline invariants)",
        format!("dimension, boundary, reproduction, derivative checks in {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_6_model_selection_ordering() {
    let start = std::time::Instant::now();
    let knots = place_knots(&[0.0, 10.0], 3, KnotStrategy::EqualSpacing).unwrap();
    let beta_true = ls_fit_beta(&knots, |u| 80.0 + 1.0 * u + 12.0 / (1.0 + (-(2.0 * (u - 5.0))).exp()));
    let truth = TruthRecord {
        beta_true,
        sigma2_true: 0.09,
        sigma_gamma_true: SpdMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![
            0.04, 1.0, 0.0064,
        ])))
        .unwrap(),
        a_true: DMatrix::zeros(3, 1),
        gamma_true: DMatrix::zeros(0, 3),
        knots,
        family: SplineFamily::NaturalCubic,
    };
    let design = DesignSpec::regular(80, 8, 0.0, 10.0);
    let prior = PriorConfig::default();
    let budget = McmcConfig {
        n_iterations: 6_000,
        burn_in_fraction: 0.5,
        thin: 2,
        n_chains: 1,
        ..McmcConfig::default()
    };

    let mut dic_wins = 0;
    let mut bic_hits = 0;
    let seeds = 10;
    for seed in 0..seeds {
        let mut gen_rng = RngStream::new(6_000 + seed, 0);
        let (ds, _) = generate_dataset(&truth, &design, &mut gen_rng).unwrap();
        let mut fit_mcmc = budget.clone();
        fit_mcmc.seed = 60_000 + seed;

        let mut dic_at = |kappa: usize| {
            let model = ModelConfig {
                n_interior_knots: kappa,
                ..ModelConfig::default()
            };
            let ctx = build_context(&ds, &model, &prior).unwrap();
            let samples = run_chain_with_context(&ctx, &fit_mcmc, 0).unwrap();
            dic(&[&samples], &ctx).unwrap().dic
        };
        if dic_at(3) < dic_at(0) {
            dic_wins += 1;
        }

        let scan = bic_knot_scan(&ds, &ModelConfig::default(), &prior, &fit_mcmc, &[0, 1, 2, 3, 4, 5]);
        let argmin = scan
            .iter()
            .filter_map(|(kappa, score)| score.as_ref().ok().map(|s| (*kappa, s.bic)))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|(kappa, _)| kappa)
            .unwrap();
        if (2..=4).contains(&argmin) {
            bic_hits += 1;
        }
    }
    assert!(dic_wins >= 9, "DIC ordering held in {dic_wins}/10 seeds");
    assert!(bic_hits >= 8, "BIC argmin in {{2,3,4}} in {bic_hits}/10 seeds");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 900, "criterion 6 took {elapsed:?}");
    pass(
        "criterion 6 (model-selection ordering)",
        format!("DIC {dic_wins}/10, BIC argmin {bic_hits}/10, in {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------- criterion 7

/// Analytic argmax of a spline curve's derivative: the velocity is
/// quadratic on each inter-knot span, so reconstruct each span's quadratic
/// from three exact samples and compare vertex/endpoint candidates.
fn analytic_spline_apv(knots: &KnotSet, beta: &DVector<f64>) -> f64 {
    let deriv_at = |u: f64| -> f64 {
        let d = bsim_core::spline::eval_basis_deriv(knots, SplineFamily::NaturalCubic, &[u]);
        (0..beta.len()).map(|k| d[(0, k)] * beta[k]).sum()
    };
    let all = knots.all_knots();
    let mut best_u = all[0];
    let mut best_v = deriv_at(all[0]);
    for w in all.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mid = 0.5 * (a + b);
        let (va, vm, vb) = (deriv_at(a), deriv_at(mid), deriv_at(b));
        // v(u) = c2 u^2 + c1 u + c0 through the three samples.
        let h = b - a;
        let c2 = 2.0 * (va - 2.0 * vm + vb) / (h * h);
        let c1 = (vb - va) / h - c2 * (a + b);
        let mut candidates = vec![(a, va), (b, vb)];
        if c2 < 0.0 {
            let vertex = -c1 / (2.0 * c2);
            if vertex > a && vertex < b {
                candidates.push((vertex, deriv_at(vertex)));
            }
        }
        for (u, v) in candidates {
            if v > best_v {
                best_v = v;
                best_u = u;
            }
        }
    }
    best_u
}

#[test]
fn criterion_7_growth_analytics() {
    let start = std::time::Instant::now();

    // Polynomial height scaffold with h''(u) = s u (10 - u)(6 - u): the
    // acceleration vanishes at both boundaries (compatible with the natural
    // constraints) and changes sign + -> - at u = 6, the analytic velocity
    // peak. The generative truth is the spline projection, whose own peak
    // is computed in closed form per span (the velocity is piecewise
    // quadratic).
    let s = 0.02;
    let c_lin = 1.0;
    let d0 = 80.0;
    let poly = move |u: f64| {
        s * (10.0 * u.powi(3) - 4.0 * u.powi(4) / 3.0 + u.powi(5) / 20.0) + c_lin * u + d0
    };

    let knots = place_knots(&[0.0, 10.0], 6, KnotStrategy::EqualSpacing).unwrap();
    let beta_true = ls_fit_beta(&knots, poly);
    let apv_true = analytic_spline_apv(&knots, &beta_true);
    // The spline projection's peak stays at the polynomial's analytic 6.
    assert!((apv_true - 6.0).abs() < 0.1, "spline-truth APV {apv_true}");
    let truth = TruthRecord {
        beta_true,
        sigma2_true: 0.04,
        sigma_gamma_true: SpdMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![
            0.01, 0.25, 0.0025,
        ])))
        .unwrap(),
        a_true: DMatrix::zeros(3, 1),
        gamma_true: DMatrix::zeros(0, 3),
        knots,
        family: SplineFamily::NaturalCubic,
    };
    let design = DesignSpec::regular(80, 10, 0.0, 10.0);
    let mut gen_rng = RngStream::new(777, 0);
    let (ds, _) = generate_dataset(&truth, &design, &mut gen_rng).unwrap();
    let model = ModelConfig {
        n_interior_knots: 6,
        ..ModelConfig::default()
    };
    let mcmc = McmcConfig {
        n_iterations: 6_000,
        burn_in_fraction: 0.5,
        thin: 2,
        n_chains: 1,
        seed: 777,
        ..McmcConfig::default()
    };
    let samples = run_chain(&ds, &model, &PriorConfig::default(), &mcmc, 0).unwrap();
    let apv = age_at_peak_velocity(&[&samples], 512, None).unwrap();
    let tolerance = 0.01 * 10.0;
    assert!(
        (apv.apv_mean - apv_true).abs() < tolerance,
        "APV {} vs {apv_true}",
        apv.apv_mean
    );
    assert!(!apv.boundary_peak);

    // Chain rule under log time: the curve h(log t) = log t has velocity
    // exactly 1/t.
    let log_knots =
        place_knots(&[1.0f64.ln(), 20.0f64.ln()], 3, KnotStrategy::EqualSpacing).unwrap();
    let beta = ls_fit_beta(&log_knots, |u| u);
    let draw = Draw {
        iteration: 0,
        gamma: DMatrix::zeros(1, 3),
        beta,
        coeff: DMatrix::zeros(3, 1),
        sigma2: 0.01,
        sigma_gamma: DMatrix::identity(3, 3),
    };
    let log_samples = PosteriorSamples {
        draws: vec![draw],
        chain_id: 0,
        config_fingerprint: String::new(),
        knots: log_knots,
        family: SplineFamily::NaturalCubic,
        time_transform: TimeTransform::Log,
        covariate_labels: vec![],
        subject_ids: vec!["a".into()],
        seed: 0,
        acceptance: vec![],
        proposal_scales_hash_at_freeze: String::new(),
        proposal_scales_hash_at_end: String::new(),
    };
    let vel = velocity_curve(&[&log_samples], 256, None).unwrap();
    for (t, v) in vel.grid.iter().zip(vel.mean.iter()) {
        assert!((v - 1.0 / t).abs() < 1e-6, "velocity at t = {t}: {v}");
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "criterion 7 took {elapsed:?}");
    pass(
        "criterion 7 (growth analytics)",
        format!(
            "APV {:.3} vs analytic {apv_true:.3} (tolerance {tolerance}), log-time chain rule exact, in {elapsed:.2?}",
            apv.apv_mean
        ),
    );
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_8_determinism_and_thread_invariance() {
    let (truth, _) = desk_scale_truth();
    let design = DesignSpec::regular(20, 8, 0.0, 10.0);
    let mut gen_rng = RngStream::new(808, 0);
    let (ds, _) = generate_dataset(&truth, &design, &mut gen_rng).unwrap();
    let model = ModelConfig {
        n_interior_knots: 3,
        ..ModelConfig::default()
    };
    let prior = PriorConfig::default();
    let mcmc = McmcConfig {
        n_iterations: 1_500,
        burn_in_fraction: 0.5,
        thin: 3,
        n_chains: 2,
        seed: 808,
        ..McmcConfig::default()
    };

    let run_with_threads = |threads: usize| -> Vec<Vec<u8>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            bsim_core::sampler::run_chains(&ds, &model, &prior, &mcmc)
                .unwrap()
                .iter()
                .map(|chain| {
                    let mut bytes = Vec::new();
                    write_posterior_csv(chain, &mut bytes).unwrap();
                    bytes
                })
                .collect()
        })
    };

    let serial = run_with_threads(1);
    let serial_again = run_with_threads(1);
    let parallel = run_with_threads(8);
    assert_eq!(serial, serial_again, "re-run not bit-identical");
    assert_eq!(serial, parallel, "parallel and serial runs differ");

    pass(
        "criterion 8 (determinism)",
        format!(
            "{} chains x {} bytes bit-identical across re-runs and 1 vs 8 threads",
            serial.len(),
            serial[0].len()
        ),
    );
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn criterion_9_diagnostics_calibration() {
    // Identical chains: exact closed-form value.
    let mut rng = RngStream::new(9, 0);
    let chain: Vec<f64> = (0..4_096).map(|_| rng.random::<f64>()).collect();
    for copies in [2usize, 3, 5] {
        let trace = ScalarTrace::new("x", vec![chain.clone(); copies]).unwrap();
        let est = gelman_rubin(&trace).unwrap();
        let n = chain.len() as f64;
        assert_eq!(est.value, ((n - 1.0) / n).sqrt(), "copies {copies}");
    }

    // AR(1) effective sample size against the analytic value.
    let phi: f64 = 0.9;
    let n = 100_000;
    let mut ar_rng = RngStream::new(9, 1);
    let mut x = 0.0;
    let series: Vec<f64> = (0..n)
        .map(|_| {
            let eps: f64 = ar_rng.sample(rand_distr::StandardNormal);
            x = phi * x + eps;
            x
        })
        .collect();
    let ess = effective_sample_size(&series).unwrap();
    let expected = n as f64 * (1.0 - phi) / (1.0 + phi);
    let rel = (ess - expected).abs() / expected;
    assert!(rel < 0.15, "ESS {ess} vs {expected} (rel {rel})");

    // Autocorrelation sanity at the same stroke: acf(1) near phi.
    let acf = autocorrelation(&series, 1).unwrap();
    assert!((acf[1] - phi).abs() < 0.01);

    pass(
        "criterion 9 (diagnostics calibration)",
        format!("identical-chain rhat exact; AR(1) ESS {ess:.0} vs {expected:.0}"),
    );
}
