//! End-to-end acceptance suite. Each test prints one `criterion NN: PASS/FAIL`
//! line; tolerances and wall-clock budgets are part of the contract.

mod common;

use std::sync::Arc;
use std::time::Instant;

use common::{binomial_american_put, report, run_catalog, run_catalog_opts};
use rgbsde::approximation::{CandidateGrid, InfConvApproximant};
use rgbsde::catalog;
use rgbsde::estimates::{
    audit_apriori_bound, audit_comparison, audit_skorokhod, audit_stability, audit_z_control,
    DsForm,
};
use rgbsde::forward_sde::{constant_coeff, simulate_reflected, ReflectionScheme};
use rgbsde::models::{half_line_domain, ObstacleSpec, TimeGrid};
use rgbsde::pde::{cross_validate, solve_obstacle_pde, PdeOptions};
use rgbsde::solver::{
    solve, solve_pipeline, Basis, PipelineOptions, RPolicy, SolveMethod, SolveOptions,
};
use rgbsde::util;

/// Regressor suited to kinked (early-exercise) value surfaces.
fn put_basis() -> SolveOptions {
    SolveOptions { basis: Basis::PiecewiseLinear { knots: 12 }, ..Default::default() }
}

#[test]
fn criterion_01_trivial_solution_is_exact_and_fast() {
    let start = Instant::now();
    let run = run_catalog("trivial_constant", 42, Some(10_000), Some(64), SolveMethod::Reflected);
    let sol = &run.solution;
    let flat = sol.y.iter().all(|&v| v == 1.0);
    let max_z = sol.z.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let k_silent = sol.dk.iter().all(|&v| v == 0.0);
    let elapsed = start.elapsed().as_secs_f64();
    let ok = flat && max_z < 1e-10 && k_silent && elapsed < 5.0;
    report(
        "01 trivial solution",
        ok,
        &format!("Y flat {flat}, max|Z| {max_z:.1e}, K silent {k_silent}, {elapsed:.2}s"),
    );
    assert!(ok);
}

#[test]
fn criterion_02_linear_driver_matches_the_ode() {
    let run = run_catalog("linear_discount", 42, Some(50_000), Some(64), SolveMethod::Reflected);
    let target = (-0.05f64).exp();
    let gap = (run.solution.y0_mean - target).abs();
    let ok = gap < 1e-3;
    report(
        "02 linear-driver oracle",
        ok,
        &format!("Y_0 {:.6} vs e^-0.05 {target:.6}, gap {gap:.2e}", run.solution.y0_mean),
    );
    assert!(ok);
}

#[test]
fn criterion_03_american_put_matches_the_binomial_tree() {
    let start = Instant::now();
    // Oracle anchor, frozen from an independent implementation of the same
    // 1000-step lattice.
    let tree = binomial_american_put(100.0, 100.0, 0.05, 0.2, 1.0, 1000);
    assert!((tree - 6.089595282977953).abs() < 1e-6, "lattice drifted: {tree}");

    // The value surface has an exercise kink; the adaptive piecewise basis
    // is the right regressor for it (a global polynomial ratchets its fit
    // error upward through the per-step projection).
    let run = run_catalog_opts(
        "american_put_analog",
        42,
        Some(100_000),
        Some(128),
        SolveMethod::Reflected,
        &put_basis(),
    );
    let rel = (run.solution.y0_mean - tree).abs() / tree;
    let elapsed = start.elapsed().as_secs_f64();
    let ok = rel < 0.005 && elapsed < 120.0;
    report(
        "03 American-put analog",
        ok,
        &format!("LSMC {:.4} vs tree {tree:.4}, rel {rel:.3e}, {elapsed:.1}s", run.solution.y0_mean),
    );
    assert!(ok);
}

#[test]
fn criterion_04_reflected_forward_law_and_scheme_agreement() {
    let dom = half_line_domain();
    let grid = TimeGrid::new(1.0, 2048).unwrap();
    let paths = 4000;
    let seed = util::subseed(42, "forward");
    let drift = constant_coeff(vec![0.0]);
    let sigma = constant_coeff(vec![1.0]);
    let proj = simulate_reflected(
        &dom,
        &drift,
        &sigma,
        &[0.0],
        &grid,
        paths,
        seed,
        ReflectionScheme::Projection,
    )
    .unwrap();
    let skor = simulate_reflected(
        &dom,
        &drift,
        &sigma,
        &[0.0],
        &grid,
        paths,
        seed,
        ReflectionScheme::SkorokhodExplicit,
    )
    .unwrap();

    let ends_of = |b: &rgbsde::forward_sde::ForwardBundle| -> Vec<f64> {
        (0..paths).map(|p| b.state(p, 2048)[0]).collect()
    };
    let (mean_p, se_p) = util::det_mean_se(&ends_of(&proj));
    let (mean_s, se_s) = util::det_mean_se(&ends_of(&skor));
    let target = (2.0 / std::f64::consts::PI).sqrt();

    let law_gap = (mean_p - target).abs();
    let law_ok = law_gap < 3.0 * se_p;
    let budget = 3.0 * (se_p * se_p + se_s * se_s).sqrt() + 1e-12;
    let scheme_gap = (mean_p - mean_s).abs();
    let scheme_ok = scheme_gap <= budget;
    let ok = law_ok && scheme_ok;
    report(
        "04 reflected forward law",
        ok,
        &format!(
            "E[X_1] {mean_p:.5} vs {target:.5} (3SE {:.1e}), scheme gap {scheme_gap:.1e} <= {budget:.1e}",
            3.0 * se_p
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_05_skorokhod_condition_exact_and_penalty_monotone() {
    let mut exact = true;
    for entry in catalog::all() {
        let paths = entry.default_paths.min(4096);
        let run = run_catalog(entry.name, 42, Some(paths), None, SolveMethod::Reflected);
        let score = audit_skorokhod(&run.solution).score;
        if score != 0.0 {
            exact = false;
        }
    }

    let base = run_catalog("binding_obstacle", 42, Some(4096), None, SolveMethod::Reflected);
    let mut scores = Vec::new();
    for strength in [10.0, 50.0, 250.0] {
        let sol = solve(
            &base.forward,
            &base.problem.driver,
            &base.problem.obstacle,
            SolveMethod::Penalized { strength },
            &SolveOptions::default(),
        )
        .unwrap();
        scores.push(audit_skorokhod(&sol).score);
    }
    let decreasing = scores[0] > scores[1] && scores[1] > scores[2] && scores[2] > 0.0;
    let ok = exact && decreasing;
    let shown: Vec<String> = scores.iter().map(|s| format!("{s:.3e}")).collect();
    report(
        "05 Skorokhod condition",
        ok,
        &format!("reflected exact {exact}, penalized scores {shown:?}"),
    );
    assert!(ok);
}

#[test]
fn criterion_06_penalized_ladder_is_monotone() {
    let base = run_catalog("binding_obstacle", 42, None, None, SolveMethod::Reflected);
    let mut ladder = Vec::new();
    for strength in [10.0, 50.0, 250.0] {
        ladder.push(
            solve(
                &base.forward,
                &base.problem.driver,
                &base.problem.obstacle,
                SolveMethod::Penalized { strength },
                &SolveOptions::default(),
            )
            .unwrap(),
        );
    }
    let pairs = [
        (&ladder[0], &ladder[1]),
        (&ladder[1], &ladder[2]),
        (&ladder[2], &base.solution),
    ];
    let mut worst_fraction = 0.0f64;
    let mut ok = true;
    for (lower, upper) in pairs {
        let rep = audit_comparison(lower, upper, 2.0, 1e-3).unwrap();
        worst_fraction = worst_fraction.max(rep.violation_fraction);
        ok &= rep.pass;
    }
    report(
        "06 comparison monotonicity",
        ok,
        &format!("worst violation fraction {worst_fraction:.2e} (limit 1e-3)"),
    );
    assert!(ok);
}

#[test]
fn criterion_07_envelope_suite_is_exact_and_fast() {
    let start = Instant::now();
    let square = |y: &[f64]| y[0] * y[0];
    let ns = [4u32, 8, 16, 32];

    // (a) exact n-Lipschitz bound, per-index grid wide enough to hold the
    // kink at n/2. (d) the window gap at least halves per index doubling.
    let mut lipschitz_ok = true;
    let mut below_ok = true;
    let mut gaps = Vec::new();
    let xs: Vec<f64> = (-24..=24).map(|k| k as f64 * 0.25).collect();
    for &n in &ns {
        let radius = n as f64 / 2.0 + 2.0;
        let grid = CandidateGrid::uniform_1d(radius, 1e-3).unwrap();
        let f = InfConvApproximant::new(square, n, grid).unwrap();
        let vals: Vec<f64> = xs.iter().map(|&x| f.eval1(x)).collect();
        for (&x, &v) in xs.iter().zip(&vals) {
            if v > x * x + 1e-9 {
                below_ok = false;
            }
        }
        for i in 0..xs.len() {
            for j in i + 1..xs.len() {
                if (vals[i] - vals[j]).abs() > n as f64 * (xs[i] - xs[j]).abs() + 1e-10 {
                    lipschitz_ok = false;
                }
            }
        }
        let gap =
            xs.iter().zip(&vals).map(|(&x, &v)| x * x - v).fold(0.0f64, f64::max);
        gaps.push(gap);
    }
    let halving_ok = gaps.windows(2).all(|w| w[1] <= w[0] / 2.0 + 1e-8);

    // (b) monotone in n on a fixed grid (radius capped by the growth rule
    // for the smallest index).
    let fixed = CandidateGrid::uniform_1d(4.5, 1e-3).unwrap();
    let fs: Vec<InfConvApproximant> =
        ns.iter().map(|&n| InfConvApproximant::new(square, n, fixed.clone()).unwrap()).collect();
    let mut monotone_ok = true;
    for k in -20..=20 {
        let x = k as f64 * 0.3;
        for w in fs.windows(2) {
            if w[0].eval1(x) > w[1].eval1(x) + 1e-12 {
                monotone_ok = false;
            }
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    let ok = lipschitz_ok && below_ok && halving_ok && monotone_ok && elapsed < 10.0;
    let shown: Vec<String> = gaps.iter().map(|g| format!("{g:.2e}")).collect();
    report(
        "07 envelope suite",
        ok,
        &format!(
            "lipschitz {lipschitz_ok}, below {below_ok}, monotone {monotone_ok}, gaps {shown:?}, {elapsed:.2}s"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_08_pipeline_handles_the_cubic_driver() {
    // Deterministic sub-case: separable ODE value (1 + 2T)^{-1/2}.
    let det = run_catalog("cubic_driver_deterministic", 42, None, None, SolveMethod::Reflected);
    let target = 1.5f64.powf(-0.5);
    let det_gap = (det.solution.y0_mean - target).abs();
    let det_ok = det_gap < 1e-3;

    // Stochastic case: the truncation ladder is Cauchy with strictly
    // decreasing inter-rung distances over three doublings.
    let stoch = catalog::by_name("cubic_driver").unwrap();
    let forward = simulate_reflected(
        &stoch.domain,
        &stoch.drift,
        &stoch.diffusion,
        &stoch.x0,
        &stoch.grid,
        4096,
        util::subseed(42, "forward"),
        ReflectionScheme::Projection,
    )
    .unwrap();
    // Start the ladder where the truncations begin to release: from n = 8
    // the first two rungs are clipped alike, the first gap understates, and
    // the trace is not monotone.
    let opts = PipelineOptions {
        n_min: 16,
        rungs: 4,
        tol_cauchy: 0.0,
        r_policy: RPolicy::RadiusBound,
        method: SolveMethod::Reflected,
        solve: SolveOptions::default(),
    };
    let result = solve_pipeline(&forward, &stoch.driver, &stoch.obstacle, &opts).unwrap();
    let d = &result.trace.distances;
    let cauchy_ok = d.len() == 3 && d[0] > d[1] && d[1] > d[2];

    let ok = det_ok && cauchy_ok;
    let shown: Vec<String> = d.iter().map(|v| format!("{v:.3e}")).collect();
    report(
        "08 cubic-driver pipeline",
        ok,
        &format!("deterministic gap {det_gap:.2e}, distances {shown:?}"),
    );
    assert!(ok);
}

#[test]
fn criterion_09_stability_audit_scales_with_the_data() {
    let problem = catalog::by_name("linear_discount").unwrap();
    let forward = simulate_reflected(
        &problem.domain,
        &problem.drift,
        &problem.diffusion,
        &problem.x0,
        &problem.grid,
        4000,
        util::subseed(42, "forward"),
        ReflectionScheme::Projection,
    )
    .unwrap();
    let driver = &problem.driver;
    let opts = SolveOptions::default();
    let terminal = |shift: f64| {
        ObstacleSpec::none_with_terminal(Arc::new(move |x: &[f64]| x[0].tanh() + shift))
    };

    let base = solve(&forward, driver, &terminal(0.0), SolveMethod::Reflected, &opts).unwrap();
    let again = solve(&forward, driver, &terminal(0.0), SolveMethod::Reflected, &opts).unwrap();
    let zero =
        audit_stability(&base, &again, &forward, driver, driver, DsForm::Statement).unwrap();
    let zero_ok = zero.lhs == 0.0;

    let big = solve(&forward, driver, &terminal(0.2), SolveMethod::Reflected, &opts).unwrap();
    let small = solve(&forward, driver, &terminal(0.1), SolveMethod::Reflected, &opts).unwrap();
    let lhs_big =
        audit_stability(&big, &base, &forward, driver, driver, DsForm::Statement).unwrap().lhs;
    let lhs_small =
        audit_stability(&small, &base, &forward, driver, driver, DsForm::Statement).unwrap().lhs;
    let p = driver.p;
    let ratio = lhs_big / lhs_small;
    let floor = 2f64.powf(p) / 1.5;
    let ratio_ok = ratio >= floor;

    let ok = zero_ok && ratio_ok;
    report(
        "09 stability audit",
        ok,
        &format!("identical-input lhs {:.1e}, halving ratio {ratio:.3} >= {floor:.3}", zero.lhs),
    );
    assert!(ok);
}

#[test]
fn criterion_10_pde_cross_validation_within_budget() {
    let start = Instant::now();
    let mut ok = true;
    let mut lines = Vec::new();
    for name in ["trivial_constant", "reflected_bm_neumann", "american_put_analog"] {
        let opts =
            if name == "american_put_analog" { put_basis() } else { SolveOptions::default() };
        let run = run_catalog_opts(name, 42, None, None, SolveMethod::Reflected, &opts);
        let pde_problem = run.problem.pde_problem().expect("catalog PDE setup");
        let pde = solve_obstacle_pde(&pde_problem, &PdeOptions::default()).unwrap();
        let check = cross_validate(
            run.solution.y0_mean,
            run.solution.y0_se,
            run.problem.grid.dt(),
            &pde,
            run.problem.x0[0],
            1.0,
        );
        ok &= check.pass;
        lines.push(format!("{name} gap {:.2e} budget {:.2e}", check.gap, check.budget));
    }
    let elapsed = start.elapsed().as_secs_f64();
    ok &= elapsed < 300.0;
    report("10 PDE cross-validation", ok, &format!("{}; {elapsed:.1}s", lines.join(", ")));
    assert!(ok);
}

#[test]
fn criterion_11_apriori_constants_are_finite_stable_and_tight_when_trivial() {
    let mut ok = true;
    let mut details = Vec::new();
    for entry in catalog::all() {
        let mut constants = Vec::new();
        for paths in [10_000usize, 40_000] {
            let run = run_catalog(entry.name, 42, Some(paths), None, SolveMethod::Reflected);
            let apriori = audit_apriori_bound(&run.solution, &run.forward, &run.problem.driver);
            let z = audit_z_control(&run.solution, &run.forward, &run.problem.driver);
            ok &= apriori.constant.is_finite() && apriori.pass;
            ok &= z.constant.is_finite() && z.pass;
            if entry.name == "trivial_constant" {
                ok &= (apriori.constant - 1.0).abs() < 1e-9;
            }
            constants.push(apriori.constant);
        }
        let drift = (constants[1] / constants[0] - 1.0).abs();
        ok &= drift <= 0.5;
        details.push(format!("{} c {:.3} drift {:.1}%", entry.name, constants[0], drift * 100.0));
    }
    report("11 a priori audits", ok, &details.join(", "));
    assert!(ok);
}

// Criterion 12 (byte-identical CSV output across thread counts) drives the
// compiled binary and lives in the CLI integration suite.
