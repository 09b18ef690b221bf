//! Shared fixtures for the integration suites: an independent binomial-tree
//! oracle and a catalog solve runner that mirrors the command-line wiring.

use rgbsde::catalog::{self, CatalogProblem};
use rgbsde::forward_sde::{simulate_reflected, ForwardBundle, ReflectionScheme};
use rgbsde::models::TimeGrid;
use rgbsde::solver::{solve, SolutionBundle, SolveMethod, SolveOptions};
use rgbsde::util;

/// Cox-Ross-Rubinstein American put. Entirely separate numerics from the
/// Monte Carlo solver: lattice recursion, no regression, no paths.
pub fn binomial_american_put(
    s0: f64,
    strike: f64,
    rate: f64,
    vol: f64,
    t: f64,
    steps: usize,
) -> f64 {
    let dt = t / steps as f64;
    let up = (vol * dt.sqrt()).exp();
    let down = 1.0 / up;
    let disc = (-rate * dt).exp();
    let q = ((rate * dt).exp() - down) / (up - down);
    let spot = |i: usize, j: usize| s0 * up.powi(j as i32) * down.powi((i - j) as i32);
    let mut v: Vec<f64> = (0..=steps).map(|j| (strike - spot(steps, j)).max(0.0)).collect();
    for i in (0..steps).rev() {
        for j in 0..=i {
            let cont = disc * (q * v[j + 1] + (1.0 - q) * v[j]);
            v[j] = cont.max(strike - spot(i, j));
        }
    }
    v[0]
}

pub struct Solved {
    pub problem: CatalogProblem,
    pub forward: ForwardBundle,
    pub solution: SolutionBundle,
}

/// Simulates and solves a catalog problem exactly as the CLI does: the
/// forward seed is derived from the master seed, projection reflection,
/// default solve options.
pub fn run_catalog(
    name: &str,
    seed: u64,
    paths: Option<usize>,
    steps: Option<usize>,
    method: SolveMethod,
) -> Solved {
    run_catalog_opts(name, seed, paths, steps, method, &SolveOptions::default())
}

/// Same, with explicit solve options (basis choice and the like).
pub fn run_catalog_opts(
    name: &str,
    seed: u64,
    paths: Option<usize>,
    steps: Option<usize>,
    method: SolveMethod,
    opts: &SolveOptions,
) -> Solved {
    let mut problem = catalog::by_name(name).expect("catalog name");
    if let Some(n) = steps {
        problem.grid = TimeGrid::new(problem.grid.t_max, n).unwrap();
    }
    let m = paths.unwrap_or(problem.default_paths);
    let forward = simulate_reflected(
        &problem.domain,
        &problem.drift,
        &problem.diffusion,
        &problem.x0,
        &problem.grid,
        m,
        util::subseed(seed, "forward"),
        ReflectionScheme::Projection,
    )
    .unwrap();
    let solution =
        solve(&forward, &problem.driver, &problem.obstacle, method, opts).unwrap();
    Solved { problem, forward, solution }
}

/// One line per criterion, printed before any assertion can fire.
pub fn report(criterion: &str, ok: bool, detail: &str) {
    println!("criterion {criterion}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
}
