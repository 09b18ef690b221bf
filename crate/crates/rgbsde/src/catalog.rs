//! Named benchmark problems. Each entry wires a forward reflected diffusion,
//! a driver, and terminal/obstacle data into a ready-to-run bundle, together
//! with sensible grid defaults and, where a one-dimensional PDE formulation
//! exists, a finite-difference setup for cross-validation.

use std::sync::Arc;

use crate::forward_sde::{constant_coeff, CoeffFn};
use crate::models::{
    free_domain, half_line_domain, interval_domain, Barrier, DomainSpec, DriverSpec, DriverFn,
    FluxFn, ObstacleSpec, TimeGrid,
};
use crate::pde::{Coeff1d, PdeGrid, PdeProblem, Surface};

/// Spatial truncation and resolution for the finite-difference route.
pub struct PdeSetup {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
    pub time_steps: usize,
    pub drift: Coeff1d,
    pub sigma: Coeff1d,
    /// Whether the lower/upper end is a true reflecting boundary of the
    /// problem. A truncation end gets a plain zero-flux closure instead.
    pub reflecting: (bool, bool),
}

pub struct CatalogProblem {
    pub name: &'static str,
    pub summary: &'static str,
    pub domain: DomainSpec,
    pub x0: Vec<f64>,
    /// Default time grid; callers may rebuild with other step counts.
    pub grid: TimeGrid,
    pub drift: CoeffFn,
    pub diffusion: CoeffFn,
    pub driver: DriverSpec,
    pub obstacle: ObstacleSpec,
    pub default_paths: usize,
    pub pde: Option<PdeSetup>,
}

impl CatalogProblem {
    /// Assembles the finite-difference problem from the setup, reusing the
    /// entry's driver and Markovian data. Entries without a one-dimensional
    /// formulation return `None`.
    pub fn pde_problem(&self) -> Option<PdeProblem> {
        let setup = self.pde.as_ref()?;
        let terminal: Coeff1d = match &self.obstacle.terminal {
            crate::models::Terminal::Markovian(l) => {
                let l = l.clone();
                Arc::new(move |x: f64| l(&[x]))
            }
            crate::models::Terminal::Explicit(_) => return None,
        };
        let obstacle: Option<Surface> = match &self.obstacle.barrier {
            Barrier::Absent => None,
            Barrier::Markovian(h) => {
                let h = h.clone();
                Some(Arc::new(move |t: f64, x: f64| h(t, &[x])) as Surface)
            }
            Barrier::Explicit { .. } => return None,
        };
        Some(PdeProblem {
            grid: PdeGrid::new(setup.lo, setup.hi, setup.nodes).expect("catalog grid is valid"),
            time: TimeGrid::new(self.grid.t_max, setup.time_steps).expect("catalog time is valid"),
            drift: setup.drift.clone(),
            sigma: setup.sigma.clone(),
            driver: self.driver.clone(),
            terminal,
            obstacle,
            reflecting: setup.reflecting,
        })
    }
}

fn zero_f() -> DriverFn {
    Arc::new(|_t, _x, _y, _z| 0.0)
}

fn zero_g() -> FluxFn {
    Arc::new(|_t, _x, _y| 0.0)
}

fn linear_f(rate: f64) -> DriverFn {
    Arc::new(move |_t, _x, y, _z| rate * y)
}

/// Zero driver and flux with unit terminal data: the solution is
/// identically one with no Z and no reflection effort.
pub fn trivial_constant() -> CatalogProblem {
    CatalogProblem {
        name: "trivial_constant",
        summary: "zero driver, unit terminal; Y is identically 1",
        domain: free_domain(1),
        x0: vec![0.0],
        grid: TimeGrid::new(1.0, 64).expect("valid grid"),
        drift: constant_coeff(vec![0.0]),
        diffusion: constant_coeff(vec![1.0]),
        driver: DriverSpec::new(1, zero_f(), zero_g(), 0.0, 0.0, -1.0, 1.0, 1.5)
            .expect("valid driver")
            .with_state_independent(true),
        obstacle: ObstacleSpec::none_with_terminal(Arc::new(|_x: &[f64]| 1.0)),
        default_paths: 4096,
        pde: Some(PdeSetup {
            lo: -3.0,
            hi: 3.0,
            nodes: 121,
            time_steps: 100,
            drift: Arc::new(|_x| 0.0),
            sigma: Arc::new(|_x| 1.0),
            reflecting: (false, false),
        }),
    }
}

/// Linear decay driver `f = -0.05 y` on a unit payoff. Closed form
/// `Y_0 = exp(-0.05 T)` independent of the forward state.
pub fn linear_discount() -> CatalogProblem {
    CatalogProblem {
        name: "linear_discount",
        summary: "f = -0.05 y on unit payoff; Y_0 = exp(-0.05)",
        domain: free_domain(1),
        x0: vec![0.0],
        grid: TimeGrid::new(1.0, 64).expect("valid grid"),
        drift: constant_coeff(vec![0.0]),
        diffusion: constant_coeff(vec![1.0]),
        driver: DriverSpec::new(1, linear_f(-0.05), zero_g(), 0.0, 0.0, -1.0, 1.0, 1.5)
            .expect("valid driver")
            .with_state_independent(true),
        obstacle: ObstacleSpec::none_with_terminal(Arc::new(|_x: &[f64]| 1.0)),
        default_paths: 8192,
        pde: Some(PdeSetup {
            lo: -3.0,
            hi: 3.0,
            nodes: 121,
            time_steps: 200,
            drift: Arc::new(|_x| 0.0),
            sigma: Arc::new(|_x| 1.0),
            reflecting: (false, false),
        }),
    }
}

/// Optimal stopping of a discounted put in log-price coordinates. The
/// forward state is `X = ln S` under the risk-neutral measure with
/// `r = 0.05`, `sigma = 0.2`; the obstacle equals the payoff, so `Y_0` is
/// the American put price at `S_0 = exp(x_0)`.
pub fn american_put_analog() -> CatalogProblem {
    let strike = 100.0;
    let rate = 0.05;
    let vol = 0.2;
    let payoff = move |x: f64| (strike - x.exp()).max(0.0);
    let x0 = strike.ln();
    CatalogProblem {
        name: "american_put_analog",
        summary: "log-space GBM, reflected on the put payoff; American put price",
        domain: free_domain(1),
        x0: vec![x0],
        grid: TimeGrid::new(1.0, 128).expect("valid grid"),
        drift: constant_coeff(vec![rate - 0.5 * vol * vol]),
        diffusion: constant_coeff(vec![vol]),
        driver: DriverSpec::new(1, linear_f(-rate), zero_g(), 0.0, 0.0, -1.0, 1.0, 1.5)
            .expect("valid driver")
            .with_state_independent(true),
        obstacle: ObstacleSpec {
            barrier: Barrier::Markovian(Arc::new(move |_t, x: &[f64]| payoff(x[0]))),
            terminal: crate::models::Terminal::Markovian(Arc::new(move |x: &[f64]| payoff(x[0]))),
        },
        default_paths: 20_000,
        pde: Some(PdeSetup {
            lo: x0 - 2.5,
            hi: x0 + 2.5,
            nodes: 501,
            time_steps: 400,
            drift: Arc::new(move |_x| rate - 0.5 * vol * vol),
            sigma: Arc::new(move |_x| vol),
            reflecting: (false, false),
        }),
    }
}

/// Cubic monotone driver `f = -y^3` with cosine terminal data. Continuous
/// and decreasing in `y` but far from Lipschitz, which is what the
/// index-truncation pipeline is for.
pub fn cubic_driver() -> CatalogProblem {
    CatalogProblem {
        name: "cubic_driver",
        summary: "f = -y^3 with cosine terminal data; non-Lipschitz benchmark",
        domain: free_domain(1),
        x0: vec![0.0],
        grid: TimeGrid::new(0.5, 128).expect("valid grid"),
        drift: constant_coeff(vec![0.0]),
        diffusion: constant_coeff(vec![1.0]),
        driver: DriverSpec::new(
            1,
            Arc::new(|_t, _x, y: f64, _z: &[f64]| -y * y * y),
            zero_g(),
            0.0,
            0.0,
            -1.0,
            100.0,
            1.5,
        )
        .expect("valid driver")
        .with_state_independent(true),
        obstacle: ObstacleSpec::none_with_terminal(Arc::new(|x: &[f64]| x[0].cos())),
        default_paths: 16_384,
        pde: None,
    }
}

/// Noise-free variant of [`cubic_driver`]: unit terminal data and zero
/// diffusion turn the equation into the scalar ODE `dY/dt = Y^3`, whose
/// value at time zero is `(1 + 2 T)^{-1/2}`.
pub fn cubic_driver_deterministic() -> CatalogProblem {
    let mut problem = cubic_driver();
    problem.name = "cubic_driver_deterministic";
    problem.summary = "noise-free f = -y^3; Y_0 = (1 + 2T)^{-1/2} exactly";
    problem.grid = TimeGrid::new(0.25, 256).expect("valid grid");
    problem.diffusion = constant_coeff(vec![0.0]);
    problem.obstacle = ObstacleSpec::none_with_terminal(Arc::new(|_x: &[f64]| 1.0));
    problem.default_paths = 256;
    problem
}

/// Brownian motion reflected in `[0, 1]` with constant boundary flux
/// `g = -0.5`: every unit of boundary local time drains half a unit of
/// value, so `Y` sits strictly below the plain expectation of the payoff.
pub fn reflected_bm_neumann() -> CatalogProblem {
    CatalogProblem {
        name: "reflected_bm_neumann",
        summary: "reflected BM in [0,1], boundary flux g = -0.5",
        domain: interval_domain(1.0).expect("valid interval"),
        x0: vec![0.5],
        grid: TimeGrid::new(0.5, 128).expect("valid grid"),
        drift: constant_coeff(vec![0.0]),
        diffusion: constant_coeff(vec![1.0]),
        driver: DriverSpec::new(
            1,
            zero_f(),
            Arc::new(|_t, _x: &[f64], _y: f64| -0.5),
            0.0,
            0.0,
            -1.0,
            1.0,
            1.5,
        )
        .expect("valid driver")
        .with_state_independent(true),
        obstacle: ObstacleSpec::none_with_terminal(Arc::new(|x: &[f64]| {
            x[0] * (1.0 - x[0]) + 1.0
        })),
        default_paths: 16_384,
        pde: Some(PdeSetup {
            lo: 0.0,
            hi: 1.0,
            nodes: 201,
            time_steps: 200,
            drift: Arc::new(|_x| 0.0),
            sigma: Arc::new(|_x| 1.0),
            reflecting: (true, true),
        }),
    }
}

/// Decay driver with the obstacle pinned at the terminal level: reflection
/// is active everywhere, `Y` stays at one and the compensator grows at the
/// decay rate, `K_T = 0.1 T`.
pub fn binding_obstacle() -> CatalogProblem {
    CatalogProblem {
        name: "binding_obstacle",
        summary: "obstacle pins Y at 1; K_T = 0.1 T exactly",
        domain: half_line_domain(),
        x0: vec![0.5],
        grid: TimeGrid::new(1.0, 64).expect("valid grid"),
        drift: constant_coeff(vec![0.0]),
        diffusion: constant_coeff(vec![1.0]),
        driver: DriverSpec::new(1, linear_f(-0.1), zero_g(), 0.0, 0.0, -1.0, 1.0, 1.5)
            .expect("valid driver")
            .with_state_independent(true),
        obstacle: ObstacleSpec {
            barrier: Barrier::Markovian(Arc::new(|_t, _x: &[f64]| 1.0)),
            terminal: crate::models::Terminal::Markovian(Arc::new(|_x: &[f64]| 1.0)),
        },
        default_paths: 8192,
        pde: Some(PdeSetup {
            lo: 0.0,
            hi: 4.0,
            nodes: 201,
            time_steps: 100,
            drift: Arc::new(|_x| 0.0),
            sigma: Arc::new(|_x| 1.0),
            reflecting: (true, false),
        }),
    }
}

pub fn all() -> Vec<CatalogProblem> {
    vec![
        trivial_constant(),
        linear_discount(),
        american_put_analog(),
        cubic_driver(),
        reflected_bm_neumann(),
        binding_obstacle(),
    ]
}

pub fn by_name(name: &str) -> Option<CatalogProblem> {
    match name {
        "trivial_constant" => Some(trivial_constant()),
        "linear_discount" => Some(linear_discount()),
        "american_put_analog" => Some(american_put_analog()),
        "cubic_driver" => Some(cubic_driver()),
        "cubic_driver_deterministic" => Some(cubic_driver_deterministic()),
        "reflected_bm_neumann" => Some(reflected_bm_neumann()),
        "binding_obstacle" => Some(binding_obstacle()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{check_assumptions, CheckOptions, Clause};

    #[test]
    fn every_entry_is_well_formed() {
        for problem in all() {
            assert_eq!(problem.domain.dim, problem.driver.dim, "{}", problem.name);
            assert_eq!(problem.x0.len(), problem.driver.dim, "{}", problem.name);
            assert!((problem.domain.psi)(&problem.x0) >= 0.0, "{}", problem.name);
            let mut out = vec![0.0; problem.driver.dim];
            (problem.drift)(0.0, &problem.x0, &mut out);
            assert!(out.iter().all(|v| v.is_finite()));
            (problem.diffusion)(0.0, &problem.x0, &mut out);
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn structural_clauses_hold_up_to_the_flux_slope() {
        // Constant-in-y flux functions cannot meet a strictly negative slope
        // bound, so GMonotone is the one clause allowed to fail.
        for problem in all() {
            let report =
                check_assumptions(&problem.driver, 400, 7, &CheckOptions::default()).unwrap();
            for check in &report.clauses {
                if check.clause == Clause::GMonotone {
                    continue;
                }
                assert!(check.pass, "{}: {:?}", problem.name, check.clause);
            }
        }
    }

    #[test]
    fn lookup_matches_listing() {
        for problem in all() {
            let found = by_name(problem.name).unwrap();
            assert_eq!(found.name, problem.name);
        }
        assert!(by_name("cubic_driver_deterministic").is_some());
        assert!(by_name("missing").is_none());
    }

    #[test]
    fn pde_setups_assemble() {
        let with_pde: Vec<_> = all().into_iter().filter(|p| p.pde.is_some()).collect();
        assert!(with_pde.len() >= 3);
        for problem in with_pde {
            let pde = problem.pde_problem().unwrap();
            assert_eq!(pde.time.t_max, problem.grid.t_max);
            assert!(pde.grid.lo < problem.x0[0] + 1e-12 && problem.x0[0] <= pde.grid.hi + 1e-12);
        }
        assert!(cubic_driver().pde_problem().is_none());
    }

    #[test]
    fn deterministic_cubic_matches_its_ode() {
        let problem = cubic_driver_deterministic();
        let expect = (1.0 + 2.0 * problem.grid.t_max).powf(-0.5);
        assert!((expect - 0.816496580927726).abs() < 1e-12);
    }
}
