//! Run configuration. A small TOML schema selects either a catalog entry or
//! a parametric one-dimensional problem, plus sampling, scheme, and solver
//! settings. Unknown keys are rejected so typos fail loudly instead of
//! silently running defaults.

use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;

use crate::catalog::{self, CatalogProblem};
use crate::forward_sde::{constant_coeff, ReflectionScheme};
use crate::models::{
    ball_domain, free_domain, half_line_domain, interval_domain, Barrier, DriverFn, DriverSpec,
    FluxFn, ObstacleSpec, Terminal, TimeGrid,
};
use crate::solver::{Basis, SolveMethod, SolveOptions};

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub run: RunSection,
    pub problem: ProblemSection,
}

#[derive(Deserialize, Debug, Clone)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Monte Carlo sample count; falls back to the problem default.
    pub paths: Option<usize>,
    /// Time steps; falls back to the problem default.
    pub steps: Option<usize>,
    pub method: MethodChoice,
    /// Reflection penalty rate, used when `method = "penalized"`.
    pub penalty: f64,
    pub basis: BasisChoice,
    pub degree: usize,
    pub knots: usize,
    pub picard: usize,
    pub mu_reduction: bool,
    pub scheme: SchemeChoice,
    /// Forward penalization rate, used when `scheme = "penalization"`.
    pub kappa: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 42,
            paths: None,
            steps: None,
            method: MethodChoice::Reflected,
            penalty: 100.0,
            basis: BasisChoice::Poly,
            degree: 4,
            knots: 12,
            picard: 2,
            mu_reduction: false,
            scheme: SchemeChoice::Projection,
            kappa: 500.0,
        }
    }
}

#[derive(Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    Reflected,
    Penalized,
}

#[derive(Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum BasisChoice {
    Poly,
    Piecewise,
}

#[derive(Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SchemeChoice {
    Projection,
    Skorokhod,
    Penalization,
}

impl RunSection {
    pub fn method(&self) -> Result<SolveMethod, ConfigError> {
        match self.method {
            MethodChoice::Reflected => Ok(SolveMethod::Reflected),
            MethodChoice::Penalized => {
                if !(self.penalty > 0.0) || !self.penalty.is_finite() {
                    return Err(invalid(format!(
                        "penalty must be positive and finite, got {}",
                        self.penalty
                    )));
                }
                Ok(SolveMethod::Penalized { strength: self.penalty })
            }
        }
    }

    pub fn solve_options(&self) -> Result<SolveOptions, ConfigError> {
        let basis = match self.basis {
            BasisChoice::Poly => {
                if self.degree == 0 || self.degree > 12 {
                    return Err(invalid(format!("degree must be in 1..=12, got {}", self.degree)));
                }
                Basis::Polynomial { degree: self.degree }
            }
            BasisChoice::Piecewise => {
                if self.knots < 2 || self.knots > 256 {
                    return Err(invalid(format!("knots must be in 2..=256, got {}", self.knots)));
                }
                Basis::PiecewiseLinear { knots: self.knots }
            }
        };
        if self.picard == 0 || self.picard > 64 {
            return Err(invalid(format!("picard must be in 1..=64, got {}", self.picard)));
        }
        Ok(SolveOptions { basis, picard_iters: self.picard, mu_reduction: self.mu_reduction })
    }

    pub fn scheme(&self) -> Result<ReflectionScheme, ConfigError> {
        match self.scheme {
            SchemeChoice::Projection => Ok(ReflectionScheme::Projection),
            SchemeChoice::Skorokhod => Ok(ReflectionScheme::SkorokhodExplicit),
            SchemeChoice::Penalization => {
                if !(self.kappa > 0.0) || !self.kappa.is_finite() {
                    return Err(invalid(format!(
                        "kappa must be positive and finite, got {}",
                        self.kappa
                    )));
                }
                Ok(ReflectionScheme::Penalization { kappa: self.kappa })
            }
        }
    }
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    /// Name of a catalog entry. Mutually exclusive with `custom`.
    pub catalog: Option<String>,
    pub custom: Option<CustomProblem>,
}

/// Parametric one-dimensional problem: constant forward coefficients with a
/// small menu of drivers, fluxes, payoffs, and obstacles.
#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
pub struct CustomProblem {
    pub t_max: f64,
    pub x0: f64,
    #[serde(default)]
    pub domain: DomainChoice,
    #[serde(default)]
    pub drift: f64,
    #[serde(default = "one")]
    pub sigma: f64,
    pub driver: DriverChoice,
    #[serde(default)]
    pub flux: FluxChoice,
    pub terminal: TerminalChoice,
    #[serde(default)]
    pub obstacle: ObstacleChoice,
    #[serde(default = "default_p")]
    pub p: f64,
}

fn one() -> f64 {
    1.0
}

fn default_p() -> f64 {
    1.5
}

#[derive(Deserialize, Debug, Clone, Copy, Default, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainChoice {
    #[default]
    Free,
    HalfLine,
    Interval {
        length: f64,
    },
    Ball {
        radius: f64,
    },
}

#[derive(Deserialize, Debug, Clone, Copy, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverChoice {
    /// `f = 0`.
    Zero,
    /// `f = rate * y`.
    LinearY { rate: f64 },
    /// `f = -scale * y^3` with `scale > 0`; continuous, monotone, and far
    /// from Lipschitz.
    Cubic { scale: f64 },
    /// `f = rate * y + z_coeff * z + constant`.
    AffineYz { rate: f64, z_coeff: f64, constant: f64 },
}

#[derive(Deserialize, Debug, Clone, Copy, Default, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FluxChoice {
    #[default]
    Zero,
    Constant {
        value: f64,
    },
    /// `g = slope * y` with `slope < 0`.
    LinearY {
        slope: f64,
    },
}

#[derive(Deserialize, Debug, Clone, Copy, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalChoice {
    Constant { value: f64 },
    /// `(strike - x)^+`.
    Put { strike: f64 },
    Cos,
    /// `x^2`.
    Quadratic,
}

#[derive(Deserialize, Debug, Clone, Copy, Default, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObstacleChoice {
    #[default]
    None,
    Constant {
        level: f64,
    },
    /// `(strike - x)^+`, time-independent.
    Put {
        strike: f64,
    },
}

pub fn parse_config(text: &str) -> Result<FileConfig, ConfigError> {
    Ok(toml::from_str::<FileConfig>(text)?)
}

impl FileConfig {
    /// Resolves the problem section into a runnable bundle. Catalog names are
    /// looked up verbatim; custom problems are assembled and validated.
    pub fn build_problem(&self) -> Result<CatalogProblem, ConfigError> {
        match (&self.problem.catalog, &self.problem.custom) {
            (Some(name), None) => catalog::by_name(name)
                .ok_or_else(|| invalid(format!("unknown catalog problem '{name}'"))),
            (None, Some(custom)) => build_custom(custom),
            (Some(_), Some(_)) => {
                Err(invalid("problem must set exactly one of 'catalog' and 'custom', got both"))
            }
            (None, None) => {
                Err(invalid("problem must set exactly one of 'catalog' and 'custom', got neither"))
            }
        }
    }
}

fn terminal_fn(choice: TerminalChoice) -> crate::models::TerminalFn {
    match choice {
        TerminalChoice::Constant { value } => Arc::new(move |_x: &[f64]| value),
        TerminalChoice::Put { strike } => Arc::new(move |x: &[f64]| (strike - x[0]).max(0.0)),
        TerminalChoice::Cos => Arc::new(|x: &[f64]| x[0].cos()),
        TerminalChoice::Quadratic => Arc::new(|x: &[f64]| x[0] * x[0]),
    }
}

fn build_custom(c: &CustomProblem) -> Result<CatalogProblem, ConfigError> {
    if !(c.t_max > 0.0) || !c.t_max.is_finite() {
        return Err(invalid(format!("t_max must be positive and finite, got {}", c.t_max)));
    }
    if !c.x0.is_finite() || !c.drift.is_finite() || !(c.sigma >= 0.0) || !c.sigma.is_finite() {
        return Err(invalid("x0 and drift must be finite, sigma finite and >= 0"));
    }
    let domain = match c.domain {
        DomainChoice::Free => free_domain(1),
        DomainChoice::HalfLine => half_line_domain(),
        DomainChoice::Interval { length } => {
            interval_domain(length).map_err(|e| invalid(e.to_string()))?
        }
        DomainChoice::Ball { radius } => {
            ball_domain(radius, vec![0.0]).map_err(|e| invalid(e.to_string()))?
        }
    };
    if (domain.psi)(&[c.x0]) < 0.0 {
        return Err(invalid(format!("x0 = {} lies outside the domain", c.x0)));
    }

    // Structural constants are inferred from the chosen shapes so that the
    // sampled assumption checks hold on their default box.
    let (f, lambda, mu, m_f): (DriverFn, f64, f64, f64) = match c.driver {
        DriverChoice::Zero => (Arc::new(|_t, _x, _y, _z| 0.0), 0.0, 0.0, 0.0),
        DriverChoice::LinearY { rate } => {
            if !rate.is_finite() {
                return Err(invalid("driver rate must be finite"));
            }
            (Arc::new(move |_t, _x, y, _z| rate * y), 0.0, rate, rate.abs())
        }
        DriverChoice::Cubic { scale } => {
            if !(scale > 0.0) || !scale.is_finite() {
                return Err(invalid(format!("cubic scale must be positive, got {scale}")));
            }
            // Growth constant valid on the default check box |y| <= 10.
            (Arc::new(move |_t, _x, y: f64, _z| -scale * y * y * y), 0.0, 0.0, 100.0 * scale)
        }
        DriverChoice::AffineYz { rate, z_coeff, constant } => {
            if !rate.is_finite() || !z_coeff.is_finite() || !constant.is_finite() {
                return Err(invalid("affine driver coefficients must be finite"));
            }
            (
                Arc::new(move |_t, _x, y, z: &[f64]| rate * y + z_coeff * z[0] + constant),
                z_coeff.abs(),
                rate,
                rate.abs().max(z_coeff.abs()),
            )
        }
    };
    let (g, beta, m_g): (FluxFn, f64, f64) = match c.flux {
        FluxChoice::Zero => (Arc::new(|_t, _x, _y| 0.0), -1.0, 0.0),
        FluxChoice::Constant { value } => {
            if !value.is_finite() {
                return Err(invalid("flux value must be finite"));
            }
            (Arc::new(move |_t, _x, _y| value), -1.0, 0.0)
        }
        FluxChoice::LinearY { slope } => {
            if !(slope < 0.0) || !slope.is_finite() {
                return Err(invalid(format!("flux slope must be strictly negative, got {slope}")));
            }
            (Arc::new(move |_t, _x, y| slope * y), slope, slope.abs())
        }
    };
    let big_m = m_f.max(m_g).max(1.0);
    let driver = DriverSpec::new(1, f, g, lambda, mu, beta, big_m, c.p)
        .map_err(|e| invalid(e.to_string()))?
        .with_state_independent(true);

    let terminal = terminal_fn(c.terminal);
    let barrier = match c.obstacle {
        ObstacleChoice::None => Barrier::Absent,
        ObstacleChoice::Constant { level } => {
            if !level.is_finite() {
                return Err(invalid("obstacle level must be finite"));
            }
            Barrier::Markovian(Arc::new(move |_t, _x: &[f64]| level))
        }
        ObstacleChoice::Put { strike } => {
            Barrier::Markovian(Arc::new(move |_t, x: &[f64]| (strike - x[0]).max(0.0)))
        }
    };
    let obstacle = ObstacleSpec { barrier, terminal: Terminal::Markovian(terminal) };

    Ok(CatalogProblem {
        name: "custom",
        summary: "user-defined parametric problem",
        domain,
        x0: vec![c.x0],
        grid: TimeGrid::new(c.t_max, 64).map_err(|e| invalid(e.to_string()))?,
        drift: constant_coeff(vec![c.drift]),
        diffusion: constant_coeff(vec![c.sigma]),
        driver,
        obstacle,
        default_paths: 8192,
        pde: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_catalog_run() {
        let cfg = parse_config(
            r#"
            [run]
            seed = 7
            paths = 1000
            method = "penalized"
            penalty = 50.0

            [problem]
            catalog = "linear_discount"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.run.paths, Some(1000));
        let method = cfg.run.method().unwrap();
        assert!(matches!(method, SolveMethod::Penalized { strength } if strength == 50.0));
        let problem = cfg.build_problem().unwrap();
        assert_eq!(problem.name, "linear_discount");
    }

    #[test]
    fn parses_a_custom_problem() {
        let cfg = parse_config(
            r#"
            [problem.custom]
            t_max = 0.5
            x0 = 0.25
            domain = { kind = "interval", length = 1.0 }
            driver = { kind = "linear_y", rate = -0.1 }
            flux = { kind = "constant", value = -0.5 }
            terminal = { kind = "quadratic" }
            "#,
        )
        .unwrap();
        let problem = cfg.build_problem().unwrap();
        assert_eq!(problem.name, "custom");
        assert_eq!(problem.driver.mu, -0.1);
        assert_eq!(problem.driver.eval_f(0.0, &[0.0], 2.0, &[0.0]), -0.2);
        assert_eq!(problem.driver.eval_g(0.0, &[0.0], 3.0), -0.5);
        let term = problem.obstacle.terminal_value(&[3.0], 0);
        assert_eq!(term, 9.0);
    }

    #[test]
    fn rejects_unknown_keys() {
        let err = parse_config(
            r#"
            [run]
            sede = 7

            [problem]
            catalog = "linear_discount"
            "#,
        );
        assert!(err.is_err());
    }

    #[test]
    fn rejects_ambiguous_problem_sections() {
        let both = parse_config(
            r#"
            [problem]
            catalog = "linear_discount"

            [problem.custom]
            t_max = 1.0
            x0 = 0.0
            driver = { kind = "zero" }
            terminal = { kind = "cos" }
            "#,
        )
        .unwrap();
        assert!(both.build_problem().is_err());
        let neither = parse_config("[problem]\n").unwrap();
        assert!(neither.build_problem().is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        let bad_slope = parse_config(
            r#"
            [problem.custom]
            t_max = 1.0
            x0 = 0.0
            driver = { kind = "zero" }
            flux = { kind = "linear_y", slope = 0.5 }
            terminal = { kind = "cos" }
            "#,
        )
        .unwrap();
        assert!(bad_slope.build_problem().is_err());

        let outside = parse_config(
            r#"
            [problem.custom]
            t_max = 1.0
            x0 = -2.0
            domain = { kind = "half_line" }
            driver = { kind = "zero" }
            terminal = { kind = "cos" }
            "#,
        )
        .unwrap();
        assert!(outside.build_problem().is_err());

        let mut run = RunSection::default();
        run.picard = 0;
        assert!(run.solve_options().is_err());
        run.picard = 2;
        run.kappa = -1.0;
        run.scheme = SchemeChoice::Penalization;
        assert!(run.scheme().is_err());
    }

    #[test]
    fn affine_driver_infers_its_constants() {
        let cfg = parse_config(
            r#"
            [problem.custom]
            t_max = 1.0
            x0 = 0.0
            driver = { kind = "affine_yz", rate = 0.3, z_coeff = 0.2, constant = 1.0 }
            terminal = { kind = "constant", value = 2.0 }
            "#,
        )
        .unwrap();
        let problem = cfg.build_problem().unwrap();
        assert_eq!(problem.driver.lambda, 0.2);
        assert_eq!(problem.driver.mu, 0.3);
        assert_eq!(problem.driver.eval_f(0.0, &[0.0], 1.0, &[2.0]), 0.3 + 0.4 + 1.0);
    }
}
