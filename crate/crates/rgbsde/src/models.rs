//! Problem data: time grid, driver pair `(f, g)` with structural constants,
//! obstacle and terminal data, and reflecting domains.
//!
//! The structural conditions validated here (by sampling, since drivers are
//! opaque callables) are:
//!
//! * `|f(t,x,y,z) - f(t,x,y,z')| <= lambda |z - z'|`           (z-Lipschitz)
//! * `(y-y')(f(t,x,y,z) - f(t,x,y',z)) <= mu |y - y'|^2`       (f monotone)
//! * `|f(t,x,y,z)| <= |f(t,x,0,0)| + M (|y| + |z|)`            (f growth)
//! * `(y-y')(g(t,x,y) - g(t,x,y')) <= beta |y - y'|^2`         (g monotone)
//! * `|g(t,x,y)| <= |g(t,x,0)| + M |y|`                        (g growth)
//!
//! with `beta < 0` and the moment exponent `p` in `(1, 2)` required at
//! construction time. Checks are falsification by sampling: a pass only says
//! no violation was found in the configured box.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::util;

pub type DriverFn = Arc<dyn Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync>;
pub type FluxFn = Arc<dyn Fn(f64, &[f64], f64) -> f64 + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type BarrierFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type VectorField = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("invalid constant: {0}")]
    InvalidConstant(String),
    #[error("driver evaluation returned a non-finite value at {0}")]
    NonFiniteValue(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Uniform partition of `[0, t_max]` into `steps` intervals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub t_max: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t_max: f64, steps: usize) -> Result<Self, ModelError> {
        if !(t_max > 0.0) || !t_max.is_finite() {
            return Err(ModelError::InvalidConstant(format!(
                "horizon must be positive and finite, got {t_max}"
            )));
        }
        if steps == 0 {
            return Err(ModelError::InvalidConstant("steps must be >= 1".into()));
        }
        Ok(TimeGrid { t_max, steps })
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.t_max / self.steps as f64
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        self.t_max * i as f64 / self.steps as f64
    }

    /// Number of nodes, `steps + 1`.
    #[inline]
    pub fn nodes(&self) -> usize {
        self.steps + 1
    }
}

/// Driver pair `(f, g)` with its declared structural constants.
///
/// `f(t, x, y, z)` multiplies `dt`, `g(t, x, y)` multiplies the boundary
/// local-time increment `dG`. `x` is the forward state (length `dim`),
/// `z` has length `dim`.
#[derive(Clone)]
pub struct DriverSpec {
    pub f: DriverFn,
    pub g: FluxFn,
    /// z-Lipschitz constant of `f` (>= 0).
    pub lambda: f64,
    /// One-sided monotonicity constant of `f` in `y` (any sign).
    pub mu: f64,
    /// One-sided monotonicity constant of `g` in `y` (strictly negative).
    pub beta: f64,
    /// Linear growth constant of both `f` and `g`.
    pub big_m: f64,
    /// Moment exponent, in the open interval (1, 2).
    pub p: f64,
    /// State and noise dimension.
    pub dim: usize,
    /// True if `f` and `g` ignore the state argument; lets callers cache
    /// state-uniform quantities (baseline `f(t,x,0,0)`, local oscillation
    /// bounds) once per time node.
    pub state_independent: bool,
    /// Estimated global y-Lipschitz constant, populated by the driver
    /// regularization stage.
    pub lip_y: Option<f64>,
}

impl fmt::Debug for DriverSpec {
    fn fmt(&self, w: &mut fmt::Formatter<'_>) -> fmt::Result {
        w.debug_struct("DriverSpec")
            .field("lambda", &self.lambda)
            .field("mu", &self.mu)
            .field("beta", &self.beta)
            .field("big_m", &self.big_m)
            .field("p", &self.p)
            .field("dim", &self.dim)
            .field("state_independent", &self.state_independent)
            .field("lip_y", &self.lip_y)
            .finish_non_exhaustive()
    }
}

impl DriverSpec {
    pub fn new(
        dim: usize,
        f: DriverFn,
        g: FluxFn,
        lambda: f64,
        mu: f64,
        beta: f64,
        big_m: f64,
        p: f64,
    ) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::InvalidConstant("dim must be >= 1".into()));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(ModelError::InvalidConstant(format!(
                "lambda must be finite and >= 0, got {lambda}"
            )));
        }
        if !mu.is_finite() {
            return Err(ModelError::InvalidConstant(format!("mu must be finite, got {mu}")));
        }
        if !(beta < 0.0) || !beta.is_finite() {
            return Err(ModelError::InvalidConstant(format!(
                "beta must be finite and < 0, got {beta}"
            )));
        }
        if !(big_m >= 0.0) || !big_m.is_finite() {
            return Err(ModelError::InvalidConstant(format!(
                "growth constant must be finite and >= 0, got {big_m}"
            )));
        }
        if !(p > 1.0 && p < 2.0) {
            return Err(ModelError::InvalidConstant(format!(
                "moment exponent p must lie in (1, 2), got {p}"
            )));
        }
        Ok(DriverSpec {
            f,
            g,
            lambda,
            mu,
            beta,
            big_m,
            p,
            dim,
            state_independent: false,
            lip_y: None,
        })
    }

    pub fn with_state_independent(mut self, yes: bool) -> Self {
        self.state_independent = yes;
        self
    }

    #[inline]
    pub fn eval_f(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        (self.f)(t, x, y, z)
    }

    #[inline]
    pub fn eval_g(&self, t: f64, x: &[f64], y: f64) -> f64 {
        (self.g)(t, x, y)
    }

    /// Baseline `f(t, x, 0, 0)`; `zero_z` must be a zero slice of length `dim`.
    #[inline]
    pub fn f0(&self, t: f64, x: &[f64], zero_z: &[f64]) -> f64 {
        (self.f)(t, x, 0.0, zero_z)
    }

    /// Baseline `g(t, x, 0)`.
    #[inline]
    pub fn g0(&self, t: f64, x: &[f64]) -> f64 {
        (self.g)(t, x, 0.0)
    }
}

/// Lower obstacle and terminal condition. Either closed-form functions of
/// `(t, x)` or explicit per-path values (so audits can perturb the data
/// directly).
#[derive(Clone)]
pub struct ObstacleSpec {
    pub barrier: Barrier,
    pub terminal: Terminal,
}

#[derive(Clone)]
pub enum Barrier {
    /// No obstacle; treated as an obstacle at negative infinity.
    Absent,
    Markovian(BarrierFn),
    /// Row-major `[paths x nodes]` barrier values.
    Explicit {
        values: Arc<Vec<f64>>,
        paths: usize,
        nodes: usize,
    },
}

#[derive(Clone)]
pub enum Terminal {
    Markovian(TerminalFn),
    Explicit(Arc<Vec<f64>>),
}

impl ObstacleSpec {
    pub fn none_with_terminal(l: TerminalFn) -> Self {
        ObstacleSpec { barrier: Barrier::Absent, terminal: Terminal::Markovian(l) }
    }

    /// Barrier level at node `node` of path `path`, state `x`, time `t`.
    /// Absent barriers evaluate to negative infinity.
    #[inline]
    pub fn barrier_value(&self, t: f64, x: &[f64], path: usize, node: usize) -> f64 {
        match &self.barrier {
            Barrier::Absent => f64::NEG_INFINITY,
            Barrier::Markovian(h) => h(t, x),
            Barrier::Explicit { values, nodes, .. } => values[path * nodes + node],
        }
    }

    #[inline]
    pub fn terminal_value(&self, x: &[f64], path: usize) -> f64 {
        match &self.terminal {
            Terminal::Markovian(l) => l(x),
            Terminal::Explicit(xi) => xi[path],
        }
    }

    pub fn has_barrier(&self) -> bool {
        !matches!(self.barrier, Barrier::Absent)
    }
}

impl fmt::Debug for ObstacleSpec {
    fn fmt(&self, w: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = match &self.barrier {
            Barrier::Absent => "absent",
            Barrier::Markovian(_) => "markovian",
            Barrier::Explicit { .. } => "explicit",
        };
        let t = match &self.terminal {
            Terminal::Markovian(_) => "markovian",
            Terminal::Explicit(_) => "explicit",
        };
        write!(w, "ObstacleSpec {{ barrier: {b}, terminal: {t} }}")
    }
}

/// Reflecting domain `closure{psi > 0}`. `psi` vanishes on the boundary and
/// `inward_normal` returns the unit inward normal (the push direction for
/// reflection).
#[derive(Clone)]
pub struct DomainSpec {
    pub psi: ScalarField,
    pub inward_normal: VectorField,
    pub dim: usize,
    pub kind: DomainKind,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DomainKind {
    HalfLine,
    Interval { length: f64 },
    Ball { radius: f64 },
    /// Whole space; no boundary, local time stays zero.
    Free,
    Custom,
}

impl fmt::Debug for DomainSpec {
    fn fmt(&self, w: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(w, "DomainSpec {{ dim: {}, kind: {:?} }}", self.dim, self.kind)
    }
}

/// `[0, inf)` in dimension 1: `psi(x) = x`, inward normal `+1`.
pub fn half_line_domain() -> DomainSpec {
    DomainSpec {
        psi: Arc::new(|x: &[f64]| x[0]),
        inward_normal: Arc::new(|_: &[f64]| vec![1.0]),
        dim: 1,
        kind: DomainKind::HalfLine,
    }
}

/// `[0, L]` in dimension 1. `psi(x) = x (L - x) / L` is smooth, vanishes at
/// both faces and has unit slope there; the normal field is the unit inward
/// normal of the nearer face.
pub fn interval_domain(length: f64) -> Result<DomainSpec, ModelError> {
    if !(length > 0.0) || !length.is_finite() {
        return Err(ModelError::InvalidConstant(format!(
            "interval length must be positive, got {length}"
        )));
    }
    let l = length;
    Ok(DomainSpec {
        psi: Arc::new(move |x: &[f64]| x[0] * (l - x[0]) / l),
        inward_normal: Arc::new(move |x: &[f64]| vec![if x[0] < l / 2.0 { 1.0 } else { -1.0 }]),
        dim: 1,
        kind: DomainKind::Interval { length },
    })
}

/// Ball of radius `radius` centered at `center`.
pub fn ball_domain(radius: f64, center: Vec<f64>) -> Result<DomainSpec, ModelError> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(ModelError::InvalidConstant(format!(
            "ball radius must be positive, got {radius}"
        )));
    }
    if center.is_empty() {
        return Err(ModelError::DimensionMismatch("ball center must be non-empty".into()));
    }
    let dim = center.len();
    let c1 = center.clone();
    let c2 = center;
    Ok(DomainSpec {
        psi: Arc::new(move |x: &[f64]| {
            let d: f64 = x.iter().zip(&c1).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            radius - d
        }),
        inward_normal: Arc::new(move |x: &[f64]| {
            let mut v: Vec<f64> = c2.iter().zip(x).map(|(b, a)| b - a).collect();
            let n = util::norm2(&v);
            if n > 0.0 {
                for e in &mut v {
                    *e /= n;
                }
            }
            v
        }),
        dim,
        kind: DomainKind::Ball { radius },
    })
}

/// Whole space (no reflection, local time identically zero).
pub fn free_domain(dim: usize) -> DomainSpec {
    DomainSpec {
        psi: Arc::new(|_: &[f64]| 1.0),
        inward_normal: Arc::new(move |x: &[f64]| vec![0.0; x.len()]),
        dim,
        kind: DomainKind::Free,
    }
}

impl DomainSpec {
    /// Samples points in a box of the given radius, keeps those within
    /// `band` of the boundary, and checks the normal field has unit length
    /// there. Vacuously true if no near-boundary point is found (e.g. for
    /// the free domain).
    pub fn validate_normal_band(
        &self,
        samples: usize,
        box_radius: f64,
        band: f64,
        seed: u64,
    ) -> Result<(), ModelError> {
        if matches!(self.kind, DomainKind::Free) {
            return Ok(());
        }
        let mut rng = util::path_rng(seed, 0x6e6f726d);
        let mut x = vec![0.0; self.dim];
        for _ in 0..samples {
            for e in &mut x {
                *e = rng.random_range(-box_radius..box_radius);
            }
            let v = (self.psi)(&x);
            if !v.is_finite() {
                return Err(ModelError::NonFiniteValue(format!("psi at {x:?}")));
            }
            if v.abs() <= band {
                let n = (self.inward_normal)(&x);
                let len = util::norm2(&n);
                if (len - 1.0).abs() > 1e-6 {
                    return Err(ModelError::InvalidConstant(format!(
                        "inward normal has length {len} at {x:?}, expected a unit vector near the boundary"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Sampling box for [`check_assumptions`].
#[derive(Clone, Debug)]
pub struct CheckOptions {
    /// `y, y'` and each `z` coordinate are drawn from `[-radius, radius]`;
    /// the state is drawn from the same box.
    pub radius: f64,
    /// Times are drawn from `[0, t_max]`.
    pub t_max: f64,
    /// Base relative tolerance; the effective slack at a sample is
    /// `tol * (1 + max(|lhs|, |rhs|))`.
    pub tol: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { radius: 10.0, t_max: 1.0, tol: 1e-9 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Clause {
    ZLipschitz,
    FMonotone,
    FGrowth,
    GMonotone,
    GGrowth,
}

impl fmt::Display for Clause {
    fn fmt(&self, w: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Clause::ZLipschitz => "z_lipschitz",
            Clause::FMonotone => "f_monotone",
            Clause::FGrowth => "f_growth",
            Clause::GMonotone => "g_monotone",
            Clause::GGrowth => "g_growth",
        };
        w.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub struct ClauseCheck {
    pub clause: Clause,
    pub pass: bool,
    /// Largest sampled `lhs - rhs` (positive means the bound was exceeded
    /// before tolerance).
    pub worst_violation: f64,
}

#[derive(Clone, Debug)]
pub struct AssumptionReport {
    pub clauses: Vec<ClauseCheck>,
    pub samples: usize,
    pub seed: u64,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.clauses.iter().all(|c| c.pass)
    }

    pub fn clause(&self, c: Clause) -> &ClauseCheck {
        self.clauses.iter().find(|k| k.clause == c).expect("clause present")
    }
}

struct Sample {
    t: f64,
    x: Vec<f64>,
    y: f64,
    y2: f64,
    z: Vec<f64>,
    z2: Vec<f64>,
}

fn draw_samples(dim: usize, samples: usize, seed: u64, opts: &CheckOptions) -> Vec<Sample> {
    let mut rng: ChaCha12Rng = util::path_rng(seed, 0x636865636b);
    let r = opts.radius;
    (0..samples)
        .map(|_| {
            let draw_vec =
                |rng: &mut ChaCha12Rng| (0..dim).map(|_| rng.random_range(-r..r)).collect::<Vec<f64>>();
            let t = rng.random_range(0.0..opts.t_max);
            let x = draw_vec(&mut rng);
            let y = rng.random_range(-r..r);
            let y2 = rng.random_range(-r..r);
            let z = draw_vec(&mut rng);
            let z2 = draw_vec(&mut rng);
            Sample { t, x, y, y2, z, z2 }
        })
        .collect()
}

/// Sampled falsification of the structural clauses. Deterministic in
/// `(driver, samples, seed, opts)`; per-sample results are combined with a
/// max, so the merge order cannot matter.
pub fn check_assumptions(
    driver: &DriverSpec,
    samples: usize,
    seed: u64,
    opts: &CheckOptions,
) -> Result<AssumptionReport, ModelError> {
    use rayon::prelude::*;

    if samples == 0 {
        return Err(ModelError::InvalidConstant("samples must be >= 1".into()));
    }
    let table = draw_samples(driver.dim, samples, seed, opts);
    let zero_z = vec![0.0; driver.dim];

    // Per-sample (violation, adjusted violation) for one clause; the adjusted
    // value subtracts the scale-aware tolerance.
    let eval_clause = |clause: Clause, s: &Sample| -> Result<(f64, f64), ModelError> {
        let chk = |v: f64, what: &str| -> Result<f64, ModelError> {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(ModelError::NonFiniteValue(format!("{what} at t={}, x={:?}", s.t, s.x)))
            }
        };
        let (lhs, rhs) = match clause {
            Clause::ZLipschitz => {
                let a = chk(driver.eval_f(s.t, &s.x, s.y, &s.z), "f")?;
                let b = chk(driver.eval_f(s.t, &s.x, s.y, &s.z2), "f")?;
                let dz: f64 = s.z.iter().zip(&s.z2).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
                ((a - b).abs(), driver.lambda * dz)
            }
            Clause::FMonotone => {
                let a = chk(driver.eval_f(s.t, &s.x, s.y, &s.z), "f")?;
                let b = chk(driver.eval_f(s.t, &s.x, s.y2, &s.z), "f")?;
                let dy = s.y - s.y2;
                (dy * (a - b), driver.mu * (dy * dy))
            }
            Clause::FGrowth => {
                let a = chk(driver.eval_f(s.t, &s.x, s.y, &s.z), "f")?;
                let base = chk(driver.f0(s.t, &s.x, &zero_z), "f baseline")?;
                (a.abs(), base.abs() + driver.big_m * (s.y.abs() + util::norm2(&s.z)))
            }
            Clause::GMonotone => {
                let a = chk(driver.eval_g(s.t, &s.x, s.y), "g")?;
                let b = chk(driver.eval_g(s.t, &s.x, s.y2), "g")?;
                let dy = s.y - s.y2;
                (dy * (a - b), driver.beta * (dy * dy))
            }
            Clause::GGrowth => {
                let a = chk(driver.eval_g(s.t, &s.x, s.y), "g")?;
                let base = chk(driver.g0(s.t, &s.x), "g baseline")?;
                (a.abs(), base.abs() + driver.big_m * s.y.abs())
            }
        };
        let scale = 1.0 + lhs.abs().max(rhs.abs());
        Ok((lhs - rhs, lhs - rhs - opts.tol * scale))
    };

    let clauses = [
        Clause::ZLipschitz,
        Clause::FMonotone,
        Clause::FGrowth,
        Clause::GMonotone,
        Clause::GGrowth,
    ];
    let mut out = Vec::with_capacity(clauses.len());
    for clause in clauses {
        let per: Result<Vec<(f64, f64)>, ModelError> =
            table.par_iter().map(|s| eval_clause(clause, s)).collect();
        let per = per?;
        let worst = per.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let worst_adj = per.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        out.push(ClauseCheck { clause, pass: worst_adj <= 0.0, worst_violation: worst });
    }
    Ok(AssumptionReport { clauses: out, samples, seed })
}

/// Exponential change of variables removing a positive monotonicity constant.
///
/// With `m = mu > 0`, set `Ybar_t = exp(m t) Y_t`. The transformed data
///
/// ```text
/// fbar(t,x,y,z) = exp(m t) f(t, x, e^{-mt} y, e^{-mt} z) - m y
/// gbar(t,x,y)   = exp(m t) g(t, x, e^{-mt} y)
/// Sbar_t = exp(m t) S_t,    xibar = exp(m T) xi
/// ```
///
/// satisfies the monotonicity clause with constant `mu - m = 0` while
/// keeping `lambda` and `beta`; solutions map back via
/// `Y_t = exp(-m t) Ybar_t`, `Z_t = exp(-m t) Zbar_t`,
/// `dK_t = exp(-m t) dKbar_t`.
pub struct MuReduction {
    pub mu: f64,
    pub t_max: f64,
}

impl MuReduction {
    /// Factor multiplying transformed values at time `t` to recover the
    /// original scale.
    #[inline]
    pub fn unmap(&self, t: f64) -> f64 {
        (-self.mu * t).exp()
    }
}

pub fn reduce_to_nonpositive_mu(
    driver: &DriverSpec,
    obstacle: &ObstacleSpec,
    grid: &TimeGrid,
) -> Result<(DriverSpec, ObstacleSpec, MuReduction), ModelError> {
    let m = driver.mu;
    if !(m > 0.0) {
        return Err(ModelError::InvalidConstant(format!(
            "monotonicity reduction applies only to mu > 0, got {m}"
        )));
    }
    let f = driver.f.clone();
    let g = driver.g.clone();
    let dim = driver.dim;
    let fbar: DriverFn = Arc::new(move |t, x, y, z| {
        let e = (m * t).exp();
        let ei = 1.0 / e;
        let yy = ei * y;
        if z.iter().all(|&v| v == 0.0) {
            return e * f(t, x, yy, z) - m * y;
        }
        let zz: Vec<f64> = z.iter().map(|v| ei * v).collect();
        e * f(t, x, yy, &zz) - m * y
    });
    let gbar: FluxFn = Arc::new(move |t, x, y| {
        let e = (m * t).exp();
        e * g(t, x, y / e)
    });
    let t_end = grid.t_max;
    let mut new_driver = DriverSpec::new(
        dim,
        fbar,
        gbar,
        driver.lambda,
        0.0,
        driver.beta,
        driver.big_m * (m * t_end).exp() + m,
        driver.p,
    )?;
    new_driver.state_independent = driver.state_independent;

    let terminal = match &obstacle.terminal {
        Terminal::Markovian(l) => {
            let l = l.clone();
            let scale = (m * t_end).exp();
            Terminal::Markovian(Arc::new(move |x: &[f64]| scale * l(x)))
        }
        Terminal::Explicit(xi) => {
            let scale = (m * t_end).exp();
            Terminal::Explicit(Arc::new(xi.iter().map(|v| scale * v).collect()))
        }
    };
    let barrier = match &obstacle.barrier {
        Barrier::Absent => Barrier::Absent,
        Barrier::Markovian(h) => {
            let h = h.clone();
            Barrier::Markovian(Arc::new(move |t: f64, x: &[f64]| (m * t).exp() * h(t, x)))
        }
        Barrier::Explicit { values, paths, nodes } => {
            if *nodes != grid.nodes() {
                return Err(ModelError::DimensionMismatch(format!(
                    "explicit barrier has {nodes} nodes, grid has {}",
                    grid.nodes()
                )));
            }
            let mut scaled = Vec::with_capacity(values.len());
            for p in 0..*paths {
                for i in 0..*nodes {
                    scaled.push((m * grid.node(i)).exp() * values[p * nodes + i]);
                }
            }
            Barrier::Explicit { values: Arc::new(scaled), paths: *paths, nodes: *nodes }
        }
    };
    Ok((
        new_driver,
        ObstacleSpec { barrier, terminal },
        MuReduction { mu: m, t_max: t_end },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_driver(a: f64, b: f64, c: f64) -> DriverSpec {
        DriverSpec::new(
            1,
            Arc::new(move |_t, _x: &[f64], y, z: &[f64]| a * y + b * z[0] + c),
            Arc::new(|_t, _x: &[f64], _y| 0.0),
            b.abs(),
            a,
            -1.0,
            a.abs().max(b.abs()),
            1.5,
        )
        .unwrap()
    }

    #[test]
    fn construction_rejects_bad_constants() {
        let f: DriverFn = Arc::new(|_, _: &[f64], _, _: &[f64]| 0.0);
        let g: FluxFn = Arc::new(|_, _: &[f64], _| 0.0);
        assert!(DriverSpec::new(1, f.clone(), g.clone(), 0.0, 0.0, 0.0, 1.0, 1.5).is_err());
        assert!(DriverSpec::new(1, f.clone(), g.clone(), 0.0, 0.0, 1.0, 1.0, 1.5).is_err());
        assert!(DriverSpec::new(1, f.clone(), g.clone(), 0.0, 0.0, -1.0, 1.0, 1.0).is_err());
        assert!(DriverSpec::new(1, f.clone(), g.clone(), 0.0, 0.0, -1.0, 1.0, 2.0).is_err());
        assert!(DriverSpec::new(1, f.clone(), g.clone(), -0.5, 0.0, -1.0, 1.0, 1.5).is_err());
        assert!(DriverSpec::new(1, f.clone(), g.clone(), 0.0, 0.0, -1.0, -1.0, 1.5).is_err());
        assert!(DriverSpec::new(1, f, g, 0.0, 0.0, -1.0, 1.0, 1.5).is_ok());
    }

    #[test]
    fn time_grid_rejects_degenerate_input() {
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert_eq!(g.dt(), 0.25);
        assert_eq!(g.node(4), 1.0);
        assert_eq!(g.nodes(), 5);
    }

    #[test]
    fn negative_linear_pair_passes_all_clauses() {
        let d = DriverSpec::new(
            1,
            Arc::new(|_t, _x: &[f64], y, _z: &[f64]| -y),
            Arc::new(|_t, _x: &[f64], y| -y),
            0.0,
            -1.0,
            -1.0,
            1.0,
            1.5,
        )
        .unwrap();
        let rep = check_assumptions(&d, 2000, 11, &CheckOptions::default()).unwrap();
        assert!(rep.all_pass(), "{rep:?}");
    }

    #[test]
    fn understated_lambda_is_flagged_with_expected_magnitude() {
        // f = z with declared lambda = 0.5: violation is 0.5 |z - z'|,
        // so the worst sampled violation approaches 0.5 * box diameter.
        let d = DriverSpec::new(
            1,
            Arc::new(|_t, _x: &[f64], _y, z: &[f64]| z[0]),
            Arc::new(|_t, _x: &[f64], y| -y),
            0.5,
            0.0,
            -1.0,
            1.0,
            1.5,
        )
        .unwrap();
        let rep = check_assumptions(&d, 4000, 3, &CheckOptions::default()).unwrap();
        let c = rep.clause(Clause::ZLipschitz);
        assert!(!c.pass);
        // Box radius 10 gives |z - z'| up to 20; sampling should get close.
        assert!(c.worst_violation > 0.5 * 15.0 && c.worst_violation <= 0.5 * 20.0 + 1e-9,
            "worst violation {}", c.worst_violation);
        assert!(rep.clause(Clause::FMonotone).pass);
    }

    #[test]
    fn cubic_decay_is_monotone_with_mu_zero() {
        let d = DriverSpec::new(
            1,
            Arc::new(|_t, _x: &[f64], y, _z: &[f64]| -y * y * y),
            Arc::new(|_t, _x: &[f64], y| -y),
            0.0,
            0.0,
            -1.0,
            1000.0,
            1.5,
        )
        .unwrap();
        let rep = check_assumptions(&d, 4000, 5, &CheckOptions::default()).unwrap();
        assert!(rep.clause(Clause::FMonotone).pass);

        // Independent brute-force sign check of the same clause.
        let mut rng = util::path_rng(99, 0);
        for _ in 0..4000 {
            let y: f64 = rng.random_range(-10.0..10.0);
            let y2: f64 = rng.random_range(-10.0..10.0);
            assert!((y - y2) * (-(y * y * y) + y2 * y2 * y2) <= 0.0);
        }
    }

    #[test]
    fn report_is_deterministic_in_seed() {
        let d = linear_driver(-0.3, 0.7, 0.1);
        let a = check_assumptions(&d, 500, 77, &CheckOptions::default()).unwrap();
        let b = check_assumptions(&d, 500, 77, &CheckOptions::default()).unwrap();
        for (x, y) in a.clauses.iter().zip(&b.clauses) {
            assert_eq!(x.pass, y.pass);
            assert_eq!(x.worst_violation.to_bits(), y.worst_violation.to_bits());
        }
    }

    #[test]
    fn non_finite_driver_is_reported() {
        let d = DriverSpec::new(
            1,
            Arc::new(|_t, _x: &[f64], y, _z: &[f64]| 1.0 / (y - y)),
            Arc::new(|_t, _x: &[f64], y| -y),
            0.0,
            0.0,
            -1.0,
            1.0,
            1.5,
        )
        .unwrap();
        assert!(matches!(
            check_assumptions(&d, 10, 1, &CheckOptions::default()),
            Err(ModelError::NonFiniteValue(_))
        ));
    }

    #[test]
    fn builtin_domains_have_unit_normals_near_boundary() {
        half_line_domain().validate_normal_band(5000, 5.0, 0.05, 1).unwrap();
        interval_domain(1.0).unwrap().validate_normal_band(5000, 1.5, 0.02, 1).unwrap();
        ball_domain(2.0, vec![0.0, 0.0]).unwrap().validate_normal_band(5000, 3.0, 0.05, 1).unwrap();
        free_domain(1).validate_normal_band(5000, 5.0, 0.05, 1).unwrap();
    }

    #[test]
    fn half_line_geometry() {
        let d = half_line_domain();
        assert_eq!((d.psi)(&[2.0]), 2.0);
        assert_eq!((d.psi)(&[0.0]), 0.0);
        assert_eq!((d.inward_normal)(&[0.0]), vec![1.0]);
    }

    #[test]
    fn interval_psi_vanishes_linearly_at_both_faces() {
        let d = interval_domain(2.0).unwrap();
        assert_eq!((d.psi)(&[0.0]), 0.0);
        assert_eq!((d.psi)(&[2.0]), 0.0);
        let h = 1e-7;
        assert!(((d.psi)(&[h]) / h - 1.0).abs() < 1e-6);
        assert!(((d.psi)(&[2.0 - h]) / h - 1.0).abs() < 1e-6);
        assert_eq!((d.inward_normal)(&[0.1]), vec![1.0]);
        assert_eq!((d.inward_normal)(&[1.9]), vec![-1.0]);
    }

    #[test]
    fn mu_reduction_produces_monotone_driver() {
        // f = +0.4 y fails monotonicity at mu' = 0; the reduced driver passes.
        let d = linear_driver(0.4, 0.0, 0.0);
        let obs = ObstacleSpec::none_with_terminal(Arc::new(|_x: &[f64]| 1.0));
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let (dbar, obar, red) = reduce_to_nonpositive_mu(&d, &obs, &grid).unwrap();
        assert_eq!(dbar.mu, 0.0);
        assert!((red.unmap(1.0) - (-0.4f64).exp()).abs() < 1e-15);
        // A pure mu-part driver reduces to zero identically.
        assert!(dbar.eval_f(0.5, &[0.0], 2.0, &[0.0]).abs() < 1e-12);
        // Data is scaled up so that unmapping recovers the original values.
        assert!((obar.terminal_value(&[0.0], 0) - 0.4f64.exp()).abs() < 1e-12);
        let rep = check_assumptions(&dbar, 3000, 9, &CheckOptions::default()).unwrap();
        assert!(rep.clause(Clause::FMonotone).pass, "{rep:?}");
    }
}
