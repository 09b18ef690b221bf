//! Constructive approximation machinery: the maps that turn a continuous,
//! monotone driver with possibly unbounded data into a ladder of Lipschitz,
//! bounded subproblems indexed by `n`.
//!
//! * [`truncate_q`]: radial truncation `q_n(z) = z n / (|z| v n)`.
//! * [`cutoff_theta`]: C^1 plateau cutoff, identically 1 on `[-r, r]` and 0
//!   outside `(-r-1, r+1)`.
//! * [`pi_r`]: local oscillation bound `sup_{|y| <= r} |f(t,y,0) - f(t,0,0)|`
//!   evaluated on a finite y-grid.
//! * [`build_h_n`] / [`build_f_n_step1`]: damped drivers
//!   `theta_r(y) (f(t,y,q_n(z)) - f0_t) n / (pi_{r+1}(t) v n) + f0_t`
//!   (with and without the cutoff factor).
//! * [`truncate_data_step2`]: truncation of terminal data, driver baselines
//!   and barrier at level `n`, with repair of any terminal dominance break.
//! * [`InfConvApproximant`]: Lipschitz envelope
//!   `f_n(x) = min_y { f(y) + n |x - y| }` over a finite candidate grid.

use std::sync::Arc;

use thiserror::Error;

use crate::models::{Barrier, DriverFn, DriverSpec, FluxFn, ObstacleSpec, Terminal};
use crate::util;

#[derive(Error, Debug)]
pub enum ApproxError {
    #[error("candidate grid is empty")]
    EmptyGrid,
    #[error("base function grows with constant ~{estimated:.3} on the grid hull, above the index {index}; the envelope would be meaningless")]
    GrowthExceedsIndex { estimated: f64, index: u32 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Truncation level `n` paired with the plateau radius `r` used by the
/// driver regularization stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncationIndex {
    pub n: u32,
    pub r: f64,
}

impl TruncationIndex {
    pub fn new(n: u32, r: f64) -> Result<Self, ApproxError> {
        if n == 0 {
            return Err(ApproxError::InvalidParameter("index n must be >= 1".into()));
        }
        if !(r > 0.0) || !r.is_finite() {
            return Err(ApproxError::InvalidParameter(format!("radius must be positive, got {r}")));
        }
        Ok(TruncationIndex { n, r })
    }
}

/// Scalar radial truncation: clamps to `[-n, n]`, identity inside.
#[inline]
pub fn truncate_q_scalar(v: f64, n: f64) -> f64 {
    // v * n / (|v| v n) equals clamp(v, -n, n) exactly for the scalar case.
    v.clamp(-n, n)
}

/// Radial truncation `q_n(z) = z n / (|z| v n)`: identity on the ball of
/// radius `n`, radial projection onto it outside.
pub fn truncate_q(z: &[f64], n: f64) -> Vec<f64> {
    let norm = util::norm2(z);
    if norm <= n {
        return z.to_vec();
    }
    let s = n / norm;
    z.iter().map(|v| v * s).collect()
}

/// C^1 plateau cutoff: 1 on `[-r, r]`, 0 outside `(-r-1, r+1)`, cubic
/// smoothstep `s(u) = 1 - 3u^2 + 2u^3` across the unit transition band.
#[inline]
pub fn cutoff_theta(y: f64, r: f64) -> f64 {
    let a = y.abs();
    if a <= r {
        1.0
    } else if a >= r + 1.0 {
        0.0
    } else {
        let u = a - r;
        1.0 - 3.0 * u * u + 2.0 * u * u * u
    }
}

/// Uniform y-grid with 1001 nodes on `[-r, r]` (contains 0 and both ends).
pub fn default_y_grid(r: f64) -> Vec<f64> {
    let m = 500i64;
    (-m..=m).map(|k| r * k as f64 / m as f64).collect()
}

/// Local oscillation of `f` in `y` at `(t, x)`:
/// `max over y_grid of |f(t, x, y, 0) - f(t, x, 0, 0)|`.
///
/// The grid should lie in `[-r, r]` and contain 0; [`default_y_grid`]
/// provides the standard choice. Nondecreasing in `r` when grids are nested.
pub fn pi_r(driver: &DriverSpec, t: f64, x: &[f64], y_grid: &[f64]) -> f64 {
    let zero_z = vec![0.0; driver.dim];
    let base = driver.f0(t, x, &zero_z);
    let mut m = 0.0f64;
    for &y in y_grid {
        m = m.max((driver.eval_f(t, x, y, &zero_z) - base).abs());
    }
    m
}

/// Precomputed oscillation bound along a time grid, for state-independent
/// drivers. Linear interpolation between nodes.
#[derive(Clone, Debug)]
pub struct PiProfile {
    ts: Vec<f64>,
    vals: Vec<f64>,
}

impl PiProfile {
    pub fn build(driver: &DriverSpec, r: f64, ts: &[f64]) -> Self {
        let grid = default_y_grid(r);
        let x0 = vec![0.0; driver.dim];
        let vals = ts.iter().map(|&t| pi_r(driver, t, &x0, &grid)).collect();
        PiProfile { ts: ts.to_vec(), vals }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.ts.len();
        if n == 1 || t <= self.ts[0] {
            return self.vals[0];
        }
        if t >= self.ts[n - 1] {
            return self.vals[n - 1];
        }
        let j = match self.ts.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(j) => return self.vals[j],
            Err(j) => j,
        };
        let (t0, t1) = (self.ts[j - 1], self.ts[j]);
        let w = (t - t0) / (t1 - t0);
        self.vals[j - 1] * (1.0 - w) + self.vals[j] * w
    }
}

#[derive(Clone)]
enum PiEval {
    /// Evaluate the oscillation bound on the standard grid at every call.
    OnTheFly { r_plus_1: f64 },
    /// Interpolate a precomputed profile (state-independent drivers).
    Table(Arc<PiProfile>),
}

impl PiEval {
    fn eval(&self, driver: &DriverSpec, t: f64, x: &[f64]) -> f64 {
        match self {
            PiEval::OnTheFly { r_plus_1 } => {
                let grid = default_y_grid(*r_plus_1);
                pi_r(driver, t, x, &grid)
            }
            PiEval::Table(p) => p.eval(t),
        }
    }
}

fn damped_driver(driver: &DriverSpec, n: u32, r: f64, with_cutoff: bool, pi: PiEval) -> DriverSpec {
    let inner = driver.clone();
    let nf = n as f64;
    let f: DriverFn = Arc::new(move |t, x, y, z| {
        let zero_z = vec![0.0; inner.dim];
        let base = inner.f0(t, x, &zero_z);
        let scale = nf / pi.eval(&inner, t, x).max(nf);
        let cut = if with_cutoff { cutoff_theta(y, r) } else { 1.0 };
        if cut == 0.0 {
            return base;
        }
        let zn = util::norm2(z);
        let fv = if zn <= nf {
            inner.eval_f(t, x, y, z)
        } else {
            let s = nf / zn;
            let zt: Vec<f64> = z.iter().map(|v| v * s).collect();
            inner.eval_f(t, x, y, &zt)
        };
        cut * (fv - base) * scale + base
    });
    let mut out = DriverSpec {
        f,
        g: driver.g.clone(),
        lambda: driver.lambda,
        mu: if with_cutoff { 0.0 } else { driver.mu.min(0.0) },
        beta: driver.beta,
        big_m: driver.big_m,
        p: driver.p,
        dim: driver.dim,
        state_independent: driver.state_independent,
        lip_y: None,
    };
    let lip = estimate_y_lipschitz(&out, r + 2.0, 2000, 0x6c6970);
    out.lip_y = Some(lip);
    if with_cutoff {
        // The cutoff breaks one-sided monotonicity; a Lipschitz bound is the
        // honest replacement constant.
        out.mu = lip;
    }
    out
}

/// Sampled global y-Lipschitz estimate of `f` over `|y| <= radius`.
pub fn estimate_y_lipschitz(driver: &DriverSpec, radius: f64, samples: usize, seed: u64) -> f64 {
    use rand::Rng;
    let mut rng = util::path_rng(seed, 1);
    let zero_z = vec![0.0; driver.dim];
    let mut x = vec![0.0; driver.dim];
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let t: f64 = rng.random_range(0.0..1.0);
        if !driver.state_independent {
            for e in &mut x {
                *e = rng.random_range(-radius..radius);
            }
        }
        let y1: f64 = rng.random_range(-radius..radius);
        let y2: f64 = rng.random_range(-radius..radius);
        if (y1 - y2).abs() < 1e-9 {
            continue;
        }
        let a = driver.eval_f(t, &x, y1, &zero_z);
        let b = driver.eval_f(t, &x, y2, &zero_z);
        worst = worst.max(((a - b) / (y1 - y2)).abs());
    }
    worst
}

/// Damped driver with the plateau cutoff:
/// `h_n(t,y,z) = theta_r(y) (f(t,y,q_n(z)) - f0_t) n/(pi_{r+1}(t) v n) + f0_t`.
///
/// Globally Lipschitz in `(y, z)`; the sampled y-Lipschitz estimate is
/// recorded in `lip_y` on the returned spec. `g` is passed through.
pub fn build_h_n(driver: &DriverSpec, n: u32, r: f64) -> DriverSpec {
    damped_driver(driver, n, r, true, PiEval::OnTheFly { r_plus_1: r + 1.0 })
}

/// Damped driver without the cutoff factor:
/// `f_n(t,y,z) = (f(t,y,q_n(z)) - f0_t) n/(pi_{r+1}(t) v n) + f0_t`.
///
/// Keeps one-sided monotonicity with constant 0 whenever the input has
/// `mu <= 0` (positive scaling preserves the sign of the increment).
pub fn build_f_n_step1(driver: &DriverSpec, n: u32, r: f64) -> DriverSpec {
    damped_driver(driver, n, r, false, PiEval::OnTheFly { r_plus_1: r + 1.0 })
}

/// As [`build_f_n_step1`] but with a precomputed oscillation profile, so the
/// composed driver does not rescan the y-grid at every call.
pub fn build_f_n_step1_with_profile(
    driver: &DriverSpec,
    n: u32,
    r: f64,
    profile: Arc<PiProfile>,
) -> DriverSpec {
    damped_driver(driver, n, r, false, PiEval::Table(profile))
}

/// Output of the data truncation stage.
pub struct Step2Data {
    pub xi_n: Vec<f64>,
    pub driver_n: DriverSpec,
    /// Truncated barrier paths (`None` when the input had no barrier).
    pub barrier_n: Option<Vec<f64>>,
    /// Number of paths where the truncated terminal value had to be lifted to
    /// the truncated terminal barrier to restore dominance.
    pub repaired: usize,
}

/// Truncates the data of a problem at level `n`:
///
/// * terminal values `xi -> q_n(xi)` per path,
/// * driver baselines `f -> f - f0_t + q_n(f0_t)`, `g -> g - g0_t + q_n(g0_t)`,
/// * barrier `S -> q_n(S)` per path and node.
///
/// Scalar truncation is monotone, so consistent inputs (`S_T <= xi`) stay
/// consistent; if the inputs were inconsistent the terminal value is lifted
/// to `q_n(S_T)` and the path is counted in `repaired`.
pub fn truncate_data_step2(
    xi: &[f64],
    driver: &DriverSpec,
    barrier: Option<&[f64]>,
    nodes: usize,
    n: u32,
) -> Result<Step2Data, ApproxError> {
    if n == 0 {
        return Err(ApproxError::InvalidParameter("index n must be >= 1".into()));
    }
    let nf = n as f64;
    let mut xi_n: Vec<f64> = xi.iter().map(|&v| truncate_q_scalar(v, nf)).collect();
    let barrier_n: Option<Vec<f64>> = barrier.map(|s| s.iter().map(|&v| truncate_q_scalar(v, nf)).collect());
    let mut repaired = 0usize;
    if let Some(sn) = &barrier_n {
        if nodes == 0 || sn.len() % nodes != 0 || sn.len() / nodes != xi.len() {
            return Err(ApproxError::DimensionMismatch(format!(
                "barrier has {} values, expected {} paths x {} nodes",
                sn.len(),
                xi.len(),
                nodes
            )));
        }
        for (p, x) in xi_n.iter_mut().enumerate() {
            let s_t = sn[p * nodes + nodes - 1];
            if s_t > *x {
                *x = s_t;
                repaired += 1;
            }
        }
    }
    Ok(Step2Data { xi_n, driver_n: truncate_driver_baselines(driver, n), barrier_n, repaired })
}

/// Driver part of the data truncation stage:
/// `f_n = f - f0_t + q_n(f0_t)`, `g_n = g - g0_t + q_n(g0_t)`.
/// Increments in `y` and `z` are untouched, so the Lipschitz and
/// monotonicity constants carry over.
pub fn truncate_driver_baselines(driver: &DriverSpec, n: u32) -> DriverSpec {
    let nf = n as f64;
    let inner_f = driver.f.clone();
    let inner_g = driver.g.clone();
    let dim = driver.dim;
    let f: DriverFn = Arc::new(move |t, x, y, z| {
        let zero_z = vec![0.0; dim];
        let base = inner_f(t, x, 0.0, &zero_z);
        inner_f(t, x, y, z) - base + truncate_q_scalar(base, nf)
    });
    let g: FluxFn = Arc::new(move |t, x, y| {
        let base = inner_g(t, x, 0.0);
        inner_g(t, x, y) - base + truncate_q_scalar(base, nf)
    });
    DriverSpec {
        f,
        g,
        lambda: driver.lambda,
        mu: driver.mu,
        beta: driver.beta,
        big_m: driver.big_m,
        p: driver.p,
        dim: driver.dim,
        state_independent: driver.state_independent,
        lip_y: driver.lip_y,
    }
}

/// Barrier/terminal truncation at the obstacle level (closure form).
/// Absent barriers stay absent: the truncation acts on real-valued data and
/// "no obstacle" is below every level we could clamp to.
pub fn truncate_obstacle(obstacle: &ObstacleSpec, n: u32) -> ObstacleSpec {
    let nf = n as f64;
    let barrier = match &obstacle.barrier {
        Barrier::Absent => Barrier::Absent,
        Barrier::Markovian(h) => {
            let h = h.clone();
            Barrier::Markovian(Arc::new(move |t: f64, x: &[f64]| truncate_q_scalar(h(t, x), nf)))
        }
        Barrier::Explicit { values, paths, nodes } => Barrier::Explicit {
            values: Arc::new(values.iter().map(|&v| truncate_q_scalar(v, nf)).collect()),
            paths: *paths,
            nodes: *nodes,
        },
    };
    let terminal = match &obstacle.terminal {
        Terminal::Markovian(l) => {
            let l = l.clone();
            Terminal::Markovian(Arc::new(move |x: &[f64]| truncate_q_scalar(l(x), nf)))
        }
        Terminal::Explicit(xi) => {
            Terminal::Explicit(Arc::new(xi.iter().map(|&v| truncate_q_scalar(v, nf)).collect()))
        }
    };
    ObstacleSpec { barrier, terminal }
}

/// Finite candidate set for the Lipschitz envelope. Flattened row-major
/// points of dimension `dim`.
#[derive(Clone, Debug)]
pub struct CandidateGrid {
    pub points: Vec<f64>,
    pub dim: usize,
    pub spacing: f64,
}

impl CandidateGrid {
    /// Symmetric uniform 1D grid covering `[-radius, radius]` with the given
    /// spacing; always contains 0 and points at or beyond both ends.
    pub fn uniform_1d(radius: f64, spacing: f64) -> Result<Self, ApproxError> {
        if !(radius > 0.0) || !(spacing > 0.0) {
            return Err(ApproxError::InvalidParameter(
                "radius and spacing must be positive".into(),
            ));
        }
        let m = (radius / spacing).ceil() as i64;
        let points = (-m..=m).map(|k| k as f64 * spacing).collect();
        Ok(CandidateGrid { points, dim: 1, spacing })
    }

    /// Tensor grid in `dim` dimensions (use a coarse spacing; the point count
    /// grows geometrically).
    pub fn tensor(radius: f64, spacing: f64, dim: usize) -> Result<Self, ApproxError> {
        if dim == 0 {
            return Err(ApproxError::InvalidParameter("dim must be >= 1".into()));
        }
        let axis = Self::uniform_1d(radius, spacing)?.points;
        let k = axis.len();
        let total = k.checked_pow(dim as u32).ok_or_else(|| {
            ApproxError::InvalidParameter("tensor grid too large".into())
        })?;
        if total > 20_000_000 {
            return Err(ApproxError::InvalidParameter(format!(
                "tensor grid would have {total} points; coarsen the spacing"
            )));
        }
        let mut points = Vec::with_capacity(total * dim);
        let mut idx = vec![0usize; dim];
        loop {
            for d in 0..dim {
                points.push(axis[idx[d]]);
            }
            let mut d = 0;
            loop {
                idx[d] += 1;
                if idx[d] < k {
                    break;
                }
                idx[d] = 0;
                d += 1;
                if d == dim {
                    return Ok(CandidateGrid { points, dim, spacing });
                }
            }
        }
    }

    /// Default 1D grid for arguments up to `x_max_abs` in magnitude:
    /// radius `4 (1 + x_max_abs)`, spacing 1e-3.
    pub fn default_1d(x_max_abs: f64) -> Result<Self, ApproxError> {
        Self::uniform_1d(4.0 * (1.0 + x_max_abs.abs()), 1e-3)
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 { 0 } else { self.points.len() / self.dim }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Lipschitz envelope `f_n(x) = min over grid y of { f(y) + n |x - y| }`.
///
/// Exactly n-Lipschitz, nondecreasing in `n` on a fixed grid, and below the
/// base at grid points; off-grid arguments carry an extra slack of at most
/// `n * spacing` from the discretization of the candidate set.
pub struct InfConvApproximant {
    pub n: u32,
    grid: CandidateGrid,
    base_at_grid: Vec<f64>,
}

impl InfConvApproximant {
    pub fn new<F>(base: F, n: u32, grid: CandidateGrid) -> Result<Self, ApproxError>
    where
        F: Fn(&[f64]) -> f64,
    {
        if n == 0 {
            return Err(ApproxError::InvalidParameter("index n must be >= 1".into()));
        }
        if grid.is_empty() {
            return Err(ApproxError::EmptyGrid);
        }
        let count = grid.len();
        let mut base_at_grid = Vec::with_capacity(count);
        let mut growth = 0.0f64;
        for j in 0..count {
            let y = &grid.points[j * grid.dim..(j + 1) * grid.dim];
            let v = base(y);
            if !v.is_finite() {
                return Err(ApproxError::InvalidParameter(format!(
                    "base is non-finite at {y:?}"
                )));
            }
            growth = growth.max(v.abs() / (1.0 + util::norm2(y)));
            base_at_grid.push(v);
        }
        if growth > n as f64 {
            return Err(ApproxError::GrowthExceedsIndex { estimated: growth, index: n });
        }
        Ok(InfConvApproximant { n, grid, base_at_grid })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.grid.dim, "argument dimension");
        let nf = self.n as f64;
        let d = self.grid.dim;
        let mut best = f64::INFINITY;
        if d == 1 {
            let xv = x[0];
            for (j, &fv) in self.base_at_grid.iter().enumerate() {
                let cand = fv + nf * (xv - self.grid.points[j]).abs();
                if cand < best {
                    best = cand;
                }
            }
        } else {
            for (j, &fv) in self.base_at_grid.iter().enumerate() {
                let y = &self.grid.points[j * d..(j + 1) * d];
                let dist: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                let cand = fv + nf * dist;
                if cand < best {
                    best = cand;
                }
            }
        }
        best
    }

    pub fn eval1(&self, x: f64) -> f64 {
        self.eval(&[x])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::DriverSpec;
    use proptest::prelude::*;

    fn driver_from_f(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> DriverSpec {
        DriverSpec::new(
            1,
            Arc::new(move |t, _x: &[f64], y, _z: &[f64]| f(t, y)),
            Arc::new(|_t, _x: &[f64], _y| 0.0),
            0.0,
            0.0,
            -1.0,
            1000.0,
            1.5,
        )
        .unwrap()
        .with_state_independent(true)
    }

    #[test]
    fn radial_truncation_matches_hand_values() {
        assert_eq!(truncate_q(&[4.0, 0.0], 3.0), vec![3.0, 0.0]);
        assert_eq!(truncate_q(&[3.0, 4.0], 5.0), vec![3.0, 4.0]);
        let v = truncate_q(&[3.0, 4.0], 2.0);
        assert!((v[0] - 1.2).abs() < 1e-15 && (v[1] - 1.6).abs() < 1e-15);
        assert_eq!(truncate_q_scalar(-10.0, 2.0), -2.0);
        assert_eq!(truncate_q_scalar(0.5, 1.0), 0.5);
    }

    proptest! {
        // |q_n(z) - q_n(z')| <= 2 |z - z'| in any dimension, <= |z - z'| in 1D.
        #[test]
        fn truncation_is_nonexpansive(
            z1 in prop::collection::vec(-50.0f64..50.0, 1..4),
            mut z2 in prop::collection::vec(-50.0f64..50.0, 1..4),
            n in 1.0f64..20.0,
        ) {
            z2.truncate(z1.len());
            while z2.len() < z1.len() { z2.push(0.0); }
            let a = truncate_q(&z1, n);
            let b = truncate_q(&z2, n);
            let dq: f64 = a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
            let dz: f64 = z1.iter().zip(&z2).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
            prop_assert!(dq <= 2.0 * dz + 1e-12);
            if z1.len() == 1 {
                prop_assert!(dq <= dz + 1e-12);
            }
        }

        #[test]
        fn cutoff_is_bounded_and_monotone_outward(y in -20.0f64..20.0, r in 0.1f64..8.0) {
            let v = cutoff_theta(y, r);
            prop_assert!((0.0..=1.0).contains(&v));
            let further = cutoff_theta(y.abs() + 0.1, r);
            prop_assert!(further <= v + 1e-12);
        }
    }

    #[test]
    fn cutoff_plateaus_are_exact() {
        assert_eq!(cutoff_theta(1.99, 2.0), 1.0);
        assert_eq!(cutoff_theta(-2.0, 2.0), 1.0);
        assert_eq!(cutoff_theta(3.0, 2.0), 0.0);
        assert_eq!(cutoff_theta(-3.5, 2.0), 0.0);
        assert_eq!(cutoff_theta(2.5, 2.0), 0.5);
    }

    #[test]
    fn cutoff_is_c1_at_band_edges() {
        // Central differences of theta near |y| = r and |y| = r + 1 vanish.
        let r = 1.5;
        let h = 1e-6;
        for edge in [r, r + 1.0] {
            let d = (cutoff_theta(edge + h, r) - cutoff_theta(edge - h, r)) / (2.0 * h);
            assert!(d.abs() < 5e-6, "derivative {d} at edge {edge}");
        }
    }

    #[test]
    fn oscillation_bound_linear_and_cubic() {
        let lin = driver_from_f(|_t, y| 3.0 * y);
        let grid = default_y_grid(2.0);
        assert!((pi_r(&lin, 0.0, &[0.0], &grid) - 6.0).abs() < 1e-12);

        let cubic = driver_from_f(|_t, y| -y * y * y);
        let grid2 = default_y_grid(2.0);
        assert!((pi_r(&cubic, 0.0, &[0.0], &grid2) - 8.0).abs() < 1e-12);

        let constant = driver_from_f(|t, _y| t.cos());
        assert_eq!(pi_r(&constant, 0.3, &[0.0], &grid), 0.0);
    }

    #[test]
    fn oscillation_bound_nondecreasing_in_radius() {
        let d = driver_from_f(|_t, y| y.powi(5) - y);
        let mut prev = 0.0;
        for r in [0.5, 1.0, 2.0, 4.0] {
            let v = pi_r(&d, 0.0, &[0.0], &default_y_grid(r));
            assert!(v >= prev - 1e-12);
            prev = v;
        }
    }

    #[test]
    fn damped_cubic_driver_hand_value() {
        // f = -y^3, r = 1, n = 1: pi_2 = 8, so at y = 0.5 (inside the plateau)
        // h_1 = (-0.125) * 1/8 = -0.015625, and f_1 takes the same value.
        let cubic = driver_from_f(|_t, y| -y * y * y);
        let h = build_h_n(&cubic, 1, 1.0);
        let f1 = build_f_n_step1(&cubic, 1, 1.0);
        let z = [0.0];
        assert!((h.eval_f(0.0, &[0.0], 0.5, &z) + 0.015625).abs() < 1e-12);
        assert!((f1.eval_f(0.0, &[0.0], 1.0, &z) + 0.125).abs() < 1e-12);
    }

    #[test]
    fn damping_is_inactive_for_small_oscillation() {
        // f = z: no y-oscillation, so pi = 0 and the scale is n/n = 1;
        // h_n reproduces f inside the plateau.
        let d = DriverSpec::new(
            1,
            Arc::new(|_t, _x: &[f64], _y, z: &[f64]| z[0]),
            Arc::new(|_t, _x: &[f64], _y| 0.0),
            1.0,
            0.0,
            -1.0,
            1.0,
            1.5,
        )
        .unwrap()
        .with_state_independent(true);
        let h = build_h_n(&d, 3, 2.0);
        assert!((h.eval_f(0.2, &[0.0], 1.0, &[0.7]) - 0.7).abs() < 1e-12);
        // Beyond the truncation radius z is projected back to n.
        assert!((h.eval_f(0.2, &[0.0], 1.0, &[5.0]) - 3.0).abs() < 1e-12);
        // And a y-independent driver with no baseline passes through f entirely.
        let f1 = build_f_n_step1(&d, 3, 2.0);
        assert!((f1.eval_f(0.2, &[0.0], -7.0, &[0.7]) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn cutoff_stage_vanishes_outside_support() {
        let cubic = driver_from_f(|_t, y| -y * y * y);
        let h = build_h_n(&cubic, 2, 1.0);
        // Outside |y| < r + 1 only the baseline survives (zero here).
        assert_eq!(h.eval_f(0.0, &[0.0], 2.5, &[0.0]), 0.0);
        assert!(h.lip_y.unwrap() > 0.0);
    }

    #[test]
    fn stage_one_keeps_monotonicity_for_nonincreasing_drivers() {
        let cubic = driver_from_f(|_t, y| -y * y * y);
        let f1 = build_f_n_step1(&cubic, 4, 1.5);
        assert_eq!(f1.mu, 0.0);
        let mut rng = crate::util::path_rng(3, 0);
        use rand::Rng;
        for _ in 0..2000 {
            let y1: f64 = rng.random_range(-5.0..5.0);
            let y2: f64 = rng.random_range(-5.0..5.0);
            let a = f1.eval_f(0.1, &[0.0], y1, &[0.0]);
            let b = f1.eval_f(0.1, &[0.0], y2, &[0.0]);
            assert!((y1 - y2) * (a - b) <= 1e-12);
        }
    }

    #[test]
    fn damped_driver_passes_sampled_checks_with_estimated_constants() {
        use crate::models::{check_assumptions, CheckOptions};
        let cubic = DriverSpec::new(
            1,
            Arc::new(|_t, _x: &[f64], y, z: &[f64]| -y * y * y + 0.5 * z[0]),
            Arc::new(|_t, _x: &[f64], y| -y),
            0.5,
            0.0,
            -1.0,
            1000.0,
            1.5,
        )
        .unwrap()
        .with_state_independent(true);
        let h = build_h_n(&cubic, 4, 1.5);
        // Existence of finite constants: inflate the sampled Lipschitz bound
        // and growth constant, then every clause must pass.
        let lip = h.lip_y.unwrap();
        let mut checked = h.clone();
        checked.mu = 1.05 * lip + 1e-6;
        checked.big_m = 1.05 * lip.max(checked.lambda) + 1.0;
        let rep = check_assumptions(&checked, 4000, 21, &CheckOptions::default()).unwrap();
        assert!(rep.all_pass(), "{rep:?}");
    }

    #[test]
    fn baseline_truncation_hand_values() {
        // f0 = 7: truncated baseline is q_3(7) = 3.
        let d = driver_from_f(|_t, _y| 7.0);
        let dn = truncate_driver_baselines(&d, 3);
        let zero = [0.0];
        assert_eq!(dn.f0(0.0, &[0.0], &zero), 3.0);
        // xi inside the ball is untouched.
        let out = truncate_data_step2(&[0.5, -0.25], &d, None, 1, 1).unwrap();
        assert_eq!(out.xi_n, vec![0.5, -0.25]);
        assert_eq!(out.repaired, 0);
    }

    #[test]
    fn deep_barrier_truncates_and_consistent_data_needs_no_repair() {
        let d = driver_from_f(|_t, _y| 0.0);
        // One path, two nodes, barrier at -10 truncated to -2.
        let out = truncate_data_step2(&[5.0], &d, Some(&[-10.0, -10.0]), 2, 2).unwrap();
        assert_eq!(out.barrier_n.unwrap(), vec![-2.0, -2.0]);
        assert_eq!(out.xi_n, vec![2.0]);
        assert_eq!(out.repaired, 0);
    }

    #[test]
    fn inconsistent_terminal_data_is_repaired_and_counted() {
        let d = driver_from_f(|_t, _y| 0.0);
        // Barrier terminal value 1.5 above xi = 1.0 (inconsistent input data).
        let out = truncate_data_step2(&[1.0], &d, Some(&[0.0, 1.5]), 2, 8).unwrap();
        assert_eq!(out.xi_n, vec![1.5]);
        assert_eq!(out.repaired, 1);
    }

    #[test]
    fn truncation_preserves_terminal_dominance() {
        // Monotonicity of the scalar clamp: if S_T <= xi then q_n(S_T) <= q_n(xi),
        // across signs and magnitudes.
        let d = driver_from_f(|_t, _y| 0.0);
        let xi = [3.0, -0.5, 12.0, -12.0];
        let s: Vec<f64> = xi.iter().map(|v| v - 0.25).collect();
        for n in [1u32, 2, 4, 20] {
            let out = truncate_data_step2(&xi, &d, Some(&s), 1, n).unwrap();
            assert_eq!(out.repaired, 0, "n = {n}");
        }
    }

    #[test]
    fn envelope_of_square_matches_analytic_form() {
        // min_y { y^2 + n|x-y| } = x^2 for |x| <= n/2, n|x| - n^2/4 beyond.
        // Radius 4.5 keeps the growth estimate 4.5^2 / 5.5 under the index.
        let grid = CandidateGrid::uniform_1d(4.5, 1e-3).unwrap();
        let f = InfConvApproximant::new(|y: &[f64]| y[0] * y[0], 4, grid).unwrap();
        let slack = 4.0 * 1e-3;
        for &x in &[-1.9f64, -0.5, 0.0, 1.0, 1.99] {
            assert!((f.eval1(x) - x * x).abs() <= slack, "x = {x}");
        }
        for &x in &[-4.0f64, 2.5, 3.5] {
            let expect = 4.0 * x.abs() - 4.0;
            assert!((f.eval1(x) - expect).abs() <= slack, "x = {x}");
        }
    }

    #[test]
    fn envelope_is_exactly_n_lipschitz_and_below_base_on_grid() {
        let grid = CandidateGrid::uniform_1d(6.0, 1e-2).unwrap();
        // Growth of this base peaks near 3.63 at the first sine crest, so the
        // smallest admissible integer index is 4.
        let n = 4u32;
        let f = InfConvApproximant::new(|y: &[f64]| (3.0 * y[0]).sin() * 5.0 + y[0].abs(), n, grid.clone()).unwrap();
        let xs: Vec<f64> = (-60..=60).map(|k| k as f64 * 0.1).collect();
        for (i, &a) in xs.iter().enumerate() {
            for &b in xs.iter().skip(i + 1) {
                let diff = (f.eval1(a) - f.eval1(b)).abs();
                assert!(diff <= n as f64 * (a - b).abs() + 1e-10);
            }
        }
        for j in 0..grid.len() {
            let y = grid.points[j];
            assert!(f.eval1(y) <= (3.0 * y).sin() * 5.0 + y.abs() + 1e-12);
        }
    }

    #[test]
    fn envelope_is_nondecreasing_in_index_on_fixed_grid() {
        // Radius 2.5 keeps the square's growth estimate under the smallest
        // index used below; monotonicity in n needs the grid held fixed.
        let grid = CandidateGrid::uniform_1d(2.5, 1e-2).unwrap();
        let base = |y: &[f64]| y[0] * y[0];
        let f2 = InfConvApproximant::new(base, 2, grid.clone()).unwrap();
        let f4 = InfConvApproximant::new(base, 4, grid.clone()).unwrap();
        let f9 = InfConvApproximant::new(base, 9, grid).unwrap();
        for k in -50..=50 {
            let x = k as f64 * 0.1;
            assert!(f2.eval1(x) <= f4.eval1(x) + 1e-12);
            assert!(f4.eval1(x) <= f9.eval1(x) + 1e-12);
        }
    }

    #[test]
    fn envelope_rejects_bad_input() {
        let empty = CandidateGrid { points: vec![], dim: 1, spacing: 1.0 };
        assert!(matches!(
            InfConvApproximant::new(|y: &[f64]| y[0], 1, empty),
            Err(ApproxError::EmptyGrid)
        ));
        // x^2 on a radius-4 hull has growth ~ 16/5 > 1.
        let grid = CandidateGrid::uniform_1d(4.0, 1e-2).unwrap();
        assert!(matches!(
            InfConvApproximant::new(|y: &[f64]| y[0] * y[0], 1, grid),
            Err(ApproxError::GrowthExceedsIndex { .. })
        ));
    }

    #[test]
    fn envelope_absolute_value_is_a_fixed_point() {
        let grid = CandidateGrid::uniform_1d(4.0, 1e-3).unwrap();
        let f = InfConvApproximant::new(|y: &[f64]| y[0].abs(), 2, grid).unwrap();
        for &x in &[-3.0f64, -0.7, 0.0, 1.3, 3.9] {
            assert!((f.eval1(x) - x.abs()).abs() <= 2.0 * 1e-3 + 1e-12);
        }
    }

    #[test]
    fn envelope_two_dimensional_smoke() {
        let grid = CandidateGrid::tensor(2.0, 0.05, 2).unwrap();
        let f = InfConvApproximant::new(|y: &[f64]| y[0] * y[0] + y[1] * y[1], 5, grid).unwrap();
        // Inside the exact region the envelope tracks the base.
        assert!((f.eval(&[0.5, -0.5]) - 0.5).abs() < 5.0 * 0.05 + 1e-12);
    }

    #[test]
    fn pi_profile_interpolates_between_nodes() {
        let d = driver_from_f(|t, y| t * y);
        let ts = [0.0, 0.5, 1.0];
        let prof = PiProfile::build(&d, 2.0, &ts);
        assert!((prof.eval(0.5) - 1.0).abs() < 1e-9);
        assert!((prof.eval(0.25) - 0.5).abs() < 1e-9);
        assert!((prof.eval(2.0) - 2.0).abs() < 1e-9);
    }
}
