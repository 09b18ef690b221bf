//! Forward state simulation: Euler schemes for a diffusion constrained to a
//! domain closure, together with the boundary local-time increments that
//! drive the flux term of the backward equation.
//!
//! Three reflection schemes are provided:
//!
//! * `Projection`: step freely, project back onto the closure, record the
//!   projection distance as the local-time increment.
//! * `SkorokhodExplicit`: half-line only; builds the free path and applies
//!   the running-minimum solution of the one-sided reflection problem.
//!   Coincides pathwise with `Projection` for constant coefficients.
//! * `Penalization { kappa }`: adds the restoring drift
//!   `kappa (proj(x) - x)` instead of a hard constraint; the state may leave
//!   the domain by `O(1/sqrt(kappa))`.
//!
//! Noise is a pure function of `(seed, path index)`: every path draws from
//! its own counter-derived stream, so results are independent of thread
//! count and batch splitting, and Brownian increments are regenerated from
//! the seed on deserialization instead of being stored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::models::{DomainKind, DomainSpec, TimeGrid};
use crate::util;

/// Coefficient callback writing the drift or diagonal diffusion at `(t, x)`
/// into `out` (length = state dimension).
pub type CoeffFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Constant-vector coefficient.
pub fn constant_coeff(v: Vec<f64>) -> CoeffFn {
    Arc::new(move |_t, _x, out| out.copy_from_slice(&v))
}

#[derive(Error, Debug)]
pub enum ForwardError {
    #[error("initial state lies outside the domain (psi = {psi:.3e})")]
    StartOutsideDomain { psi: f64 },
    #[error("scheme not supported here: {0}")]
    UnsupportedScheme(String),
    #[error("state diverged at path {path}, step {step}")]
    ProjectionDiverged { path: usize, step: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("penalty strength {kappa} is unstable for dt = {dt} (need kappa * dt <= 1)")]
    UnstablePenalty { kappa: f64, dt: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed bundle file: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ReflectionScheme {
    Projection,
    SkorokhodExplicit,
    Penalization { kappa: f64 },
}

impl ReflectionScheme {
    fn tag(&self) -> u8 {
        match self {
            ReflectionScheme::Projection => 0,
            ReflectionScheme::SkorokhodExplicit => 1,
            ReflectionScheme::Penalization { .. } => 2,
        }
    }

    fn kappa(&self) -> f64 {
        match self {
            ReflectionScheme::Penalization { kappa } => *kappa,
            _ => 0.0,
        }
    }

    fn from_parts(tag: u8, kappa: f64) -> Result<Self, ForwardError> {
        match tag {
            0 => Ok(ReflectionScheme::Projection),
            1 => Ok(ReflectionScheme::SkorokhodExplicit),
            2 => Ok(ReflectionScheme::Penalization { kappa }),
            other => Err(ForwardError::Format(format!("unknown scheme tag {other}"))),
        }
    }
}

/// Seed segments: paths `[start, start + count)` draw their noise from
/// `path_rng(seed, local index)`. A freshly simulated bundle has one
/// segment; concatenation appends more.
#[derive(Clone, Debug, PartialEq)]
struct SeedSegment {
    seed: u64,
    count: usize,
}

/// Simulated forward paths on a uniform grid.
///
/// Layout: `x[(p * nodes + i) * dim + d]` is coordinate `d` of path `p` at
/// node `i` (nodes = steps + 1); `dg[p * steps + i]` is the local-time
/// increment over `[t_i, t_{i+1}]`; `dw[(p * steps + i) * dim + d]` the
/// Brownian increment. `dw` lives in memory only.
#[derive(Debug)]
pub struct ForwardBundle {
    pub grid: TimeGrid,
    pub paths: usize,
    pub dim: usize,
    pub scheme: ReflectionScheme,
    pub x: Vec<f64>,
    pub dg: Vec<f64>,
    pub dw: Vec<f64>,
    segments: Vec<SeedSegment>,
}

const MAGIC: &[u8; 4] = b"RGBF";
const FORMAT_VERSION: u32 = 1;
const DIVERGENCE_BOUND: f64 = 1e9;

fn project(domain: &DomainSpec, x: &[f64], out: &mut [f64]) -> Result<(), ForwardError> {
    match domain.kind {
        DomainKind::Free => out.copy_from_slice(x),
        DomainKind::HalfLine => out[0] = x[0].max(0.0),
        DomainKind::Interval { length } => out[0] = x[0].clamp(0.0, length),
        DomainKind::Ball { radius } => {
            let r: f64 = util::norm2(x);
            if r <= radius {
                out.copy_from_slice(x);
            } else {
                let s = radius / r;
                for (o, v) in out.iter_mut().zip(x) {
                    *o = v * s;
                }
            }
        }
        DomainKind::Custom => {
            return Err(ForwardError::UnsupportedScheme(
                "projection onto a custom domain is not implemented".into(),
            ))
        }
    }
    Ok(())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
}

/// Simulates `paths` reflected trajectories started at `x0`.
///
/// `drift` and `diffusion` write the drift vector and the diagonal diffusion
/// coefficients; the driving Brownian motion has the state dimension.
pub fn simulate_reflected(
    domain: &DomainSpec,
    drift: &CoeffFn,
    diffusion: &CoeffFn,
    x0: &[f64],
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
    scheme: ReflectionScheme,
) -> Result<ForwardBundle, ForwardError> {
    let dim = domain.dim;
    if x0.len() != dim {
        return Err(ForwardError::DimensionMismatch(format!(
            "x0 has {} coordinates, domain has {}",
            x0.len(),
            dim
        )));
    }
    let psi0 = (domain.psi)(x0);
    if psi0 < -1e-12 {
        return Err(ForwardError::StartOutsideDomain { psi: psi0 });
    }
    match scheme {
        ReflectionScheme::SkorokhodExplicit => {
            if !matches!(domain.kind, DomainKind::HalfLine) || dim != 1 {
                return Err(ForwardError::UnsupportedScheme(
                    "explicit running-minimum reflection needs the half-line".into(),
                ));
            }
        }
        ReflectionScheme::Penalization { kappa } => {
            if !(kappa > 0.0) || !kappa.is_finite() {
                return Err(ForwardError::UnsupportedScheme(format!(
                    "penalty strength must be positive and finite, got {kappa}"
                )));
            }
            if kappa * grid.dt() > 1.0 {
                return Err(ForwardError::UnstablePenalty { kappa, dt: grid.dt() });
            }
            if matches!(domain.kind, DomainKind::Custom) {
                return Err(ForwardError::UnsupportedScheme(
                    "penalization needs a projectable domain".into(),
                ));
            }
        }
        ReflectionScheme::Projection => {}
    }

    let steps = grid.steps;
    let nodes = grid.nodes();
    let dt = grid.dt();
    let sq_dt = dt.sqrt();

    let mut x = vec![0.0f64; paths * nodes * dim];
    let mut dg = vec![0.0f64; paths * steps];
    let mut dw = vec![0.0f64; paths * steps * dim];

    let result: Result<Vec<()>, ForwardError> = x
        .par_chunks_mut(nodes * dim)
        .zip(dg.par_chunks_mut(steps))
        .zip(dw.par_chunks_mut(steps * dim))
        .enumerate()
        .map(|(p, ((xp, gp), wp))| {
            let mut rng = util::path_rng(seed, p as u64);
            for w in wp.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *w = n * sq_dt;
            }
            simulate_one_path(domain, drift, diffusion, x0, grid, scheme, xp, gp, wp)
                .map_err(|e| match e {
                    ForwardError::ProjectionDiverged { step, .. } => {
                        ForwardError::ProjectionDiverged { path: p, step }
                    }
                    other => other,
                })?;
            Ok(())
        })
        .collect();
    result?;

    Ok(ForwardBundle {
        grid: *grid,
        paths,
        dim,
        scheme,
        x,
        dg,
        dw,
        segments: vec![SeedSegment { seed, count: paths }],
    })
}

#[allow(clippy::too_many_arguments)]
fn simulate_one_path(
    domain: &DomainSpec,
    drift: &CoeffFn,
    diffusion: &CoeffFn,
    x0: &[f64],
    grid: &TimeGrid,
    scheme: ReflectionScheme,
    xp: &mut [f64],
    gp: &mut [f64],
    wp: &[f64],
) -> Result<(), ForwardError> {
    let dim = domain.dim;
    let steps = grid.steps;
    let dt = grid.dt();
    let mut b = vec![0.0f64; dim];
    let mut s = vec![0.0f64; dim];
    let mut free = vec![0.0f64; dim];
    let mut proj = vec![0.0f64; dim];
    xp[..dim].copy_from_slice(x0);

    match scheme {
        ReflectionScheme::SkorokhodExplicit => {
            // Free path with coefficients along the free state, reflected by
            // the running-minimum formula X_i = xi_i - min(0, min_{j<=i} xi_j).
            let mut xi = x0[0];
            let mut run_min = xi.min(0.0);
            let mut g_prev = -run_min;
            xp[0] = xi - run_min.min(0.0);
            for i in 0..steps {
                let t = grid.node(i);
                drift(t, std::slice::from_ref(&xi), &mut b);
                diffusion(t, std::slice::from_ref(&xi), &mut s);
                xi += b[0] * dt + s[0] * wp[i];
                if !xi.is_finite() || xi.abs() > DIVERGENCE_BOUND {
                    return Err(ForwardError::ProjectionDiverged { path: 0, step: i });
                }
                run_min = run_min.min(xi);
                let g = -run_min.min(0.0);
                xp[i + 1] = xi + g;
                gp[i] = g - g_prev;
                g_prev = g;
            }
        }
        ReflectionScheme::Projection => {
            for i in 0..steps {
                let t = grid.node(i);
                let (cur, rest) = xp.split_at_mut((i + 1) * dim);
                let cur = &cur[i * dim..];
                drift(t, cur, &mut b);
                diffusion(t, cur, &mut s);
                for d in 0..dim {
                    free[d] = cur[d] + b[d] * dt + s[d] * wp[i * dim + d];
                    if !free[d].is_finite() || free[d].abs() > DIVERGENCE_BOUND {
                        return Err(ForwardError::ProjectionDiverged { path: 0, step: i });
                    }
                }
                project(domain, &free, &mut proj)?;
                gp[i] = dist(&free, &proj);
                rest[..dim].copy_from_slice(&proj);
            }
        }
        ReflectionScheme::Penalization { kappa } => {
            for i in 0..steps {
                let t = grid.node(i);
                let (cur, rest) = xp.split_at_mut((i + 1) * dim);
                let cur = &cur[i * dim..];
                drift(t, cur, &mut b);
                diffusion(t, cur, &mut s);
                project(domain, cur, &mut proj)?;
                let mut pen_norm = 0.0f64;
                for d in 0..dim {
                    let pen = kappa * (proj[d] - cur[d]);
                    pen_norm += (proj[d] - cur[d]) * (proj[d] - cur[d]);
                    free[d] = cur[d] + (b[d] + pen) * dt + s[d] * wp[i * dim + d];
                    if !free[d].is_finite() || free[d].abs() > DIVERGENCE_BOUND {
                        return Err(ForwardError::ProjectionDiverged { path: 0, step: i });
                    }
                }
                gp[i] = kappa * pen_norm.sqrt() * dt;
                rest[..dim].copy_from_slice(&free);
            }
        }
    }
    Ok(())
}

impl ForwardBundle {
    #[inline]
    pub fn state(&self, path: usize, node: usize) -> &[f64] {
        let o = (path * self.grid.nodes() + node) * self.dim;
        &self.x[o..o + self.dim]
    }

    #[inline]
    pub fn dg_at(&self, path: usize, step: usize) -> f64 {
        self.dg[path * self.grid.steps + step]
    }

    #[inline]
    pub fn dw_at(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.grid.steps + step) * self.dim;
        &self.dw[o..o + self.dim]
    }

    /// Total boundary local time `G_T` of one path.
    pub fn local_time(&self, path: usize) -> f64 {
        let o = path * self.grid.steps;
        self.dg[o..o + self.grid.steps].iter().sum()
    }

    /// Monte Carlo mean of `G_T` across paths (deterministic reduction).
    pub fn expected_local_time(&self) -> f64 {
        let per_path: Vec<f64> = (0..self.paths).map(|p| self.local_time(p)).collect();
        util::det_mean(&per_path)
    }

    /// Stacks bundles path-wise. Grids, dimensions and schemes must agree;
    /// seed segments are carried over so noise stays regenerable.
    pub fn concat(bundles: Vec<ForwardBundle>) -> Result<ForwardBundle, ForwardError> {
        let mut it = bundles.into_iter();
        let mut acc = it.next().ok_or_else(|| ForwardError::Format("no bundles".into()))?;
        for b in it {
            if b.grid != acc.grid || b.dim != acc.dim || b.scheme != acc.scheme {
                return Err(ForwardError::DimensionMismatch(
                    "bundles differ in grid, dimension or scheme".into(),
                ));
            }
            acc.paths += b.paths;
            acc.x.extend_from_slice(&b.x);
            acc.dg.extend_from_slice(&b.dg);
            acc.dw.extend_from_slice(&b.dw);
            acc.segments.extend(b.segments);
        }
        Ok(acc)
    }

    /// Writes the bundle. States and local-time increments are stored as
    /// little-endian f64; Brownian increments are not stored (they are a
    /// pure function of the seed segments and are redrawn on load).
    ///
    /// Layout: magic `RGBF`, version u32, t_max f64, steps u64, paths u64,
    /// dim u64, scheme u8, kappa f64, segment count u64, per segment
    /// (seed u64, paths u64), then `x`, then `dg`.
    pub fn write_to(&self, path: &Path) -> Result<(), ForwardError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.grid.t_max.to_le_bytes())?;
        w.write_all(&(self.grid.steps as u64).to_le_bytes())?;
        w.write_all(&(self.paths as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&[self.scheme.tag()])?;
        w.write_all(&self.scheme.kappa().to_le_bytes())?;
        w.write_all(&(self.segments.len() as u64).to_le_bytes())?;
        for seg in &self.segments {
            w.write_all(&seg.seed.to_le_bytes())?;
            w.write_all(&(seg.count as u64).to_le_bytes())?;
        }
        for v in &self.x {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.dg {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<ForwardBundle, ForwardError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ForwardError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(ForwardError::Format(format!("unsupported version {version}")));
        }
        let t_max = read_f64(&mut r)?;
        let steps = read_u64(&mut r)? as usize;
        let paths = read_u64(&mut r)? as usize;
        let dim = read_u64(&mut r)? as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let kappa = read_f64(&mut r)?;
        let scheme = ReflectionScheme::from_parts(tag[0], kappa)?;
        let n_seg = read_u64(&mut r)? as usize;
        let mut segments = Vec::with_capacity(n_seg);
        let mut seg_total = 0usize;
        for _ in 0..n_seg {
            let seed = read_u64(&mut r)?;
            let count = read_u64(&mut r)? as usize;
            seg_total += count;
            segments.push(SeedSegment { seed, count });
        }
        if seg_total != paths {
            return Err(ForwardError::Format(format!(
                "segments cover {seg_total} paths, header says {paths}"
            )));
        }
        let grid = TimeGrid { t_max, steps };
        if grid.steps == 0 || !grid.t_max.is_finite() || grid.t_max <= 0.0 {
            return Err(ForwardError::Format("invalid grid header".into()));
        }
        let nodes = steps + 1;
        let x = read_f64_vec(&mut r, paths * nodes * dim)?;
        let dg = read_f64_vec(&mut r, paths * steps)?;

        // Redraw the noise exactly as simulate did: per path, per step, per
        // coordinate, standard normals scaled by sqrt(dt).
        let sq_dt = grid.dt().sqrt();
        let mut dw = vec![0.0f64; paths * steps * dim];
        let mut offset = 0usize;
        for seg in &segments {
            let rows = &mut dw[offset * steps * dim..(offset + seg.count) * steps * dim];
            rows.par_chunks_mut(steps * dim).enumerate().for_each(|(local, wp)| {
                let mut rng = util::path_rng(seg.seed, local as u64);
                for w in wp.iter_mut() {
                    let n: f64 = rng.sample(StandardNormal);
                    *w = n * sq_dt;
                }
            });
            offset += seg.count;
        }

        Ok(ForwardBundle { grid, paths, dim, scheme, x, dg, dw, segments })
    }
}

fn read_u32(r: &mut impl IoRead) -> Result<u32, ForwardError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl IoRead) -> Result<u64, ForwardError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl IoRead) -> Result<f64, ForwardError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_f64_vec(r: &mut impl IoRead, len: usize) -> Result<Vec<f64>, ForwardError> {
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
