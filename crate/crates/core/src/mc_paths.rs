//! Reproducible Brownian increment generation on uniform time grids.
//!
//! Every bundle is a pure function of `(seed, grid, d, m_paths)`: path `i`
//! draws from its own ChaCha stream keyed by the path index, so the result
//! is bit-identical no matter how many workers generate it, and generating
//! the first `m'` paths of a larger bundle equals generating an `m'`-path
//! bundle outright.

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Uniform grid on `[t0, t_end]` with `n_steps` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_end: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_end > t0) || n_steps == 0 || !t0.is_finite() || !t_end.is_finite() {
            return Err(Error::GridMismatch {
                context: format!("bad grid: t0={t0}, t_end={t_end}, n_steps={n_steps}"),
            });
        }
        Ok(TimeGrid { t0, t_end, n_steps })
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.n_steps as f64
    }

    /// Node `t_k`. The final node is pinned to `t_end` so that `t0 + n*dt`
    /// rounding can never shift the horizon.
    pub fn node(&self, k: usize) -> f64 {
        if k >= self.n_steps {
            self.t_end
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    /// Index of `t` among the nodes, if `t` sits on one (1e-12 absolute).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let pos = (t - self.t0) / self.dt();
        let k = pos.round();
        if k < 0.0 || k > self.n_steps as f64 {
            return None;
        }
        let k = k as usize;
        if (self.node(k) - t).abs() <= 1e-12 {
            Some(k)
        } else {
            None
        }
    }
}

/// Default cap on `m_paths * n_steps * d` (about 2 GiB of f64).
pub const DEFAULT_ELEMENT_CAP: usize = 1 << 28;

/// Brownian increments for `m_paths` paths: `increments[i][k][c] ~ N(0, dt)`.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub d: usize,
    pub m_paths: usize,
    pub seed: u64,
    /// Row-major `(path, step, coord)` increments, shift included.
    pub increments: Vec<f64>,
    /// Accumulated Cameron-Martin shift per `(step, coord)`.
    shift: Vec<f64>,
    /// Pristine draws, kept once a shift has been applied so that shifting
    /// back restores the original values exactly.
    base: Option<Vec<f64>>,
}

impl PathBundle {
    #[inline]
    pub fn increment(&self, path: usize, step: usize, coord: usize) -> f64 {
        self.increments[(path * self.grid.n_steps + step) * self.d + coord]
    }

    pub fn increments_of(&self, path: usize) -> &[f64] {
        let n = self.grid.n_steps * self.d;
        &self.increments[path * n..(path + 1) * n]
    }

    pub fn same_draws(&self, other: &PathBundle) -> bool {
        self.grid == other.grid
            && self.d == other.d
            && self.m_paths == other.m_paths
            && self.increments == other.increments
    }
}

fn draw_path(seed: u64, path: usize, n_steps: usize, d: usize, sqrt_dt: f64, out: &mut [f64]) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    for x in out.iter_mut().take(n_steps * d) {
        let z: f64 = StandardNormal.sample(&mut rng);
        *x = z * sqrt_dt;
    }
}

pub fn generate(grid: &TimeGrid, d: usize, m_paths: usize, seed: u64) -> Result<PathBundle> {
    generate_with_cap(grid, d, m_paths, seed, DEFAULT_ELEMENT_CAP)
}

pub fn generate_with_cap(
    grid: &TimeGrid,
    d: usize,
    m_paths: usize,
    seed: u64,
    cap: usize,
) -> Result<PathBundle> {
    assert!(d >= 1 && m_paths >= 1, "d and m_paths must be positive");
    let total = m_paths
        .checked_mul(grid.n_steps)
        .and_then(|x| x.checked_mul(d))
        .ok_or(Error::AllocationTooLarge {
            requested: usize::MAX,
            cap,
        })?;
    if total > cap {
        return Err(Error::AllocationTooLarge {
            requested: total,
            cap,
        });
    }
    let sqrt_dt = grid.dt().sqrt();
    let n = grid.n_steps;
    let mut increments = vec![0.0; total];
    increments
        .par_chunks_mut(n * d)
        .enumerate()
        .for_each(|(path, chunk)| draw_path(seed, path, n, d, sqrt_dt, chunk));
    Ok(PathBundle {
        grid: grid.clone(),
        d,
        m_paths,
        seed,
        increments,
        shift: vec![0.0; n * d],
        base: None,
    })
}

/// Shift all increments by the increments of a deterministic path `h` given
/// at the grid nodes (`h[k][c]`, `h[0] = 0`). Shifting by `h` and then by
/// `-h` restores the original bundle exactly because the pristine draws are
/// retained and the shift accumulator returns to zero.
pub fn shift_by(bundle: &PathBundle, h: &[Vec<f64>]) -> Result<PathBundle> {
    let n = bundle.grid.n_steps;
    let d = bundle.d;
    if h.len() != n + 1 || h.iter().any(|row| row.len() != d) {
        return Err(Error::GridMismatch {
            context: format!("shift path has {} nodes, grid needs {}", h.len(), n + 1),
        });
    }
    if h[0].iter().any(|&x| x != 0.0) {
        return Err(Error::GridMismatch {
            context: "shift path must start at 0".into(),
        });
    }
    let base = bundle
        .base
        .clone()
        .unwrap_or_else(|| bundle.increments.clone());
    let mut shift = bundle.shift.clone();
    for k in 0..n {
        for c in 0..d {
            shift[k * d + c] += h[k + 1][c] - h[k][c];
        }
    }
    let mut increments = base.clone();
    increments
        .par_chunks_mut(n * d)
        .for_each(|chunk| {
            for (kc, x) in chunk.iter_mut().enumerate() {
                *x += shift[kc];
            }
        });
    Ok(PathBundle {
        grid: bundle.grid.clone(),
        d,
        m_paths: bundle.m_paths,
        seed: bundle.seed,
        increments,
        shift,
        base: Some(base),
    })
}

const MAGIC: &[u8; 5] = b"SDGB1";

/// Binary dump: magic, little-endian u64 seed, u32 dims (d, m_paths,
/// n_steps), then f64 `t0`, `t_end` and the increments row-major.
pub fn dump(bundle: &PathBundle) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 8 + 12 + 16 + bundle.increments.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&bundle.seed.to_le_bytes());
    out.extend_from_slice(&(bundle.d as u32).to_le_bytes());
    out.extend_from_slice(&(bundle.m_paths as u32).to_le_bytes());
    out.extend_from_slice(&(bundle.grid.n_steps as u32).to_le_bytes());
    out.extend_from_slice(&bundle.grid.t0.to_le_bytes());
    out.extend_from_slice(&bundle.grid.t_end.to_le_bytes());
    for x in &bundle.increments {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn load(bytes: &[u8]) -> Result<PathBundle> {
    let fail = |msg: &str| Error::Io(format!("bundle load: {msg}"));
    if bytes.len() < 5 + 8 + 12 + 16 || &bytes[..5] != MAGIC {
        return Err(fail("bad magic or truncated header"));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let seed = u64_at(5);
    let d = u32_at(13);
    let m_paths = u32_at(17);
    let n_steps = u32_at(21);
    let t0 = f64_at(25);
    let t_end = f64_at(33);
    let total = m_paths * n_steps * d;
    if bytes.len() != 41 + total * 8 {
        return Err(fail("payload length mismatch"));
    }
    let increments: Vec<f64> = (0..total).map(|i| f64_at(41 + i * 8)).collect();
    Ok(PathBundle {
        grid: TimeGrid::new(t0, t_end, n_steps)?,
        d,
        m_paths,
        seed,
        increments,
        shift: vec![0.0; n_steps * d],
        base: None,
    })
}
