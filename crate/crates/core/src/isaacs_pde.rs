//! Monotone explicit finite-difference solver for the one-dimensional fully
//! non-linear terminal-value problem `-dw/dt - H(t, x, w, w_x, w_xx) = 0`,
//! `w(T, .) = g`, with `H` a brute-force extremum of the game Hamiltonian
//! over finite control grids, plus a viscosity sub/supersolution residual
//! checker and Monte-Carlo cross-validation.
//!
//! The first-order term uses a central difference stabilized by local
//! Lax-Friedrichs dissipation `theta/2 * (w_{j+1} - 2 w_j + w_{j-1}) / dx`
//! with `theta` at least the sampled bound on `|dH/dw_x| = |b + f_z sigma|`.
//! The working domain is padded by one cell per time step on each side, so
//! values reported on the requested window are never influenced by the
//! boundary treatment: the explicit three-point stencil moves information
//! exactly one cell per step.

use crate::bsde_engine::BasisSpec;
use crate::controls::{ControlClass, StrategyClass};
use crate::error::{Error, Result};
use crate::mc_paths::PathBundle;
use crate::model::CoefficientSet;
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum HamiltonianSide {
    /// `sup over u, inf over v`.
    SupInf,
    /// `inf over v, sup over u`.
    InfSup,
}

#[derive(Clone, Debug)]
pub struct PdeGridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    /// Number of time steps; `None` picks the largest stable step.
    pub n_t: Option<usize>,
}

/// Sampled coefficient statistics driving the dissipation and step bounds.
#[derive(Clone, Copy, Debug, Default, serde::Serialize)]
pub struct SchemeStats {
    pub a_max: f64,
    pub drift_term_max: f64,
    pub lip_y: f64,
    pub theta: f64,
}

#[derive(Clone, Debug)]
pub struct PdeGrid {
    pub t0: f64,
    pub t_end: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub n_t: usize,
    pub dx: f64,
    pub dt: f64,
    pub side: HamiltonianSide,
    pub stats: SchemeStats,
    /// Largest stable dt for the recorded stats.
    pub cfl_bound: f64,
    /// `(n_t + 1) x n_x`, layer 0 at `t0`, layer `n_t` the terminal data.
    pub values: Vec<f64>,
}

impl PdeGrid {
    #[inline]
    pub fn value(&self, layer: usize, node: usize) -> f64 {
        self.values[layer * self.n_x + node]
    }

    pub fn x_node(&self, node: usize) -> f64 {
        if node + 1 == self.n_x {
            self.x_max
        } else {
            self.x_min + node as f64 * self.dx
        }
    }

    pub fn t_node(&self, layer: usize) -> f64 {
        if layer == self.n_t {
            self.t_end
        } else {
            self.t0 + layer as f64 * self.dt
        }
    }

    /// Linear interpolation along x at a time layer.
    pub fn interpolate_x(&self, layer: usize, x: f64) -> Result<f64> {
        if x < self.x_min - 1e-12 || x > self.x_max + 1e-12 {
            return Err(Error::GridTooCoarse { t: self.t_node(layer), x });
        }
        let pos = ((x - self.x_min) / self.dx).clamp(0.0, (self.n_x - 1) as f64);
        let j = (pos.floor() as usize).min(self.n_x - 2);
        let w = pos - j as f64;
        Ok(self.value(layer, j) * (1.0 - w) + self.value(layer, j + 1) * w)
    }

    /// Monotonicity margins of the interior stencil under the recorded
    /// stats: coefficients of the off-center neighbors and of the center,
    /// in the worst case over the sampled coefficient ranges. All three are
    /// nonnegative for a monotone scheme.
    pub fn stencil_margins(&self) -> (f64, f64, f64) {
        let s = &self.stats;
        let off_worst = self.dt
            * (0.0 / (2.0 * self.dx * self.dx) + (s.theta - s.drift_term_max) / (2.0 * self.dx));
        let center = 1.0 - self.dt * (s.a_max / (self.dx * self.dx) + s.theta / self.dx + s.lip_y);
        (off_worst, off_worst, center)
    }
}

struct HamGrids<'a> {
    u: &'a [Vec<f64>],
    v: &'a [Vec<f64>],
    side: HamiltonianSide,
}

/// Extremum over the control grids of the spatial Hamiltonian terms at one
/// node. `z` is the central difference, `gamma` the second difference.
fn node_hamiltonian(
    cs: &CoefficientSet,
    grids: &HamGrids,
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    gamma: f64,
    bbuf: &mut [f64],
    sbuf: &mut [f64],
) -> f64 {
    let xs = [x];
    let mut eval = |u: &[f64], v: &[f64]| -> f64 {
        cs.drift_into(t, &xs, u, v, bbuf);
        cs.diffusion_into(t, &xs, u, v, sbuf);
        let a = sbuf[0] * sbuf[0];
        0.5 * a * gamma + z * bbuf[0] + cs.generator(t, &xs, y, &[z * sbuf[0]], u, v)
    };
    match grids.side {
        HamiltonianSide::SupInf => {
            let mut outer = f64::NEG_INFINITY;
            for u in grids.u {
                let mut inner = f64::INFINITY;
                for v in grids.v {
                    inner = inner.min(eval(u, v));
                }
                outer = outer.max(inner);
            }
            outer
        }
        HamiltonianSide::InfSup => {
            let mut outer = f64::INFINITY;
            for v in grids.v {
                let mut inner = f64::NEG_INFINITY;
                for u in grids.u {
                    inner = inner.max(eval(u, v));
                }
                outer = outer.min(inner);
            }
            outer
        }
    }
}

/// Sample the coefficient bounds that enter the dissipation and CFL
/// constants over a space-time-control box.
fn sample_stats(
    cs: &CoefficientSet,
    t0: f64,
    t_end: f64,
    x_lo: f64,
    x_hi: f64,
    u_grid: &[Vec<f64>],
    v_grid: &[Vec<f64>],
) -> SchemeStats {
    let mut bbuf = vec![0.0; 1];
    let mut sbuf = vec![0.0; 1];
    let mut a_max = 0.0f64;
    let mut b_max = 0.0f64;
    let mut sig_max = 0.0f64;
    let mut lip_y = 0.0f64;
    let mut lip_z = 0.0f64;
    let n_x = 17;
    let n_t = 5;
    // probe ranges for the generator slopes
    let y_probes = [-1.0, 0.0, 1.0];
    let z_probes = [-1.0, 0.0, 1.0];
    let h = 1e-4;
    for it in 0..=n_t {
        let t = t0 + (t_end - t0) * it as f64 / n_t as f64;
        for ix in 0..=n_x {
            let x = [x_lo + (x_hi - x_lo) * ix as f64 / n_x as f64];
            for u in u_grid {
                for v in v_grid {
                    cs.drift_into(t, &x, u, v, &mut bbuf);
                    cs.diffusion_into(t, &x, u, v, &mut sbuf);
                    b_max = b_max.max(bbuf[0].abs());
                    sig_max = sig_max.max(sbuf[0].abs());
                    a_max = a_max.max(sbuf[0] * sbuf[0]);
                    for &yp in &y_probes {
                        for &zp in &z_probes {
                            let f0 = cs.generator(t, &x, yp, &[zp], u, v);
                            let fy = cs.generator(t, &x, yp + h, &[zp], u, v);
                            let fz = cs.generator(t, &x, yp, &[zp + h], u, v);
                            lip_y = lip_y.max(((fy - f0) / h).abs());
                            lip_z = lip_z.max(((fz - f0) / h).abs());
                        }
                    }
                }
            }
        }
    }
    SchemeStats {
        a_max,
        drift_term_max: b_max + lip_z * sig_max,
        lip_y,
        theta: b_max + lip_z * sig_max,
    }
}

const CFL_SAFETY: f64 = 0.9;

fn cfl_bound(stats: &SchemeStats, dx: f64) -> f64 {
    let denom = stats.a_max + dx * stats.theta + dx * dx * stats.lip_y;
    if denom <= 0.0 {
        f64::INFINITY
    } else {
        dx * dx / denom
    }
}

/// Backward explicit sweep. The requested window `[x_min, x_max]` is padded
/// by `n_t` cells per side; padded edge values stay at the terminal data,
/// which never reaches the reported window.
pub fn solve_pde(
    cs: &CoefficientSet,
    t0: f64,
    t_end: f64,
    spec: &PdeGridSpec,
    side: HamiltonianSide,
    u_grid: &[Vec<f64>],
    v_grid: &[Vec<f64>],
) -> Result<PdeGrid> {
    if u_grid.is_empty() || v_grid.is_empty() {
        return Err(Error::EmptyGrid("control grid"));
    }
    if spec.n_x < 3 || !(spec.x_max > spec.x_min) || !(t_end > t0) {
        return Err(Error::EmptyGrid("pde grid spec"));
    }
    let dx = (spec.x_max - spec.x_min) / (spec.n_x - 1) as f64;

    // the pad width depends on n_t, which depends on the stats over the
    // padded domain; iterate to a fixed point
    let mut stats = sample_stats(cs, t0, t_end, spec.x_min, spec.x_max, u_grid, v_grid);
    let mut n_t;
    let mut bound;
    let mut rounds = 0;
    loop {
        bound = cfl_bound(&stats, dx);
        n_t = match spec.n_t {
            Some(nt) => {
                let dt = (t_end - t0) / nt as f64;
                if dt > bound {
                    return Err(Error::CflViolated { dt, bound });
                }
                nt
            }
            None => ((t_end - t0) / (CFL_SAFETY * bound)).ceil().max(1.0) as usize,
        };
        let pad = n_t as f64 * dx;
        let wider = sample_stats(
            cs,
            t0,
            t_end,
            spec.x_min - pad,
            spec.x_max + pad,
            u_grid,
            v_grid,
        );
        let grew = wider.a_max > stats.a_max * (1.0 + 1e-9) + 1e-12
            || wider.theta > stats.theta * (1.0 + 1e-9) + 1e-12
            || wider.lip_y > stats.lip_y * (1.0 + 1e-9) + 1e-12;
        stats = wider;
        rounds += 1;
        if !grew {
            break;
        }
        if rounds > 8 {
            return Err(Error::CflViolated {
                dt: (t_end - t0) / n_t as f64,
                bound: cfl_bound(&stats, dx),
            });
        }
    }
    let dt = (t_end - t0) / n_t as f64;
    if dt > bound {
        return Err(Error::CflViolated { dt, bound });
    }

    let pad = n_t;
    let wide_n = spec.n_x + 2 * pad;
    let x_of = |j: usize| spec.x_min + (j as f64 - pad as f64) * dx;

    let mut cur: Vec<f64> = (0..wide_n).map(|j| cs.terminal(&[x_of(j)])).collect();
    if cur.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteSolution { layer: n_t });
    }
    let mut values = vec![0.0; (n_t + 1) * spec.n_x];
    values[n_t * spec.n_x..].copy_from_slice(&cur[pad..pad + spec.n_x]);

    let theta = stats.theta;
    let mut next = vec![0.0; wide_n];
    for layer in (0..n_t).rev() {
        let t_eval = t0 + (layer + 1) as f64 * dt;
        next[0] = cur[0];
        next[wide_n - 1] = cur[wide_n - 1];
        let interior = &mut next[1..wide_n - 1];
        let cur_ref = &cur;
        interior
            .par_iter_mut()
            .enumerate()
            .for_each(|(jj, out)| {
                let j = jj + 1;
                let mut bbuf = [0.0; 1];
                let mut sbuf = [0.0; 1];
                let w_m = cur_ref[j - 1];
                let w_0 = cur_ref[j];
                let w_p = cur_ref[j + 1];
                let z = (w_p - w_m) / (2.0 * dx);
                let second = (w_p - 2.0 * w_0 + w_m) / (dx * dx);
                let grids = HamGrids {
                    u: u_grid,
                    v: v_grid,
                    side,
                };
                let ham = node_hamiltonian(
                    cs, &grids, t_eval, x_of(j), w_0, z, second, &mut bbuf, &mut sbuf,
                );
                let dissipation = 0.5 * theta * (w_p - 2.0 * w_0 + w_m) / dx;
                *out = w_0 + dt * (ham + dissipation);
            });
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSolution { layer });
        }
        std::mem::swap(&mut cur, &mut next);
        values[layer * spec.n_x..(layer + 1) * spec.n_x]
            .copy_from_slice(&cur[pad..pad + spec.n_x]);
    }

    Ok(PdeGrid {
        t0,
        t_end,
        x_min: spec.x_min,
        x_max: spec.x_max,
        n_x: spec.n_x,
        n_t,
        dx,
        dt,
        side,
        stats,
        cfl_bound: bound,
        values,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum SolutionSide {
    Sub,
    Super,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct ViscosityReport {
    pub t: f64,
    pub x: f64,
    /// Monomial coefficients `c[a][b]` of the test function around the
    /// point: `phi(t0 + s, x0 + h) = sum c[a][b] s^a h^b`, `a, b <= 2`.
    pub coeffs: [[f64; 3]; 3],
    pub residual: f64,
    pub side: SolutionSide,
    pub pass: bool,
}

/// Quadratic-in-each-variable test function through a 3 x 3 space-time
/// stencil of `w`, returned as monomial coefficients around the center.
fn fit_test_function(stencil: &[[f64; 3]; 3], dt: f64, dx: f64) -> [[f64; 3]; 3] {
    // 1-D quadratic through values at offsets {-1, 0, 1}:
    // c0 = v0, c1 = (v+ - v-)/2, c2 = (v+ - 2 v0 + v-)/2
    let quad = |vm: f64, v0: f64, vp: f64| [v0, 0.5 * (vp - vm), 0.5 * (vp - 2.0 * v0 + vm)];
    // first in x per time row, then in t per x-coefficient
    let mut rows = [[0.0; 3]; 3];
    for (it, row) in stencil.iter().enumerate() {
        rows[it] = quad(row[0], row[1], row[2]);
    }
    let mut coeffs = [[0.0; 3]; 3];
    for b in 0..3 {
        let c_t = quad(rows[0][b], rows[1][b], rows[2][b]);
        for (a, &ct) in c_t.iter().enumerate() {
            coeffs[a][b] = ct / dt.powi(a as i32) / dx.powi(b as i32);
        }
    }
    coeffs
}

/// Evaluate the fitted test function at offsets `(s, h)` from the center.
pub fn eval_test_function(coeffs: &[[f64; 3]; 3], s: f64, h: f64) -> f64 {
    let mut acc = 0.0;
    for (a, row) in coeffs.iter().enumerate() {
        for (b, &c) in row.iter().enumerate() {
            acc += c * s.powi(a as i32) * h.powi(b as i32);
        }
    }
    acc
}

/// Viscosity residual `-d_t phi - H(t, x, phi, D phi, D^2 phi)` of a
/// candidate surface sampled on a 3 x 3 stencil around `(t, x)`. A
/// subsolution test passes when the residual is at most `tol`, a
/// supersolution test when it is at least `-tol`.
#[allow(clippy::too_many_arguments)]
pub fn viscosity_residual_fn(
    cs: &CoefficientSet,
    w: &dyn Fn(f64, f64) -> f64,
    t: f64,
    x: f64,
    dt: f64,
    dx: f64,
    side_h: HamiltonianSide,
    u_grid: &[Vec<f64>],
    v_grid: &[Vec<f64>],
    side: SolutionSide,
    tol: f64,
) -> Result<ViscosityReport> {
    let mut stencil = [[0.0; 3]; 3];
    for (it, srow) in stencil.iter_mut().enumerate() {
        for (ix, val) in srow.iter_mut().enumerate() {
            *val = w(t + (it as f64 - 1.0) * dt, x + (ix as f64 - 1.0) * dx);
        }
    }
    let coeffs = fit_test_function(&stencil, dt, dx);
    let phi = coeffs[0][0];
    let dphi_dt = coeffs[1][0];
    let dphi_dx = coeffs[0][1];
    let d2phi_dx2 = 2.0 * coeffs[0][2];
    let grids = HamGrids {
        u: u_grid,
        v: v_grid,
        side: side_h,
    };
    let mut bbuf = [0.0; 1];
    let mut sbuf = [0.0; 1];
    let ham = node_hamiltonian(
        cs, &grids, t, x, phi, dphi_dx, d2phi_dx2, &mut bbuf, &mut sbuf,
    );
    let residual = -dphi_dt - ham;
    let pass = match side {
        SolutionSide::Sub => residual <= tol,
        SolutionSide::Super => residual >= -tol,
    };
    Ok(ViscosityReport {
        t,
        x,
        coeffs,
        residual,
        side,
        pass,
    })
}

/// Residual at an interior node of a solved grid.
#[allow(clippy::too_many_arguments)]
pub fn viscosity_residual_grid(
    grid: &PdeGrid,
    cs: &CoefficientSet,
    layer: usize,
    node: usize,
    u_grid: &[Vec<f64>],
    v_grid: &[Vec<f64>],
    side: SolutionSide,
    tol: f64,
) -> Result<ViscosityReport> {
    if layer == 0 || layer >= grid.n_t || node == 0 || node + 1 >= grid.n_x {
        return Err(Error::BoundaryPoint { layer, node });
    }
    let sampler = |t: f64, x: f64| -> f64 {
        let l = ((t - grid.t0) / grid.dt).round() as usize;
        let j = ((x - grid.x_min) / grid.dx).round() as usize;
        grid.value(l, j)
    };
    viscosity_residual_fn(
        cs,
        &sampler,
        grid.t_node(layer),
        grid.x_node(node),
        grid.dt,
        grid.dx,
        grid.side,
        u_grid,
        v_grid,
        side,
        tol,
    )
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct CrossValReport {
    pub mc_value: f64,
    pub mc_std_err: f64,
    pub pde_value: f64,
    pub gap: f64,
    pub tol: f64,
    pub dx: f64,
    pub dt: f64,
    pub pass: bool,
}

/// Monte-Carlo value versus finite-difference value at one point, with the
/// combined tolerance `4 se + 5 (dx + dt)`.
#[allow(clippy::too_many_arguments)]
pub fn cross_validate(
    cs: &CoefficientSet,
    t0: f64,
    x: f64,
    strategies: &StrategyClass,
    controls: &ControlClass,
    bundle: &PathBundle,
    basis: &BasisSpec,
    spec: &PdeGridSpec,
    side: HamiltonianSide,
    u_grid: &[Vec<f64>],
    v_grid: &[Vec<f64>],
) -> Result<CrossValReport> {
    let est = crate::game_values::estimate_w1(cs, t0, &[x], strategies, controls, bundle, basis)?;
    let grid = solve_pde(cs, t0, bundle.grid.t_end, spec, side, u_grid, v_grid)?;
    let pde_value = grid.interpolate_x(0, x)?;
    let gap = (est.value - pde_value).abs();
    let tol = 4.0 * est.std_err + 5.0 * (grid.dx + grid.dt);
    Ok(CrossValReport {
        mc_value: est.value,
        mc_std_err: est.std_err,
        pde_value,
        gap,
        tol,
        dx: grid.dx,
        dt: grid.dt,
        pass: gap < tol,
    })
}
