//! Euler-Maruyama simulation of the controlled forward state equation,
//! exact path-level identities (restart, pasting) and exit-time detection.

use crate::controls::{ControlPath, FeedbackControl, FeedbackStrategy};
use crate::error::{Error, Result};
use crate::mc_paths::{PathBundle, TimeGrid};
use crate::model::CoefficientSet;
use rayon::prelude::*;

/// Simulated state paths on the bundle grid. `values[i][k]` is the state of
/// path `i` at node `k`; entries before `start_idx` stay at the initial
/// value when a simulation starts mid-grid.
#[derive(Clone, Debug)]
pub struct StatePaths {
    pub grid: TimeGrid,
    pub m_paths: usize,
    pub k: usize,
    pub start_idx: usize,
    pub initial: Vec<Vec<f64>>,
    values: Vec<f64>,
}

impl StatePaths {
    #[inline]
    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * (self.grid.n_steps + 1) + step) * self.k;
        &self.values[o..o + self.k]
    }

    pub fn terminal(&self, path: usize) -> &[f64] {
        self.state(path, self.grid.n_steps)
    }

    pub fn max_abs_diff(&self, other: &StatePaths, from_step: usize, to_step: usize) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.m_paths {
            for k in from_step..=to_step {
                for c in 0..self.k {
                    worst = worst.max((self.state(i, k)[c] - other.state(i, k)[c]).abs());
                }
            }
        }
        worst
    }
}

/// Initial data: one shared state or one state per path.
#[derive(Clone, Debug)]
pub enum Initial {
    Fixed(Vec<f64>),
    PerPath(Vec<Vec<f64>>),
}

impl Initial {
    fn of_path(&self, i: usize) -> &[f64] {
        match self {
            Initial::Fixed(x) => x,
            Initial::PerPath(xs) => &xs[i],
        }
    }
}

fn euler_path(
    cs: &CoefficientSet,
    bundle: &PathBundle,
    mu: &ControlPath,
    nu: &ControlPath,
    start_idx: usize,
    path: usize,
    x0: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let k = cs.k;
    let d = cs.d;
    let n = bundle.grid.n_steps;
    let mut drift = vec![0.0; k];
    let mut diff = vec![0.0; k * d];
    for step in 0..=start_idx.min(n) {
        out[step * k..(step + 1) * k].copy_from_slice(x0);
    }
    for step in start_idx..n {
        let t = bundle.grid.node(step);
        let (head, tail) = out.split_at_mut((step + 1) * k);
        let x = &head[step * k..(step + 1) * k];
        cs.drift_into(t, x, mu.value(path, step), nu.value(path, step), &mut drift);
        cs.diffusion_into(t, x, mu.value(path, step), nu.value(path, step), &mut diff);
        let dt = bundle.grid.dt();
        let next = &mut tail[..k];
        for c in 0..k {
            let mut acc = x[c] + drift[c] * dt;
            for e in 0..d {
                acc += diff[c * d + e] * bundle.increment(path, step, e);
            }
            next[c] = acc;
        }
        if next.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFiniteState { path, step });
        }
    }
    Ok(())
}

/// Simulate the controlled state forward from node `start_idx` with the
/// given realized control paths, using the bundle's increments from that
/// node on. Deterministic in its inputs.
pub fn simulate_forward_from(
    cs: &CoefficientSet,
    initial: &Initial,
    mu: &ControlPath,
    nu: &ControlPath,
    bundle: &PathBundle,
    start_idx: usize,
) -> Result<StatePaths> {
    if mu.grid != bundle.grid || nu.grid != bundle.grid {
        return Err(Error::GridMismatch {
            context: "simulate_forward".into(),
        });
    }
    if mu.m_paths != bundle.m_paths || nu.m_paths != bundle.m_paths {
        return Err(Error::PreconditionViolated(
            "control and bundle path counts differ".into(),
        ));
    }
    if let Initial::PerPath(xs) = initial {
        if xs.len() != bundle.m_paths {
            return Err(Error::PreconditionViolated(
                "per-path initial data has the wrong length".into(),
            ));
        }
    }
    let m = bundle.m_paths;
    let k = cs.k;
    let n = bundle.grid.n_steps;
    let mut values = vec![0.0; m * (n + 1) * k];
    let results: Vec<Result<()>> = values
        .par_chunks_mut((n + 1) * k)
        .enumerate()
        .map(|(i, chunk)| euler_path(cs, bundle, mu, nu, start_idx, i, initial.of_path(i), chunk))
        .collect();
    for r in results {
        r?;
    }
    Ok(StatePaths {
        grid: bundle.grid.clone(),
        m_paths: m,
        k,
        start_idx,
        initial: (0..m).map(|i| initial.of_path(i).to_vec()).collect(),
        values,
    })
}

pub fn simulate_forward(
    cs: &CoefficientSet,
    initial: &Initial,
    mu: &ControlPath,
    nu: &ControlPath,
    bundle: &PathBundle,
) -> Result<StatePaths> {
    simulate_forward_from(cs, initial, mu, nu, bundle, 0)
}

/// Which player the feedback control belongs to; the strategy answers for
/// the other player.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControlledBy {
    /// Control picks `u`, strategy answers `v = beta(k, x, u)`.
    PlayerI,
    /// Control picks `v`, strategy answers `u = alpha(k, x, v)`.
    PlayerII,
}

/// Joint rollout of a feedback control against a feedback strategy: at each
/// step the control reads the current state and the strategy reads the
/// state plus the control's value. Returns the realized state and both
/// realized control paths.
pub fn simulate_feedback(
    cs: &CoefficientSet,
    x0: &[f64],
    control: &FeedbackControl,
    strategy: &FeedbackStrategy,
    role: ControlledBy,
    bundle: &PathBundle,
    start_idx: usize,
) -> Result<(StatePaths, ControlPath, ControlPath)> {
    let m = bundle.m_paths;
    let n = bundle.grid.n_steps;
    let k = cs.k;
    let d = cs.d;
    let dt = bundle.grid.dt();
    let u_dim = cs.u_space.dim;
    let v_dim = cs.v_space.dim;

    struct PathOut {
        states: Vec<f64>,
        us: Vec<f64>,
        vs: Vec<f64>,
        err: Option<Error>,
    }

    let outs: Vec<PathOut> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut states = vec![0.0; (n + 1) * k];
            let mut us = vec![0.0; n * u_dim];
            let mut vs = vec![0.0; n * v_dim];
            let mut drift = vec![0.0; k];
            let mut diff = vec![0.0; k * d];
            for step in 0..=start_idx.min(n) {
                states[step * k..(step + 1) * k].copy_from_slice(x0);
            }
            for step in 0..n {
                let x: Vec<f64> = states[step * k..(step + 1) * k].to_vec();
                let (u, v) = match role {
                    ControlledBy::PlayerI => {
                        let u = control.eval(step, &x);
                        let v = strategy.eval(step, &x, &u);
                        (u, v)
                    }
                    ControlledBy::PlayerII => {
                        let v = control.eval(step, &x);
                        let u = strategy.eval(step, &x, &v);
                        (u, v)
                    }
                };
                us[step * u_dim..(step + 1) * u_dim].copy_from_slice(&u);
                vs[step * v_dim..(step + 1) * v_dim].copy_from_slice(&v);
                if step < start_idx {
                    continue;
                }
                let t = bundle.grid.node(step);
                cs.drift_into(t, &x, &u, &v, &mut drift);
                cs.diffusion_into(t, &x, &u, &v, &mut diff);
                for c in 0..k {
                    let mut acc = x[c] + drift[c] * dt;
                    for e in 0..d {
                        acc += diff[c * d + e] * bundle.increment(i, step, e);
                    }
                    states[(step + 1) * k + c] = acc;
                }
                if states[(step + 1) * k..(step + 2) * k]
                    .iter()
                    .any(|a| !a.is_finite())
                {
                    return PathOut {
                        states,
                        us,
                        vs,
                        err: Some(Error::NonFiniteState { path: i, step }),
                    };
                }
            }
            PathOut {
                states,
                us,
                vs,
                err: None,
            }
        })
        .collect();

    let mut values = Vec::with_capacity(m * (n + 1) * k);
    let mut u_values = Vec::with_capacity(m * n * u_dim);
    let mut v_values = Vec::with_capacity(m * n * v_dim);
    for o in outs {
        if let Some(e) = o.err {
            return Err(e);
        }
        values.extend_from_slice(&o.states);
        u_values.extend_from_slice(&o.us);
        v_values.extend_from_slice(&o.vs);
    }
    let states = StatePaths {
        grid: bundle.grid.clone(),
        m_paths: m,
        k,
        start_idx,
        initial: vec![x0.to_vec(); m],
        values,
    };
    let mu = ControlPath::new(bundle.grid.clone(), cs.u_space.clone(), m, u_values)?;
    let nu = ControlPath::new(bundle.grid.clone(), cs.v_space.clone(), m, v_values)?;
    Ok((states, mu, nu))
}

/// Flow identity check: simulate on the whole grid, then restart from
/// `(t_s, X_s)` with the restricted controls and the same increments. Both
/// runs execute identical floating-point operations past `t_s`, so the
/// discrepancy must be exactly zero.
pub fn restart_flow_check(
    cs: &CoefficientSet,
    x0: &[f64],
    mu: &ControlPath,
    nu: &ControlPath,
    bundle: &PathBundle,
    s_idx: usize,
) -> Result<f64> {
    let n = bundle.grid.n_steps;
    if s_idx > n {
        return Err(Error::PreconditionViolated("s_idx beyond grid".into()));
    }
    let full = simulate_forward(cs, &Initial::Fixed(x0.to_vec()), mu, nu, bundle)?;
    let mid: Vec<Vec<f64>> = (0..bundle.m_paths)
        .map(|i| full.state(i, s_idx).to_vec())
        .collect();
    let restarted =
        simulate_forward_from(cs, &Initial::PerPath(mid), mu, nu, bundle, s_idx)?;
    Ok(full.max_abs_diff(&restarted, s_idx, n))
}

/// Pasted-state identity: when two control pairs agree before `tau`
/// everywhere and after `tau` on masked paths, the states agree there too.
/// Returns (max discrepancy before tau on all paths, max discrepancy after
/// tau on masked paths); both must be exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn pasted_state_check(
    cs: &CoefficientSet,
    x0: &[f64],
    mu: &ControlPath,
    mu_tilde: &ControlPath,
    nu: &ControlPath,
    nu_tilde: &ControlPath,
    tau_idx: &[usize],
    mask_a: &[bool],
    bundle: &PathBundle,
) -> Result<(f64, f64)> {
    let m = bundle.m_paths;
    let n = bundle.grid.n_steps;
    if tau_idx.len() != m || mask_a.len() != m {
        return Err(Error::PreconditionViolated(
            "tau/mask length must equal the path count".into(),
        ));
    }
    // verify the control-equality premise
    for i in 0..m {
        for k in 0..n {
            let must_match = k < tau_idx[i] || mask_a[i];
            if must_match
                && (mu.value(i, k) != mu_tilde.value(i, k)
                    || nu.value(i, k) != nu_tilde.value(i, k))
            {
                return Err(Error::PreconditionViolated(format!(
                    "controls differ at path {i}, step {k} inside the agreement region"
                )));
            }
        }
    }
    let a = simulate_forward(cs, &Initial::Fixed(x0.to_vec()), mu, nu, bundle)?;
    let b = simulate_forward(cs, &Initial::Fixed(x0.to_vec()), mu_tilde, nu_tilde, bundle)?;
    let mut before: f64 = 0.0;
    let mut after_masked: f64 = 0.0;
    for i in 0..m {
        for k in 0..=n {
            for c in 0..cs.k {
                let diff = (a.state(i, k)[c] - b.state(i, k)[c]).abs();
                if k <= tau_idx[i] {
                    before = before.max(diff);
                } else if mask_a[i] {
                    after_masked = after_masked.max(diff);
                }
            }
        }
    }
    Ok((before, after_masked))
}

/// Sample mean of `sup_k |X_k|^2`, the left side of the second-moment
/// growth bound; the fitted constant is this divided by
/// `1 + |xi|^2 + mean integral of the squared control gauges`.
pub fn sup_second_moment(paths: &StatePaths) -> f64 {
    let mut acc = 0.0;
    for i in 0..paths.m_paths {
        let mut sup = 0.0f64;
        for k in 0..=paths.grid.n_steps {
            let norm2: f64 = paths.state(i, k).iter().map(|a| a * a).sum();
            sup = sup.max(norm2);
        }
        acc += sup;
    }
    acc / paths.m_paths as f64
}

/// Exit times from the space-time ball of radius `delta` around
/// `(t0, center)`.
#[derive(Clone, Debug)]
pub struct ExitRecord {
    pub tau_idx: Vec<usize>,
    pub exited_space: Vec<bool>,
}

/// First node `k >= 1` at which `(t_k, X_k)` leaves the closed ball of
/// radius `delta` around `(t0, x)` in the product Euclidean metric. The
/// time coordinate alone exceeds `delta` before the horizon, so an exit
/// index always exists. `exited_space[i]` marks paths that left strictly
/// before the pure time exit.
pub fn exit_time(paths: &StatePaths, center: (f64, &[f64]), delta: f64) -> Result<ExitRecord> {
    let (t0, x0) = center;
    let horizon = paths.grid.t_end - t0;
    if !(delta > 0.0 && delta < horizon) {
        return Err(Error::DeltaOutOfRange { delta, horizon });
    }
    let n = paths.grid.n_steps;
    let time_exit = (1..=n)
        .find(|&k| paths.grid.node(k) - t0 >= delta)
        .unwrap_or(n);
    let mut tau_idx = vec![n; paths.m_paths];
    let mut exited_space = vec![false; paths.m_paths];
    for i in 0..paths.m_paths {
        for k in 1..=n {
            let dt = paths.grid.node(k) - t0;
            let dx2: f64 = paths
                .state(i, k)
                .iter()
                .zip(x0)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if (dt * dt + dx2).sqrt() >= delta {
                tau_idx[i] = k;
                exited_space[i] = k < time_exit;
                break;
            }
        }
    }
    Ok(ExitRecord {
        tau_idx,
        exited_space,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mc_paths::generate;
    use crate::model::{build_additive, AdditiveFuncs, ControlSpace};
    use std::sync::Arc;

    fn cs_const(bval: f64, sval: f64) -> CoefficientSet {
        build_additive(
            1,
            1,
            1,
            1,
            AdditiveFuncs {
                b: Arc::new(move |_t, _x, _w, out| out[0] = bval),
                sigma: Arc::new(move |_t, _x, _w, out| out[0] = sval),
                f: Arc::new(|_t, _x, _y, _z, _w| 0.0),
                g: Arc::new(|x| x[0]),
            },
            2.0,
            1.0,
            2.0,
        )
        .unwrap()
    }

    fn zero_controls(grid: &TimeGrid, m: usize) -> (ControlPath, ControlPath) {
        let sp = ControlSpace::unbounded(1);
        (
            ControlPath::constant(grid, &sp, m, &[0.0]).unwrap(),
            ControlPath::constant(grid, &sp, m, &[0.0]).unwrap(),
        )
    }

    #[test]
    fn frozen_dynamics_stay_put() {
        let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let bundle = generate(&grid, 1, 8, 5).unwrap();
        let (mu, nu) = zero_controls(&grid, 8);
        let cs = cs_const(0.0, 0.0);
        let x = simulate_forward(&cs, &Initial::Fixed(vec![1.5]), &mu, &nu, &bundle).unwrap();
        for i in 0..8 {
            for k in 0..=16 {
                assert_eq!(x.state(i, k)[0], 1.5);
            }
        }
    }

    #[test]
    fn constant_drift_is_exact() {
        let grid = TimeGrid::new(0.0, 1.0, 7).unwrap();
        let bundle = generate(&grid, 1, 4, 9).unwrap();
        let (mu, nu) = zero_controls(&grid, 4);
        let cs = cs_const(1.0, 0.0);
        let x = simulate_forward(&cs, &Initial::Fixed(vec![0.0]), &mu, &nu, &bundle).unwrap();
        for i in 0..4 {
            assert!((x.terminal(i)[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn brownian_second_moment() {
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let m = 100_000;
        let bundle = generate(&grid, 1, m, 11).unwrap();
        let (mu, nu) = zero_controls(&grid, m);
        let cs = cs_const(0.0, 1.0);
        let x = simulate_forward(&cs, &Initial::Fixed(vec![0.0]), &mu, &nu, &bundle).unwrap();
        let mut sum2 = 0.0;
        let mut sum4 = 0.0;
        for i in 0..m {
            let v = x.terminal(i)[0];
            sum2 += v * v;
            sum4 += v * v * v * v;
        }
        let mean2 = sum2 / m as f64;
        let var_of_sq = sum4 / m as f64 - mean2 * mean2;
        let se = (var_of_sq / m as f64).sqrt();
        assert!((mean2 - 1.0).abs() < 5.0 * se, "E[X_T^2]={mean2}");
    }

    #[test]
    fn restart_flow_is_exact() {
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let bundle = generate(&grid, 1, 32, 21).unwrap();
        let sp = ControlSpace::unbounded(1);
        let mu = ControlPath::constant(&grid, &sp, 32, &[0.7]).unwrap();
        let nu = ControlPath::constant(&grid, &sp, 32, &[-0.2]).unwrap();
        let cs = cs_const(0.5, 0.8);
        for s_idx in [0, 10, 20] {
            let d = restart_flow_check(&cs, &[0.3], &mu, &nu, &bundle, s_idx).unwrap();
            assert_eq!(d, 0.0, "s_idx={s_idx}");
        }
    }

    #[test]
    fn pasted_states_agree() {
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let m = 16;
        let bundle = generate(&grid, 1, m, 31).unwrap();
        let sp = ControlSpace::unbounded(1);
        let mu = ControlPath::constant(&grid, &sp, m, &[1.0]).unwrap();
        let nu = ControlPath::constant(&grid, &sp, m, &[0.0]).unwrap();
        let tau: Vec<usize> = (0..m).map(|i| (i % 10).max(1)).collect();
        let mask: Vec<bool> = (0..m).map(|i| i % 3 == 0).collect();
        // tilde controls: same before tau everywhere, same after tau on the mask
        let mu2 = ControlPath::constant(&grid, &sp, m, &[-1.0]).unwrap();
        let mut vals = Vec::new();
        for i in 0..m {
            for k in 0..10 {
                let v = if k < tau[i] || mask[i] {
                    mu.value(i, k)[0]
                } else {
                    mu2.value(i, k)[0]
                };
                vals.push(v);
            }
        }
        let mu_tilde = ControlPath::new(grid.clone(), sp.clone(), m, vals).unwrap();
        let cs = cs_const(0.0, 0.0);
        // drift depends on controls through the merged sum; make it matter
        let cs = CoefficientSet {
            b: Arc::new(|_t, _x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]| {
                out[0] = u[0] + v[0]
            }),
            ..cs
        };
        let (before, after) =
            pasted_state_check(&cs, &[0.0], &mu, &mu_tilde, &nu, &nu, &tau, &mask, &bundle)
                .unwrap();
        assert_eq!(before, 0.0);
        assert_eq!(after, 0.0);
    }

    #[test]
    fn pasted_state_precondition_is_checked() {
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let m = 2;
        let bundle = generate(&grid, 1, m, 1).unwrap();
        let sp = ControlSpace::unbounded(1);
        let mu = ControlPath::constant(&grid, &sp, m, &[1.0]).unwrap();
        let mu2 = ControlPath::constant(&grid, &sp, m, &[2.0]).unwrap();
        let nu = ControlPath::constant(&grid, &sp, m, &[0.0]).unwrap();
        let cs = cs_const(0.0, 0.0);
        let err = pasted_state_check(
            &cs,
            &[0.0],
            &mu,
            &mu2,
            &nu,
            &nu,
            &[2, 2],
            &[false, false],
            &bundle,
        )
        .unwrap_err();
        assert!(matches!(err, Error::PreconditionViolated(_)));
    }

    #[test]
    fn second_moment_bound_finite_and_monotone() {
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let m = 5000;
        let bundle = generate(&grid, 1, m, 77).unwrap();
        let sp = ControlSpace::unbounded(1);
        let mu = ControlPath::constant(&grid, &sp, m, &[0.5]).unwrap();
        let nu = ControlPath::constant(&grid, &sp, m, &[-0.25]).unwrap();
        let cs = cs_const(0.3, 1.0);
        let gauge_integral = 1.0 * (0.5f64.powi(2) + 0.25f64.powi(2));
        let mut prev = 0.0;
        for &xi in &[0.0, 1.0, 2.0] {
            let x = simulate_forward(&cs, &Initial::Fixed(vec![xi]), &mu, &nu, &bundle).unwrap();
            let moment = sup_second_moment(&x);
            let fitted_c = moment / (1.0 + xi * xi + gauge_integral);
            assert!(moment.is_finite() && fitted_c.is_finite());
            assert!(moment > prev, "sup moment not monotone in |xi|");
            prev = moment;
        }
    }

    #[test]
    fn exit_time_pure_time_exit() {
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let bundle = generate(&grid, 1, 4, 3).unwrap();
        let (mu, nu) = zero_controls(&grid, 4);
        let cs = cs_const(0.0, 0.0);
        let x = simulate_forward(&cs, &Initial::Fixed(vec![0.2]), &mu, &nu, &bundle).unwrap();
        let rec = exit_time(&x, (0.0, &[0.2]), 0.35).unwrap();
        for i in 0..4 {
            assert_eq!(rec.tau_idx[i], 35); // ceil(0.35 / 0.01)
            assert!(!rec.exited_space[i]);
        }
        let rec = exit_time(&x, (0.0, &[0.2]), 0.005).unwrap();
        for i in 0..4 {
            assert_eq!(rec.tau_idx[i], 1); // delta below dt: first node exits
        }
    }

    #[test]
    fn exit_time_spatial_exit() {
        // b = 10, sigma = 0, delta = 0.1, dt = 0.01: |(k dt, 10 k dt)| >= 0.1
        // already at k = 1
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let bundle = generate(&grid, 1, 2, 3).unwrap();
        let (mu, nu) = zero_controls(&grid, 2);
        let cs = cs_const(10.0, 0.0);
        let x = simulate_forward(&cs, &Initial::Fixed(vec![0.0]), &mu, &nu, &bundle).unwrap();
        let rec = exit_time(&x, (0.0, &[0.0]), 0.1).unwrap();
        for i in 0..2 {
            assert_eq!(rec.tau_idx[i], 1);
            assert!(rec.exited_space[i]);
        }
    }

    #[test]
    fn delta_out_of_range() {
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let bundle = generate(&grid, 1, 1, 3).unwrap();
        let (mu, nu) = zero_controls(&grid, 1);
        let cs = cs_const(0.0, 0.0);
        let x = simulate_forward(&cs, &Initial::Fixed(vec![0.0]), &mu, &nu, &bundle).unwrap();
        assert!(matches!(
            exit_time(&x, (0.0, &[0.0]), 1.5),
            Err(Error::DeltaOutOfRange { .. })
        ));
    }
}
