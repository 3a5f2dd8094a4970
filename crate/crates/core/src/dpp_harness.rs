//! Numerical verification of the weak dynamic programming principle: the
//! value at `(t0, x)` must be bracketed by the min-max of stopped payoffs
//! against any continuous sandwich `phi <= w <= phi_tilde`. The sandwich
//! used here is the interpolated value estimate shifted down/up by a margin
//! that dominates the estimate's Monte-Carlo noise.

use crate::bsde_engine::{solve_bsde_batch, BasisSpec, GeneratorCutoff};
use crate::controls::{ControlClass, StrategyClass};
use crate::error::{Error, Result};
use crate::mc_paths::PathBundle;
use crate::model::CoefficientSet;
use crate::sde_engine::{exit_time, simulate_feedback, ControlledBy};

/// Value estimates on a rectangular `(t, x)` grid (scalar state).
#[derive(Clone, Debug)]
pub struct ValueGrid {
    pub t_nodes: Vec<f64>,
    pub x_nodes: Vec<f64>,
    /// `values[it * x_nodes.len() + ix]`.
    pub values: Vec<f64>,
    /// Largest standard error among the node estimates.
    pub std_err_max: f64,
}

impl ValueGrid {
    pub fn new(t_nodes: Vec<f64>, x_nodes: Vec<f64>, values: Vec<f64>, std_err_max: f64) -> Result<Self> {
        if t_nodes.len() < 2 || x_nodes.len() < 2 {
            return Err(Error::EmptyGrid("value grid needs at least 2 nodes per axis"));
        }
        if values.len() != t_nodes.len() * x_nodes.len() {
            return Err(Error::PreconditionViolated(
                "value grid shape mismatch".into(),
            ));
        }
        Ok(ValueGrid {
            t_nodes,
            x_nodes,
            values,
            std_err_max,
        })
    }

    /// Piecewise-bilinear interpolation; errors outside the hull.
    pub fn interpolate(&self, t: f64, x: f64) -> Result<f64> {
        let eps = 1e-12;
        let tn = &self.t_nodes;
        let xn = &self.x_nodes;
        if t < tn[0] - eps || t > tn[tn.len() - 1] + eps || x < xn[0] - eps || x > xn[xn.len() - 1] + eps
        {
            return Err(Error::GridTooCoarse { t, x });
        }
        let cell = |nodes: &[f64], v: f64| -> (usize, f64) {
            let mut i = nodes.len() - 2;
            for j in 0..nodes.len() - 1 {
                if v <= nodes[j + 1] {
                    i = j;
                    break;
                }
            }
            let w = (v - nodes[i]) / (nodes[i + 1] - nodes[i]);
            (i, w.clamp(0.0, 1.0))
        };
        let (it, wt) = cell(tn, t);
        let (ix, wx) = cell(xn, x);
        let nx = xn.len();
        let v00 = self.values[it * nx + ix];
        let v01 = self.values[it * nx + ix + 1];
        let v10 = self.values[(it + 1) * nx + ix];
        let v11 = self.values[(it + 1) * nx + ix + 1];
        Ok(v00 * (1.0 - wt) * (1.0 - wx)
            + v01 * (1.0 - wt) * wx
            + v10 * wt * (1.0 - wx)
            + v11 * wt * wx)
    }
}

/// The continuous sandwich `interpolant - epsilon` / `interpolant + epsilon`.
#[derive(Clone)]
pub struct Sandwich<'a> {
    grid: &'a ValueGrid,
    pub epsilon: f64,
}

impl Sandwich<'_> {
    pub fn lower(&self, t: f64, x: f64) -> Result<f64> {
        Ok(self.grid.interpolate(t, x)? - self.epsilon)
    }

    pub fn upper(&self, t: f64, x: f64) -> Result<f64> {
        Ok(self.grid.interpolate(t, x)? + self.epsilon)
    }
}

/// Build the sandwich. The margin must be positive and dominate the grid's
/// Monte-Carlo noise by a factor of at least 3.
pub fn build_sandwich(grid: &ValueGrid, epsilon: f64) -> Result<Sandwich<'_>> {
    let required = 3.0 * grid.std_err_max;
    if !(epsilon > 0.0) || epsilon < required {
        return Err(Error::EpsilonTooSmall { epsilon, required });
    }
    Ok(Sandwich { grid, epsilon })
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct PairBracket {
    pub strategy: String,
    pub control: String,
    pub lower: f64,
    pub upper: f64,
    pub std_err: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct DppReport {
    pub lower: f64,
    pub upper: f64,
    pub w_hat: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub tol_mc: f64,
    pub pass: bool,
    pub per_pair: Vec<PairBracket>,
    /// Mean |Z| over post-exit steps, a residual of the stopped equation.
    pub post_exit_z_mean: f64,
    /// Three standard errors of the regression noise for a zero target
    /// at the terminal data's scale; the post-exit |Z| must stay below it.
    pub post_exit_z_floor: f64,
}

#[allow(clippy::too_many_arguments)]
fn check_dpp(
    cs: &CoefficientSet,
    t0: f64,
    x: &[f64],
    delta: f64,
    strategies: &StrategyClass,
    controls: &ControlClass,
    value_grid: &ValueGrid,
    epsilon: f64,
    bundle: &PathBundle,
    basis: &BasisSpec,
    w_hat: f64,
    role: ControlledBy,
) -> Result<DppReport> {
    let horizon = bundle.grid.t_end - t0;
    if !(delta > 0.0 && delta < horizon) {
        return Err(Error::DeltaOutOfRange { delta, horizon });
    }
    let sandwich = build_sandwich(value_grid, epsilon)?;
    let wide = build_sandwich(value_grid, 2.0 * epsilon)?;
    let start_idx = bundle.grid.index_of(t0).ok_or_else(|| Error::GridMismatch {
        context: format!("t0={t0} is not a grid node"),
    })?;

    struct PairOut {
        lower: f64,
        upper: f64,
        lower_wide: f64,
        upper_wide: f64,
        se: f64,
        z_post: f64,
        z_floor: f64,
    }

    let pairs: Vec<(usize, usize)> = (0..strategies.items.len())
        .flat_map(|si| (0..controls.items.len()).map(move |cj| (si, cj)))
        .collect();
    let outs: Vec<Result<PairOut>> = pairs
        .iter()
        .map(|&(si, cj)| {
            let strat = &strategies.items[si];
            let ctrl = &controls.items[cj];
            let (states, mu, nu) =
                simulate_feedback(cs, x, ctrl, strat, role, bundle, start_idx)?;
            let exits = exit_time(&states, (t0, x), delta)?;
            let m = states.m_paths;
            let stopped: Vec<(f64, f64)> = (0..m)
                .map(|i| {
                    let k = exits.tau_idx[i];
                    (states.grid.node(k), states.state(i, k)[0])
                })
                .collect();
            let mut term_lo = Vec::with_capacity(m);
            let mut term_hi = Vec::with_capacity(m);
            let mut term_lo2 = Vec::with_capacity(m);
            let mut term_hi2 = Vec::with_capacity(m);
            for &(ts, xs) in &stopped {
                term_lo.push(sandwich.lower(ts, xs)?);
                term_hi.push(sandwich.upper(ts, xs)?);
                term_lo2.push(wide.lower(ts, xs)?);
                term_hi2.push(wide.upper(ts, xs)?);
            }
            let cutoff = GeneratorCutoff {
                tau_idx: exits.tau_idx.clone(),
            };
            let sols = solve_bsde_batch(
                cs,
                &states,
                &mu,
                &nu,
                &[&term_lo, &term_hi, &term_lo2, &term_hi2],
                &cutoff,
                bundle,
                basis,
            )?;
            let (lo, se_lo) = sols[0].y0_mean_se();
            let (hi, se_hi) = sols[1].y0_mean_se();
            let (lo2, _) = sols[2].y0_mean_se();
            let (hi2, _) = sols[3].y0_mean_se();
            // post-exit Z residual of the stopped equation, and the noise
            // floor a zero conditional expectation leaves in the fit
            let mut z_acc = 0.0;
            let mut z_n = 0usize;
            for i in 0..m {
                for k in exits.tau_idx[i]..states.grid.n_steps {
                    z_acc += sols[0].z_at(i, k).iter().map(|a| a.abs()).sum::<f64>();
                    z_n += 1;
                }
            }
            let t_mean = term_lo.iter().sum::<f64>() / m as f64;
            let t_std = (term_lo
                .iter()
                .map(|v| (v - t_mean) * (v - t_mean))
                .sum::<f64>()
                / m as f64)
                .sqrt();
            let p_feat = basis.n_features(cs.k) as f64;
            let z_floor = 3.0
                * (t_mean.abs() + t_std)
                * (p_feat / (m as f64 * states.grid.dt())).sqrt();
            Ok(PairOut {
                lower: lo,
                upper: hi,
                lower_wide: lo2,
                upper_wide: hi2,
                se: 0.5 * (se_lo + se_hi),
                z_post: if z_n > 0 { z_acc / z_n as f64 } else { 0.0 },
                z_floor,
            })
        })
        .collect();

    let n_ctrl = controls.items.len();
    let mut per_pair = Vec::with_capacity(pairs.len());
    let mut table = Vec::with_capacity(pairs.len());
    for (idx, out) in outs.into_iter().enumerate() {
        let o = out?;
        let (si, cj) = pairs[idx];
        per_pair.push(PairBracket {
            strategy: strategies.items[si].label.clone(),
            control: controls.items[cj].label.clone(),
            lower: o.lower,
            upper: o.upper,
            std_err: o.se,
        });
        table.push(o);
    }

    // min-max (or max-min) across the pair table for all four terminals
    let reduce = |get: &dyn Fn(&PairOut) -> f64| -> (f64, f64) {
        let mut outer: Option<(f64, f64)> = None;
        for si in 0..strategies.items.len() {
            let mut inner: Option<(f64, f64)> = None;
            for cj in 0..n_ctrl {
                let o = &table[si * n_ctrl + cj];
                let v = get(o);
                let better = match (role, inner) {
                    (_, None) => true,
                    (ControlledBy::PlayerI, Some((iv, _))) => v > iv,
                    (ControlledBy::PlayerII, Some((iv, _))) => v < iv,
                };
                if better {
                    inner = Some((v, o.se));
                }
            }
            let (iv, ise) = inner.unwrap();
            let better = match (role, outer) {
                (_, None) => true,
                (ControlledBy::PlayerI, Some((ov, _))) => iv < ov,
                (ControlledBy::PlayerII, Some((ov, _))) => iv > ov,
            };
            if better {
                outer = Some((iv, ise));
            }
        }
        outer.unwrap()
    };
    let (lower, se_lo) = reduce(&|o| o.lower);
    let (upper, se_hi) = reduce(&|o| o.upper);
    let (lower_wide, _) = reduce(&|o| o.lower_wide);
    let (upper_wide, _) = reduce(&|o| o.upper_wide);

    // widening the margin must widen the bracket (comparison theorem);
    // allow only floating-point slack
    if lower_wide > lower + 1e-9 || upper_wide < upper - 1e-9 {
        return Err(Error::PreconditionViolated(format!(
            "bracket failed to widen with epsilon: lower {lower} -> {lower_wide}, upper {upper} -> {upper_wide}"
        )));
    }

    let tol_mc = 4.0 * (0.5 * (se_lo * se_lo + se_hi * se_hi)).sqrt();
    let z_post_mean = {
        let total: f64 = table.iter().map(|o| o.z_post).sum();
        total / table.len() as f64
    };
    let z_floor = table.iter().map(|o| o.z_floor).fold(0.0, f64::max);
    let pass = lower - tol_mc <= w_hat && w_hat <= upper + tol_mc;
    Ok(DppReport {
        lower,
        upper,
        w_hat,
        epsilon,
        delta,
        tol_mc,
        pass,
        per_pair,
        post_exit_z_mean: z_post_mean,
        post_exit_z_floor: z_floor,
    })
}

/// Weak dynamic programming bracket for the strategy-first minimizing
/// player: `minmax Y(tau, phi) <= w1 <= minmax Y(tau, phi_tilde)`.
#[allow(clippy::too_many_arguments)]
pub fn check_dpp_w1(
    cs: &CoefficientSet,
    t0: f64,
    x: &[f64],
    delta: f64,
    strategies: &StrategyClass,
    controls: &ControlClass,
    value_grid: &ValueGrid,
    epsilon: f64,
    bundle: &PathBundle,
    basis: &BasisSpec,
) -> Result<DppReport> {
    let w_hat = crate::game_values::estimate_w1(cs, t0, x, strategies, controls, bundle, basis)?;
    check_dpp(
        cs,
        t0,
        x,
        delta,
        strategies,
        controls,
        value_grid,
        epsilon,
        bundle,
        basis,
        w_hat.value,
        ControlledBy::PlayerI,
    )
}

/// Mirror-image bracket for the strategy-first maximizing player.
#[allow(clippy::too_many_arguments)]
pub fn check_dpp_w2(
    cs: &CoefficientSet,
    t0: f64,
    x: &[f64],
    delta: f64,
    strategies: &StrategyClass,
    controls: &ControlClass,
    value_grid: &ValueGrid,
    epsilon: f64,
    bundle: &PathBundle,
    basis: &BasisSpec,
) -> Result<DppReport> {
    let w_hat = crate::game_values::estimate_w2(cs, t0, x, strategies, controls, bundle, basis)?;
    check_dpp(
        cs,
        t0,
        x,
        delta,
        strategies,
        controls,
        value_grid,
        epsilon,
        bundle,
        basis,
        w_hat.value,
        ControlledBy::PlayerII,
    )
}

/// Estimate the value on a `(t, x)` grid with a shared bundle, for sandwich
/// construction. `role` picks which priority value is tabulated.
#[allow(clippy::too_many_arguments)]
pub fn tabulate_value_grid(
    cs: &CoefficientSet,
    t_nodes: &[f64],
    x_nodes: &[f64],
    strategies: &StrategyClass,
    controls: &ControlClass,
    bundle: &PathBundle,
    basis: &BasisSpec,
    role: ControlledBy,
) -> Result<ValueGrid> {
    let mut values = Vec::with_capacity(t_nodes.len() * x_nodes.len());
    let mut worst_se = 0.0f64;
    for &t in t_nodes {
        for &xv in x_nodes {
            let est = match role {
                ControlledBy::PlayerI => crate::game_values::estimate_w1(
                    cs, t, &[xv], strategies, controls, bundle, basis,
                )?,
                ControlledBy::PlayerII => crate::game_values::estimate_w2(
                    cs, t, &[xv], strategies, controls, bundle, basis,
                )?,
            };
            values.push(est.value);
            worst_se = worst_se.max(est.std_err);
        }
    }
    ValueGrid::new(t_nodes.to_vec(), x_nodes.to_vec(), values, worst_se)
}
