//! Priority-value estimation over finite feedback classes.
//!
//! `w1` answers "what can player I guarantee when player II commits to a
//! strategy first": minimize over responding strategies the maximum payoff
//! over player-I controls. `w2` is the mirror image. Common random numbers
//! across every pair keep the min-max comparisons exact and the selection
//! deterministic (ties break toward the lower label index).

use crate::bsde_engine::{payoff_from_states, BasisSpec};
use crate::controls::{ControlClass, StrategyClass};
use crate::error::{Error, Result};
use crate::mc_paths::{shift_by, PathBundle};
use crate::model::CoefficientSet;
use crate::sde_engine::{simulate_feedback, ControlledBy};

#[derive(Clone, Debug, serde::Serialize)]
pub struct ValueEstimate {
    pub t0: f64,
    pub x: Vec<f64>,
    pub value: f64,
    pub std_err: f64,
    pub argmin_strategy: String,
    pub argmax_control: String,
    pub class_sizes: (usize, usize),
}

/// Payoff of every (strategy, control) pair under common random numbers.
/// Row `si`, column `cj`.
fn pair_payoffs(
    cs: &CoefficientSet,
    t0: f64,
    x: &[f64],
    strategies: &StrategyClass,
    controls: &ControlClass,
    role: ControlledBy,
    bundle: &PathBundle,
    basis: &BasisSpec,
) -> Result<Vec<Vec<(f64, f64)>>> {
    let start_idx = bundle.grid.index_of(t0).ok_or_else(|| Error::GridMismatch {
        context: format!("t0={t0} is not a node of the bundle grid"),
    })?;
    let pairs: Vec<(usize, usize)> = (0..strategies.items.len())
        .flat_map(|si| (0..controls.items.len()).map(move |cj| (si, cj)))
        .collect();
    // pairs run sequentially: each simulate/solve is already parallel over
    // paths, and sequential pairs bound the peak memory
    let flat: Vec<Result<(f64, f64)>> = pairs
        .iter()
        .map(|&(si, cj)| {
            let strat = &strategies.items[si];
            let ctrl = &controls.items[cj];
            let (states, mu, nu) =
                simulate_feedback(cs, x, ctrl, strat, role, bundle, start_idx)?;
            payoff_from_states(cs, &states, &mu, &nu, bundle, basis)
        })
        .collect();
    let mut table = vec![vec![(0.0, 0.0); controls.items.len()]; strategies.items.len()];
    for (idx, res) in flat.into_iter().enumerate() {
        let (si, cj) = pairs[idx];
        table[si][cj] = res?;
    }
    Ok(table)
}

/// `min` over responding strategies of `max` over player-I controls of the
/// payoff. Strict comparisons keep the first (lowest-index) extremizer.
pub fn estimate_w1(
    cs: &CoefficientSet,
    t0: f64,
    x: &[f64],
    strategies: &StrategyClass,
    controls: &ControlClass,
    bundle: &PathBundle,
    basis: &BasisSpec,
) -> Result<ValueEstimate> {
    let table = pair_payoffs(
        cs,
        t0,
        x,
        strategies,
        controls,
        ControlledBy::PlayerI,
        bundle,
        basis,
    )?;
    let mut best: Option<(usize, usize, f64, f64)> = None;
    for (si, row) in table.iter().enumerate() {
        let mut inner: Option<(usize, f64, f64)> = None;
        for (cj, &(val, se)) in row.iter().enumerate() {
            if inner.map_or(true, |(_, v, _)| val > v) {
                inner = Some((cj, val, se));
            }
        }
        let (cj, val, se) = inner.unwrap();
        if best.map_or(true, |(_, _, v, _)| val < v) {
            best = Some((si, cj, val, se));
        }
    }
    let (si, cj, value, std_err) = best.unwrap();
    Ok(ValueEstimate {
        t0,
        x: x.to_vec(),
        value,
        std_err,
        argmin_strategy: strategies.items[si].label.clone(),
        argmax_control: controls.items[cj].label.clone(),
        class_sizes: (strategies.items.len(), controls.items.len()),
    })
}

/// `max` over player-I strategies of `min` over player-II controls.
pub fn estimate_w2(
    cs: &CoefficientSet,
    t0: f64,
    x: &[f64],
    strategies: &StrategyClass,
    controls: &ControlClass,
    bundle: &PathBundle,
    basis: &BasisSpec,
) -> Result<ValueEstimate> {
    let table = pair_payoffs(
        cs,
        t0,
        x,
        strategies,
        controls,
        ControlledBy::PlayerII,
        bundle,
        basis,
    )?;
    let mut best: Option<(usize, usize, f64, f64)> = None;
    for (si, row) in table.iter().enumerate() {
        let mut inner: Option<(usize, f64, f64)> = None;
        for (cj, &(val, se)) in row.iter().enumerate() {
            if inner.map_or(true, |(_, v, _)| val < v) {
                inner = Some((cj, val, se));
            }
        }
        let (cj, val, se) = inner.unwrap();
        if best.map_or(true, |(_, _, v, _)| val > v) {
            best = Some((si, cj, val, se));
        }
    }
    let (si, cj, value, std_err) = best.unwrap();
    Ok(ValueEstimate {
        t0,
        x: x.to_vec(),
        value,
        std_err,
        argmin_strategy: strategies.items[si].label.clone(),
        argmax_control: controls.items[cj].label.clone(),
        class_sizes: (strategies.items.len(), controls.items.len()),
    })
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct BoundsReport {
    pub c_kappa: f64,
    pub c0: f64,
    pub max_residual_ratio: f64,
    pub pass: bool,
}

/// Fit `|w| <= c_kappa + c0 |x|^{2/p}` by least squares over the estimates'
/// `|x|` ladder; residuals must stay within 10% of the fitted envelope.
pub fn bounds_check(estimates: &[ValueEstimate], cs: &CoefficientSet) -> Result<BoundsReport> {
    if estimates.len() < 3 {
        return Err(Error::PreconditionViolated(
            "bounds check needs at least 3 estimates".into(),
        ));
    }
    for e in estimates {
        if !e.value.is_finite() {
            return Err(Error::NonFiniteValue { step: 0 });
        }
    }
    let hol = 2.0 / cs.p;
    let xs: Vec<f64> = estimates
        .iter()
        .map(|e| e.x.iter().map(|a| a * a).sum::<f64>().sqrt().powf(hol))
        .collect();
    let ys: Vec<f64> = estimates.iter().map(|e| e.value.abs()).collect();
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sxx: f64 = xs.iter().map(|a| a * a).sum();
    let sy: f64 = ys.iter().sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(a, b)| a * b).sum();
    let det = n * sxx - sx * sx;
    let (c_kappa, c0) = if det.abs() > 1e-14 {
        (
            ((sxx * sy - sx * sxy) / det).max(0.0),
            ((n * sxy - sx * sy) / det).max(0.0),
        )
    } else {
        (sy / n, 0.0)
    };
    let mut worst = 0.0f64;
    for ((xi, yi), est) in xs.iter().zip(&ys).zip(estimates) {
        let env = c_kappa + c0 * xi;
        let resid = (yi - env).abs();
        // the envelope can vanish (zero intercept at x = 0); the relative
        // test needs the estimate's own noise as a floor
        let scale = (env.abs() + 4.0 * est.std_err).max(1e-12);
        worst = worst.max(resid / scale);
    }
    Ok(BoundsReport {
        c_kappa,
        c0,
        max_residual_ratio: worst,
        pass: worst <= 0.10,
    })
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct HolderReport {
    /// `|w(x1) - w(x2)| / |x1 - x2|^{2/p}` per pair, ordered by |x1 - x2|.
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    pub pass: bool,
}

/// Hoelder regularity in the state: ratios along a distance ladder must not
/// grow by more than a factor 2 between adjacent rungs (up to the payoff
/// noise floor).
#[allow(clippy::too_many_arguments)]
pub fn holder_check(
    cs: &CoefficientSet,
    t0: f64,
    x_pairs: &[(Vec<f64>, Vec<f64>)],
    strategies: &StrategyClass,
    controls: &ControlClass,
    bundle: &PathBundle,
    basis: &BasisSpec,
) -> Result<HolderReport> {
    if x_pairs.len() < 4 {
        return Err(Error::PreconditionViolated(
            "holder check needs at least 4 pairs".into(),
        ));
    }
    let hol = 2.0 / cs.p;
    let mut rows: Vec<(f64, f64, f64)> = Vec::new(); // (dist, ratio, noise)
    for (xa, xb) in x_pairs {
        let wa = estimate_w1(cs, t0, xa, strategies, controls, bundle, basis)?;
        let wb = estimate_w1(cs, t0, xb, strategies, controls, bundle, basis)?;
        let dist: f64 = xa
            .iter()
            .zip(xb)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if dist == 0.0 {
            // identical computation: the difference must vanish exactly
            if wa.value != wb.value {
                return Err(Error::PreconditionViolated(
                    "identical states produced different values".into(),
                ));
            }
            continue;
        }
        let denom = dist.powf(hol);
        rows.push((
            dist,
            (wa.value - wb.value).abs() / denom,
            4.0 * (wa.std_err + wb.std_err) / denom,
        ));
    }
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let ratios: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let mut pass = true;
    for w in rows.windows(2) {
        let floor = w[1].2;
        if w[1].1 > 2.0 * w[0].1 + floor {
            pass = false;
        }
    }
    let max_ratio = ratios.iter().cloned().fold(0.0, f64::max);
    Ok(HolderReport {
        ratios,
        max_ratio,
        pass,
    })
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct DeterminismReport {
    pub values: Vec<f64>,
    pub spread: f64,
    pub pooled_std_err: f64,
    pub shift_invariant: bool,
    pub pass: bool,
}

/// Re-estimate the value under several seeds; the spread must stay within
/// four pooled standard errors. A zero Cameron-Martin shift is also applied
/// to the first bundle and must leave the estimate bit-identical.
#[allow(clippy::too_many_arguments)]
pub fn determinism_check(
    cs: &CoefficientSet,
    t0: f64,
    x: &[f64],
    strategies: &StrategyClass,
    controls: &ControlClass,
    seeds: &[u64],
    grid: &crate::mc_paths::TimeGrid,
    d: usize,
    m_paths: usize,
    basis: &BasisSpec,
) -> Result<DeterminismReport> {
    if seeds.len() < 3 {
        return Err(Error::PreconditionViolated(
            "determinism check needs at least 3 seeds".into(),
        ));
    }
    let mut values = Vec::with_capacity(seeds.len());
    let mut var_sum = 0.0;
    let mut first_bundle: Option<PathBundle> = None;
    let mut first_value = 0.0;
    for (i, &seed) in seeds.iter().enumerate() {
        let bundle = crate::mc_paths::generate(grid, d, m_paths, seed)?;
        let est = estimate_w1(cs, t0, x, strategies, controls, &bundle, basis)?;
        values.push(est.value);
        var_sum += est.std_err * est.std_err;
        if i == 0 {
            first_bundle = Some(bundle);
            first_value = est.value;
        }
    }
    let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - values.iter().cloned().fold(f64::INFINITY, f64::min);
    let pooled = (var_sum / seeds.len() as f64).sqrt();

    // identity shift: increments before t0 are never consumed, so the
    // estimate must not move at all
    let bundle = first_bundle.unwrap();
    let h = vec![vec![0.0; d]; grid.n_steps + 1];
    let shifted = shift_by(&bundle, &h)?;
    let est = estimate_w1(cs, t0, x, strategies, controls, &shifted, basis)?;
    let shift_invariant = est.value == first_value;

    let pass = spread <= 4.0 * pooled.max(1e-15) && shift_invariant;
    Ok(DeterminismReport {
        values,
        spread,
        pooled_std_err: pooled,
        shift_invariant,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controls::{FeedbackControl, FeedbackStrategy};
    use crate::mc_paths::{generate, TimeGrid};
    use crate::model::{ControlSpace, DriftFn};
    use std::sync::Arc;

    /// b = u - v, sigma = 0, f = 0, g = x on bounded scalar controls.
    fn mirror_game() -> CoefficientSet {
        let b: DriftFn = Arc::new(|_t, _x, u, v, out| out[0] = u[0] - v[0]);
        CoefficientSet {
            k: 1,
            d: 1,
            b,
            sigma: Arc::new(|_, _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]| out[0] = 0.0),
            f: Arc::new(|_, _: &[f64], _, _: &[f64], _: &[f64], _: &[f64]| 0.0),
            g: Arc::new(|x: &[f64]| x[0]),
            gamma: 2.0,
            kappa: 1.0,
            p: 2.0,
            u_space: ControlSpace::ball(1, 1.0),
            v_space: ControlSpace::ball(1, 1.0),
            psi: Some(Arc::new(|_t, u| u.to_vec())),
            psi_tilde: Some(Arc::new(|_t, v| v.to_vec())),
        }
    }

    fn mirror_classes(cs: &CoefficientSet) -> (StrategyClass, ControlClass) {
        let vs = cs.v_space.clone();
        let us = cs.u_space.clone();
        let strategies = StrategyClass::new(vec![
            FeedbackStrategy::mirror("mirror", vs.clone(), cs.kappa),
            FeedbackStrategy::constant("minus_one", vs.clone(), cs.kappa, vec![-1.0]),
            FeedbackStrategy::constant("plus_one", vs, cs.kappa, vec![1.0]),
        ])
        .unwrap();
        let controls = ControlClass::new(vec![
            FeedbackControl::constant("u_plus", us.clone(), vec![1.0]),
            FeedbackControl::constant("u_minus", us, vec![-1.0]),
        ])
        .unwrap();
        (strategies, controls)
    }

    #[test]
    fn mirror_game_value_is_zero() {
        let cs = mirror_game();
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let bundle = generate(&grid, 1, 64, 7).unwrap();
        let (strategies, controls) = mirror_classes(&cs);
        let est = estimate_w1(
            &cs,
            0.0,
            &[0.0],
            &strategies,
            &controls,
            &bundle,
            &BasisSpec::default(),
        )
        .unwrap();
        assert!(est.value.abs() < 1e-10, "w1 = {}", est.value);
        assert_eq!(est.argmin_strategy, "mirror");

        let est2 = estimate_w2(
            &cs,
            0.0,
            &[0.0],
            &strategies,
            &controls,
            &bundle,
            &BasisSpec::default(),
        )
        .unwrap();
        assert!(est2.value.abs() < 1e-10, "w2 = {}", est2.value);
    }

    #[test]
    fn singleton_classes_reduce_to_payoff() {
        let cs = mirror_game();
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let bundle = generate(&grid, 1, 32, 9).unwrap();
        let strategies = StrategyClass::new(vec![FeedbackStrategy::constant(
            "v0",
            cs.v_space.clone(),
            cs.kappa,
            vec![0.5],
        )])
        .unwrap();
        let controls = ControlClass::new(vec![FeedbackControl::constant(
            "u0",
            cs.u_space.clone(),
            vec![1.0],
        )])
        .unwrap();
        let est = estimate_w1(
            &cs,
            0.0,
            &[0.25],
            &strategies,
            &controls,
            &bundle,
            &BasisSpec::default(),
        )
        .unwrap();
        // deterministic drift u - v = 0.5 over [0,1]: terminal = x + 0.5
        assert!((est.value - 0.75).abs() < 1e-10, "value {}", est.value);
    }

    #[test]
    fn duplicate_control_entries_change_nothing() {
        let cs = mirror_game();
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let bundle = generate(&grid, 1, 32, 11).unwrap();
        let (strategies, _) = mirror_classes(&cs);
        let one = ControlClass::new(vec![FeedbackControl::constant(
            "u",
            cs.u_space.clone(),
            vec![1.0],
        )])
        .unwrap();
        let twice = ControlClass::new(vec![
            FeedbackControl::constant("u", cs.u_space.clone(), vec![1.0]),
            FeedbackControl::constant("u_copy", cs.u_space.clone(), vec![1.0]),
        ])
        .unwrap();
        let a = estimate_w1(&cs, 0.0, &[0.0], &strategies, &one, &bundle, &BasisSpec::default())
            .unwrap();
        let b =
            estimate_w1(&cs, 0.0, &[0.0], &strategies, &twice, &bundle, &BasisSpec::default())
                .unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn class_monotonicity() {
        let cs = mirror_game();
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let bundle = generate(&grid, 1, 64, 13).unwrap();
        let (strategies, controls) = mirror_classes(&cs);
        let small_controls =
            ControlClass::new(vec![controls.items[0].clone()]).unwrap();
        let small_strats = StrategyClass::new(vec![strategies.items[1].clone()]).unwrap();

        // larger control class can only raise the inner max
        let w_small = estimate_w1(
            &cs,
            0.0,
            &[0.0],
            &small_strats,
            &small_controls,
            &bundle,
            &BasisSpec::default(),
        )
        .unwrap();
        let w_more_controls = estimate_w1(
            &cs,
            0.0,
            &[0.0],
            &small_strats,
            &controls,
            &bundle,
            &BasisSpec::default(),
        )
        .unwrap();
        assert!(w_more_controls.value >= w_small.value - 1e-15);

        // larger strategy class can only lower the outer min
        let w_more_strats = estimate_w1(
            &cs,
            0.0,
            &[0.0],
            &strategies,
            &small_controls,
            &bundle,
            &BasisSpec::default(),
        )
        .unwrap();
        assert!(w_more_strats.value <= w_small.value + 1e-15);
    }

    #[test]
    fn value_capped_by_neutralizer_row() {
        // with the responding neutralizer in the class, the min-max never
        // exceeds the payoff row of that strategy
        let cs = mirror_game();
        let grid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let bundle = generate(&grid, 1, 64, 17).unwrap();
        let (strategies, controls) = mirror_classes(&cs);
        let neutral = crate::controls::neutralizer_strategy(&cs, &grid).unwrap();
        let with_neutral = StrategyClass::new(
            std::iter::once(neutral.clone())
                .chain(strategies.items.iter().cloned())
                .collect(),
        )
        .unwrap();
        let est = estimate_w1(
            &cs,
            0.0,
            &[0.3],
            &with_neutral,
            &controls,
            &bundle,
            &BasisSpec::default(),
        )
        .unwrap();
        let only_neutral = StrategyClass::new(vec![neutral]).unwrap();
        let row_max = estimate_w1(
            &cs,
            0.0,
            &[0.3],
            &only_neutral,
            &controls,
            &bundle,
            &BasisSpec::default(),
        )
        .unwrap();
        assert!(est.value <= row_max.value + 1e-15);
    }

    #[test]
    fn extremizer_labels_invariant_under_positive_scaling() {
        let cs = mirror_game();
        let scaled = CoefficientSet {
            g: Arc::new(|x: &[f64]| 2.5 * x[0]),
            ..cs.clone()
        };
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let bundle = generate(&grid, 1, 64, 23).unwrap();
        let (strategies, controls) = mirror_classes(&cs);
        let a = estimate_w1(&cs, 0.0, &[0.2], &strategies, &controls, &bundle, &BasisSpec::default())
            .unwrap();
        let b = estimate_w1(
            &scaled,
            0.0,
            &[0.2],
            &strategies,
            &controls,
            &bundle,
            &BasisSpec::default(),
        )
        .unwrap();
        assert_eq!(a.argmin_strategy, b.argmin_strategy);
        assert_eq!(a.argmax_control, b.argmax_control);
    }

    #[test]
    fn negated_game_w2_equals_minus_w1() {
        // flip the payoff sign and swap the players: the max-min of the
        // flipped game is the negated min-max of the original
        let cs = mirror_game();
        let negated = CoefficientSet {
            b: Arc::new(|_t, _x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]| {
                out[0] = v[0] - u[0]
            }),
            g: Arc::new(|x: &[f64]| -x[0]),
            ..cs.clone()
        };
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let bundle = generate(&grid, 1, 128, 29).unwrap();
        let (strategies, controls) = mirror_classes(&cs);
        let w1 = estimate_w1(&cs, 0.0, &[0.4], &strategies, &controls, &bundle, &BasisSpec::default())
            .unwrap();
        let w2 = estimate_w2(
            &negated,
            0.0,
            &[0.4],
            &strategies,
            &controls,
            &bundle,
            &BasisSpec::default(),
        )
        .unwrap();
        assert!(
            (w2.value + w1.value).abs() < 1e-9,
            "w2(negated) = {}, -w1 = {}",
            w2.value,
            -w1.value
        );
    }

    #[test]
    fn frozen_game_determinism_spread_zero() {
        let cs = CoefficientSet {
            b: Arc::new(|_, _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]| out[0] = 0.0),
            ..mirror_game()
        };
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let (strategies, controls) = mirror_classes(&cs);
        let rep = determinism_check(
            &cs,
            0.0,
            &[0.4],
            &strategies,
            &controls,
            &[1, 2, 3],
            &grid,
            1,
            64,
            &BasisSpec::default(),
        )
        .unwrap();
        assert_eq!(rep.spread, 0.0);
        assert!(rep.shift_invariant);
        assert!(rep.pass);
    }
}
