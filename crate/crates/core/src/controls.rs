//! Discretized admissible controls and non-anticipative strategies.
//!
//! Strategies are instantaneous feedback maps `(step, state, opponent
//! control) -> response`; the response at step `k` depends on nothing past
//! `k`, so non-anticipativity holds by construction. Pasting operators
//! splice control paths along per-path stopping indices or along an event
//! partition.

use crate::error::{Error, Result};
use crate::mc_paths::TimeGrid;
use crate::model::{CoefficientSet, ControlSpace};
use std::sync::Arc;

/// Realized control values per `(path, step)`.
#[derive(Clone, Debug)]
pub struct ControlPath {
    pub grid: TimeGrid,
    pub space: ControlSpace,
    pub m_paths: usize,
    values: Vec<f64>,
}

impl ControlPath {
    pub fn new(
        grid: TimeGrid,
        space: ControlSpace,
        m_paths: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let dim = space.dim;
        if values.len() != m_paths * grid.n_steps * dim {
            return Err(Error::GridMismatch {
                context: "control value array has the wrong shape".into(),
            });
        }
        let path = ControlPath {
            grid,
            space,
            m_paths,
            values,
        };
        for i in 0..path.m_paths {
            for k in 0..path.grid.n_steps {
                if !path.space.contains(path.value(i, k)) {
                    return Err(Error::PreconditionViolated(format!(
                        "control at path {i}, step {k} leaves its space"
                    )));
                }
            }
        }
        Ok(path)
    }

    pub fn constant(grid: &TimeGrid, space: &ControlSpace, m_paths: usize, value: &[f64]) -> Result<Self> {
        let n = grid.n_steps;
        let mut values = Vec::with_capacity(m_paths * n * space.dim);
        for _ in 0..m_paths * n {
            values.extend_from_slice(value);
        }
        ControlPath::new(grid.clone(), space.clone(), m_paths, values)
    }

    #[inline]
    pub fn value(&self, path: usize, step: usize) -> &[f64] {
        let dim = self.space.dim;
        let o = (path * self.grid.n_steps + step) * dim;
        &self.values[o..o + dim]
    }

    pub fn raw(&self) -> &[f64] {
        &self.values
    }
}

type ControlMap = Arc<dyn Fn(usize, &[f64]) -> Vec<f64> + Send + Sync>;
type StrategyMap = Arc<dyn Fn(usize, &[f64], &[f64]) -> Vec<f64> + Send + Sync>;

/// Deterministic feedback control `(step, state) -> control value`.
#[derive(Clone)]
pub struct FeedbackControl {
    pub label: String,
    pub space: ControlSpace,
    pub map: ControlMap,
}

impl FeedbackControl {
    pub fn constant(label: impl Into<String>, space: ControlSpace, value: Vec<f64>) -> Self {
        FeedbackControl {
            label: label.into(),
            space,
            map: Arc::new(move |_k, _x| value.clone()),
        }
    }

    pub fn eval(&self, step: usize, x: &[f64]) -> Vec<f64> {
        (self.map)(step, x)
    }
}

/// Feedback strategy `(step, state, opponent value) -> response`, with the
/// growth certificate `gauge(out) <= kappa + growth_c * gauge(in)`.
#[derive(Clone)]
pub struct FeedbackStrategy {
    pub label: String,
    pub space: ControlSpace,
    pub growth_c: f64,
    pub kappa: f64,
    pub map: StrategyMap,
}

impl FeedbackStrategy {
    pub fn constant(label: impl Into<String>, space: ControlSpace, kappa: f64, value: Vec<f64>) -> Self {
        let gauge = space.gauge(&value);
        FeedbackStrategy {
            label: label.into(),
            space,
            growth_c: (gauge / kappa).max(0.0).max(1.0),
            kappa,
            map: Arc::new(move |_k, _x, _u| value.clone()),
        }
    }

    /// Mirror response `v = u` (requires equal player dimensions).
    pub fn mirror(label: impl Into<String>, space: ControlSpace, kappa: f64) -> Self {
        FeedbackStrategy {
            label: label.into(),
            space,
            growth_c: 1.0,
            kappa,
            map: Arc::new(|_k, _x, u| u.to_vec()),
        }
    }

    /// Sign-flipped response `v = -u`.
    pub fn negate(label: impl Into<String>, space: ControlSpace, kappa: f64) -> Self {
        FeedbackStrategy {
            label: label.into(),
            space,
            growth_c: 1.0,
            kappa,
            map: Arc::new(|_k, _x, u| u.iter().map(|a| -a).collect()),
        }
    }

    pub fn eval(&self, step: usize, x: &[f64], opp: &[f64]) -> Vec<f64> {
        (self.map)(step, x, opp)
    }
}

#[derive(Clone)]
pub struct ControlClass {
    pub items: Vec<FeedbackControl>,
}

impl std::fmt::Debug for ControlClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list()
            .entries(self.items.iter().map(|i| &i.label))
            .finish()
    }
}

#[derive(Clone)]
pub struct StrategyClass {
    pub items: Vec<FeedbackStrategy>,
}

impl std::fmt::Debug for StrategyClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list()
            .entries(self.items.iter().map(|i| &i.label))
            .finish()
    }
}

fn unique_labels<'a>(labels: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for l in labels {
        if !seen.insert(l) {
            return Err(Error::PreconditionViolated(format!(
                "duplicate class label `{l}`"
            )));
        }
    }
    Ok(())
}

impl ControlClass {
    pub fn new(items: Vec<FeedbackControl>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyGrid("control class"));
        }
        unique_labels(items.iter().map(|i| i.label.as_str()))?;
        Ok(ControlClass { items })
    }
}

impl StrategyClass {
    pub fn new(items: Vec<FeedbackStrategy>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyGrid("strategy class"));
        }
        unique_labels(items.iter().map(|i| i.label.as_str()))?;
        Ok(StrategyClass { items })
    }
}

/// Splice two control paths along per-path stopping indices:
/// `out[i][k] = mu1[i][k]` for `k < tau[i]`, else `mu2[i][k]`.
pub fn paste_controls(mu1: &ControlPath, mu2: &ControlPath, tau: &[usize]) -> Result<ControlPath> {
    if mu1.grid != mu2.grid {
        return Err(Error::GridMismatch {
            context: "paste_controls".into(),
        });
    }
    if !mu1.space.same_shape(&mu2.space) {
        return Err(Error::SpaceMismatch);
    }
    if tau.len() != mu1.m_paths || mu2.m_paths != mu1.m_paths {
        return Err(Error::PreconditionViolated(
            "tau length must equal the path count".into(),
        ));
    }
    let n = mu1.grid.n_steps;
    if tau.iter().any(|&t| t > n) {
        return Err(Error::PreconditionViolated(
            "stopping index beyond the grid".into(),
        ));
    }
    let dim = mu1.space.dim;
    let mut values = Vec::with_capacity(mu1.m_paths * n * dim);
    for i in 0..mu1.m_paths {
        for k in 0..n {
            let src = if k < tau[i] { mu1 } else { mu2 };
            values.extend_from_slice(src.value(i, k));
        }
    }
    ControlPath::new(mu1.grid.clone(), mu1.space.clone(), mu1.m_paths, values)
}

/// Recombine control paths along a partition of the path set: path `i`
/// takes its values from the unique item whose mask contains it.
pub fn paste_by_partition(items: &[(Vec<bool>, &ControlPath)]) -> Result<ControlPath> {
    let (first_mask, first) = items.first().ok_or(Error::EmptyGrid("partition"))?;
    let m = first.m_paths;
    for (mask, cp) in items {
        if cp.grid != first.grid {
            return Err(Error::GridMismatch {
                context: "paste_by_partition".into(),
            });
        }
        if !cp.space.same_shape(&first.space) {
            return Err(Error::SpaceMismatch);
        }
        if mask.len() != m || cp.m_paths != m {
            return Err(Error::PreconditionViolated(
                "mask length must equal the path count".into(),
            ));
        }
    }
    let _ = first_mask;
    let n = first.grid.n_steps;
    let dim = first.space.dim;
    let mut values = vec![0.0; m * n * dim];
    for i in 0..m {
        let mut count = 0;
        for (mask, cp) in items {
            if mask[i] {
                count += 1;
                let src = &cp.raw()[i * n * dim..(i + 1) * n * dim];
                values[i * n * dim..(i + 1) * n * dim].copy_from_slice(src);
            }
        }
        if count != 1 {
            return Err(Error::NotAPartition { path: i, count });
        }
    }
    ControlPath::new(first.grid.clone(), first.space.clone(), m, values)
}

/// The canonical responding strategy built from a coefficient set's
/// neutralizer: respond with the base point inside the kappa-ball and with
/// `psi(t_k, u)` outside. Its growth constant is kappa.
pub fn neutralizer_strategy(cs: &CoefficientSet, grid: &TimeGrid) -> Result<FeedbackStrategy> {
    let psi = cs.psi.clone().ok_or(Error::MissingNeutralizer)?;
    let u_space = cs.u_space.clone();
    let v0 = cs.v_space.base_point.clone();
    let kappa = cs.kappa;
    let grid = grid.clone();
    Ok(FeedbackStrategy {
        label: "neutralizer".into(),
        space: cs.v_space.clone(),
        growth_c: kappa,
        kappa,
        map: Arc::new(move |k, _x, u| {
            if u_space.gauge(u) < kappa {
                v0.clone()
            } else {
                psi(grid.node(k), u)
            }
        }),
    })
}

/// Evaluate a strategy along realized opponent controls and states, checking
/// the growth certificate at every visited triple.
pub fn evaluate_strategy(
    strategy: &FeedbackStrategy,
    opponent: &ControlPath,
    states: &crate::sde_engine::StatePaths,
) -> Result<ControlPath> {
    if opponent.grid != states.grid {
        return Err(Error::GridMismatch {
            context: "evaluate_strategy".into(),
        });
    }
    let m = opponent.m_paths;
    let n = opponent.grid.n_steps;
    let dim = strategy.space.dim;
    let mut values = Vec::with_capacity(m * n * dim);
    for i in 0..m {
        for k in 0..n {
            let u = opponent.value(i, k);
            let out = strategy.eval(k, states.state(i, k), u);
            let bound = strategy.kappa + strategy.growth_c * opponent.space.gauge(u);
            let gauge = strategy.space.gauge(&out);
            if gauge > bound + 1e-12 {
                return Err(Error::GrowthViolated {
                    path: i,
                    step: k,
                    gauge,
                    bound,
                });
            }
            values.extend_from_slice(&out);
        }
    }
    ControlPath::new(
        opponent.grid.clone(),
        strategy.space.clone(),
        m,
        values,
    )
}

/// Piecewise-constant dyadic approximation of the measurable selection that
/// drives the scalar coupling example: on each dyadic cell in `(t, u)` the
/// value is a sampled infimum of `V(t', u') = min { v in [-kappa|u'|,
/// kappa|u'|] : phi(t', u', v) = 0 }`. Cell samples of finer levels are
/// accumulated into every coarser level's sample set, so the level values
/// are monotone nondecreasing by construction, exactly as the underlying
/// infima are.
#[derive(Clone)]
pub struct DyadicNeutralizer {
    pub phi: crate::model::PhiFn,
    pub kappa: f64,
    pub level: usize,
    pub horizon: f64,
}

/// Deepest supported dyadic level; sampling always accumulates down to this
/// depth so separately constructed levels stay comparable.
pub const MAX_DYADIC_LEVEL: usize = 14;
const BASE_LEVEL: usize = 16;
/// Per-cell sample resolution: an 8 x 8 lattice, 64 points.
const CELL_SPLIT: usize = 8;

pub fn construct_neutralizer(
    phi: crate::model::PhiFn,
    kappa: f64,
    n_levels: usize,
    horizon: f64,
) -> Result<DyadicNeutralizer> {
    if n_levels == 0 || n_levels > MAX_DYADIC_LEVEL {
        return Err(Error::LevelTooDeep {
            level: n_levels,
            max: MAX_DYADIC_LEVEL,
        });
    }
    Ok(DyadicNeutralizer {
        phi,
        kappa,
        level: n_levels,
        horizon,
    })
}

impl DyadicNeutralizer {
    /// Lowest zero of `phi(t, u, .)` on `[-kappa|u|, kappa|u|]` via a grid
    /// scan for the first sign change followed by bisection.
    pub fn lowest_zero(&self, t: f64, u: f64) -> Result<f64> {
        let r = self.kappa * u.abs();
        let phi = &self.phi;
        if r == 0.0 {
            return if phi(t, u, 0.0) == 0.0 {
                Ok(0.0)
            } else {
                Err(Error::NoZeroFound { t, u, radius: r })
            };
        }
        let n = 128usize;
        let mut prev_v = -r;
        let mut prev_val = phi(t, u, prev_v);
        if prev_val == 0.0 {
            return Ok(prev_v);
        }
        for i in 1..=n {
            let v = -r + 2.0 * r * i as f64 / n as f64;
            let val = phi(t, u, v);
            if val == 0.0 {
                return Ok(v);
            }
            if prev_val.signum() != val.signum() {
                // bisect [prev_v, v] down to 1e-10 in v
                let (mut a, mut fa, mut b) = (prev_v, prev_val, v);
                while b - a > 1e-10 {
                    let mid = 0.5 * (a + b);
                    let fm = phi(t, u, mid);
                    if fm == 0.0 {
                        return Ok(mid);
                    }
                    if fa.signum() != fm.signum() {
                        b = mid;
                    } else {
                        a = mid;
                        fa = fm;
                    }
                }
                return Ok(0.5 * (a + b));
            }
            prev_v = v;
            prev_val = val;
        }
        Err(Error::NoZeroFound { t, u, radius: r })
    }

    /// Sample points of the level-`m` cell containing `(t, u)`: the dyadic
    /// sub-lattice of spacing `cell/CELL_SPLIT`.
    fn cell_samples(&self, m: usize, t: f64, u: f64) -> Vec<(f64, f64)> {
        let two_m = (1u64 << m) as f64;
        let t_w = self.horizon / two_m;
        let u_w = 1.0 / two_m;
        let i = ((t / t_w).floor().max(0.0) as u64).min((1u64 << m) - 1);
        let j = (u / u_w).floor();
        let t_lo = i as f64 * t_w;
        let u_lo = j * u_w;
        let mut out = Vec::with_capacity(CELL_SPLIT * CELL_SPLIT);
        for a in 0..CELL_SPLIT {
            for b in 0..CELL_SPLIT {
                out.push((
                    t_lo + a as f64 * t_w / CELL_SPLIT as f64,
                    u_lo + b as f64 * u_w / CELL_SPLIT as f64,
                ));
            }
        }
        out
    }

    /// Values for levels `1..=max_level` at once (suffix minima over the
    /// accumulated sample chain).
    pub fn eval_levels(&self, t: f64, u: f64, max_level: usize) -> Result<Vec<f64>> {
        if max_level == 0 || max_level > MAX_DYADIC_LEVEL {
            return Err(Error::LevelTooDeep {
                level: max_level,
                max: MAX_DYADIC_LEVEL,
            });
        }
        let mut per_level = vec![f64::INFINITY; BASE_LEVEL + 1];
        for m in 1..=BASE_LEVEL {
            let mut lo = f64::INFINITY;
            for (ts, us) in self.cell_samples(m, t, u) {
                lo = lo.min(self.lowest_zero(ts, us)?);
            }
            per_level[m] = lo;
        }
        // suffix minimum: level n sees its own cell samples plus all finer
        let mut suffix = f64::INFINITY;
        let mut acc = vec![f64::INFINITY; BASE_LEVEL + 1];
        for m in (1..=BASE_LEVEL).rev() {
            suffix = suffix.min(per_level[m]);
            acc[m] = suffix;
        }
        Ok(acc[1..=max_level].to_vec())
    }

    pub fn eval(&self, t: f64, u: f64) -> Result<f64> {
        Ok(*self.eval_levels(t, u, self.level)?.last().unwrap())
    }

    /// Wrap as a coefficient-set neutralizer. The sign condition has been
    /// validated when the coefficient set was built, so a missing zero here
    /// is a programming error.
    pub fn as_psi(&self) -> crate::model::NeutralizerFn {
        let this = self.clone();
        Arc::new(move |t, u| {
            vec![this
                .eval(t, u[0])
                .expect("sign condition was validated at build time")]
        })
    }
}
