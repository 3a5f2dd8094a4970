//! Game data: coefficient sets `(b, sigma, f, g)` with their structural
//! constants, control-space descriptors, control neutralizers, and sampled
//! validation of the standing growth/Lipschitz assumptions.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::fmt;
use std::sync::Arc;

/// Euclidean control space with a distinguished base point. The gauge of a
/// control is its distance to the base point; `bound`, when present, makes
/// the space the closed ball of that radius (the compact case).
#[derive(Clone, Debug)]
pub struct ControlSpace {
    pub dim: usize,
    pub base_point: Vec<f64>,
    pub bound: Option<f64>,
}

impl ControlSpace {
    pub fn unbounded(dim: usize) -> Self {
        ControlSpace {
            dim,
            base_point: vec![0.0; dim],
            bound: None,
        }
    }

    pub fn ball(dim: usize, radius: f64) -> Self {
        ControlSpace {
            dim,
            base_point: vec![0.0; dim],
            bound: Some(radius),
        }
    }

    /// `[u] = |u - u0|` (Euclidean).
    pub fn gauge(&self, v: &[f64]) -> f64 {
        v.iter()
            .zip(&self.base_point)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.len() == self.dim
            && match self.bound {
                Some(r) => self.gauge(v) <= r + 1e-12,
                None => true,
            }
    }

    pub fn same_shape(&self, other: &ControlSpace) -> bool {
        self.dim == other.dim && self.base_point == other.base_point && self.bound == other.bound
    }
}

pub type DriftFn = Arc<dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type DiffusionFn = Arc<dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type GeneratorFn = Arc<dyn Fn(f64, &[f64], f64, &[f64], &[f64], &[f64]) -> f64 + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type NeutralizerFn = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;

/// The full game datum: state drift `b`, diffusion `sigma` (k x d,
/// row-major), generator `f`, terminal reward `g`, constants and control
/// spaces, plus optional control neutralizers for either player.
#[derive(Clone)]
pub struct CoefficientSet {
    pub k: usize,
    pub d: usize,
    pub b: DriftFn,
    pub sigma: DiffusionFn,
    pub f: GeneratorFn,
    pub g: TerminalFn,
    pub gamma: f64,
    pub kappa: f64,
    pub p: f64,
    pub u_space: ControlSpace,
    pub v_space: ControlSpace,
    pub psi: Option<NeutralizerFn>,
    pub psi_tilde: Option<NeutralizerFn>,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("k", &self.k)
            .field("d", &self.d)
            .field("gamma", &self.gamma)
            .field("kappa", &self.kappa)
            .field("p", &self.p)
            .field("has_psi", &self.psi.is_some())
            .field("has_psi_tilde", &self.psi_tilde.is_some())
            .finish()
    }
}

impl CoefficientSet {
    pub fn drift_into(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) {
        (self.b)(t, x, u, v, out);
    }

    pub fn diffusion_into(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) {
        (self.sigma)(t, x, u, v, out);
    }

    pub fn generator(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64], v: &[f64]) -> f64 {
        (self.f)(t, x, y, z, u, v)
    }

    pub fn terminal(&self, x: &[f64]) -> f64 {
        (self.g)(x)
    }

    pub fn with_psi(mut self, psi: NeutralizerFn) -> Self {
        self.psi = Some(psi);
        self
    }

    pub fn with_psi_tilde(mut self, psi_tilde: NeutralizerFn) -> Self {
        self.psi_tilde = Some(psi_tilde);
        self
    }
}

/// Sample points for assumption validation: the declared grids plus
/// `n_random` uniform draws from their bounding boxes.
#[derive(Clone, Debug)]
pub struct ValidationGrid {
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub n_random: usize,
    pub seed: u64,
}

impl ValidationGrid {
    /// A small default grid for a game with state dimension `k`, noise
    /// dimension `d` and control dimensions taken from the spaces.
    pub fn default_for(cs: &CoefficientSet, x_range: f64) -> Self {
        let axis = |r: f64| vec![-r, -r / 2.0, 0.0, r / 2.0, r];
        let vecs = |dim: usize, r: f64| -> Vec<Vec<f64>> {
            // axis-aligned probes in each coordinate plus the origin
            let mut out = vec![vec![0.0; dim]];
            for c in 0..dim {
                for val in axis(r) {
                    if val != 0.0 {
                        let mut p = vec![0.0; dim];
                        p[c] = val;
                        out.push(p);
                    }
                }
            }
            out
        };
        let ur = cs.u_space.bound.unwrap_or(3.0);
        let vr = cs.v_space.bound.unwrap_or(3.0);
        ValidationGrid {
            t: vec![0.0, 0.5, 1.0],
            x: vecs(cs.k, x_range),
            y: vec![-1.0, 0.0, 1.0],
            z: vecs(cs.d, 1.0),
            u: vecs(cs.u_space.dim, ur),
            v: vecs(cs.v_space.dim, vr),
            n_random: 32,
            seed: 0x5d67,
        }
    }

    fn expanded(&self, cs: &CoefficientSet) -> ValidationGrid {
        let mut g = self.clone();
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        let bbox = |pts: &[Vec<f64>], dim: usize| -> (Vec<f64>, Vec<f64>) {
            let mut lo = vec![f64::INFINITY; dim];
            let mut hi = vec![f64::NEG_INFINITY; dim];
            for p in pts {
                for c in 0..dim {
                    lo[c] = lo[c].min(p[c]);
                    hi[c] = hi[c].max(p[c]);
                }
            }
            (lo, hi)
        };
        let draw = |rng: &mut ChaCha12Rng, lo: &[f64], hi: &[f64]| -> Vec<f64> {
            lo.iter()
                .zip(hi)
                .map(|(a, b)| {
                    if b > a {
                        rng.gen_range(*a..*b)
                    } else {
                        *a
                    }
                })
                .collect()
        };
        let (xl, xh) = bbox(&self.x, cs.k);
        let (ul, uh) = bbox(&self.u, cs.u_space.dim);
        let (vl, vh) = bbox(&self.v, cs.v_space.dim);
        for _ in 0..self.n_random {
            g.x.push(draw(&mut rng, &xl, &xh));
            g.u.push(draw(&mut rng, &ul, &uh));
            g.v.push(draw(&mut rng, &vl, &vh));
        }
        g
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct Witness {
    pub t: f64,
    pub x: Vec<f64>,
    pub x_alt: Option<Vec<f64>>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    /// Worst observed ratio of left-hand side to the allowed bound
    /// (<= 1 means the assumption held at every sample).
    pub worst_ratio: f64,
    pub witness: Option<Witness>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct ValidationReport {
    pub entries: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn entry(&self, name: &str) -> Option<&AssumptionCheck> {
        self.entries.iter().find(|e| e.name == name)
    }
}

struct CheckAccum {
    name: &'static str,
    worst: f64,
    witness: Option<Witness>,
    note: Option<String>,
}

impl CheckAccum {
    fn new(name: &'static str) -> Self {
        CheckAccum {
            name,
            worst: 0.0,
            witness: None,
            note: None,
        }
    }

    fn observe(&mut self, ratio: f64, wit: impl FnOnce() -> Witness) {
        if ratio > self.worst {
            self.worst = ratio;
            if ratio > 1.0 {
                self.witness = Some(wit());
            }
        }
    }

    fn finish(self) -> AssumptionCheck {
        AssumptionCheck {
            name: self.name.to_string(),
            passed: self.worst <= 1.0,
            worst_ratio: self.worst,
            witness: if self.worst <= 1.0 { None } else { self.witness },
            note: self.note,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn check_finite(
    name: &'static str,
    vals: &[f64],
    t: f64,
    x: &[f64],
    u: &[f64],
    v: &[f64],
) -> Result<()> {
    if vals.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFiniteCoefficient {
            name,
            t,
            x: x.to_vec(),
            u: u.to_vec(),
            v: v.to_vec(),
        });
    }
    Ok(())
}

/// Sampled verification of the structural assumptions: linear growth of
/// `(b, sigma)` at `x = 0`, Lipschitz continuity in `x`, growth and
/// Lipschitz/Hoelder regularity of `f`, Hoelder continuity of `g`, and the
/// neutralizer identities when a neutralizer is attached. Inequalities are
/// checked exactly at the samples; neutralizer equalities up to 1e-9
/// relative.
pub fn validate_coefficients(cs: &CoefficientSet, grid: &ValidationGrid) -> Result<ValidationReport> {
    if grid.t.is_empty() || grid.x.is_empty() || grid.u.is_empty() || grid.v.is_empty() {
        return Err(Error::EmptyGrid("validation grid"));
    }
    let g = grid.expanded(cs);
    let k = cs.k;
    let d = cs.d;
    let zero_x = vec![0.0; k];
    let hol = 2.0 / cs.p;

    let mut growth_bs = CheckAccum::new("growth_b_sigma");
    let mut lip_bs = CheckAccum::new("lipschitz_b_sigma_x");
    let mut growth_f = CheckAccum::new("growth_f");
    let mut reg_f = CheckAccum::new("regularity_f");
    let mut hol_g = CheckAccum::new("holder_g");
    hol_g.note = Some("checked on the declared x-range only".to_string());

    let mut bq = vec![0.0; k];
    let mut bq2 = vec![0.0; k];
    let mut sq = vec![0.0; k * d];
    let mut sq2 = vec![0.0; k * d];

    for &t in &g.t {
        for uu in &g.u {
            for vv in &g.v {
                let gu = cs.u_space.gauge(uu);
                let gv = cs.v_space.gauge(vv);
                // growth of b and sigma at the origin
                cs.drift_into(t, &zero_x, uu, vv, &mut bq);
                cs.diffusion_into(t, &zero_x, uu, vv, &mut sq);
                check_finite("b", &bq, t, &zero_x, uu, vv)?;
                check_finite("sigma", &sq, t, &zero_x, uu, vv)?;
                let lhs = norm(&bq) + norm(&sq);
                let bound = cs.gamma * (1.0 + gu + gv);
                growth_bs.observe(lhs / bound, || Witness {
                    t,
                    x: zero_x.clone(),
                    x_alt: None,
                    u: uu.clone(),
                    v: vv.clone(),
                });
                // growth of f at the origin
                let f0 = cs.generator(t, &zero_x, 0.0, &vec![0.0; d], uu, vv);
                check_finite("f", &[f0], t, &zero_x, uu, vv)?;
                let fb = cs.gamma * (1.0 + gu.powf(hol) + gv.powf(hol));
                growth_f.observe(f0.abs() / fb, || Witness {
                    t,
                    x: zero_x.clone(),
                    x_alt: None,
                    u: uu.clone(),
                    v: vv.clone(),
                });
                // Lipschitz in x for b, sigma over declared point pairs
                for (ix, xa) in g.x.iter().enumerate() {
                    for xb in g.x.iter().skip(ix + 1) {
                        let dx = xa
                            .iter()
                            .zip(xb)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt();
                        if dx == 0.0 {
                            continue;
                        }
                        cs.drift_into(t, xa, uu, vv, &mut bq);
                        cs.drift_into(t, xb, uu, vv, &mut bq2);
                        cs.diffusion_into(t, xa, uu, vv, &mut sq);
                        cs.diffusion_into(t, xb, uu, vv, &mut sq2);
                        check_finite("b", &bq, t, xa, uu, vv)?;
                        check_finite("sigma", &sq, t, xa, uu, vv)?;
                        let db: f64 = bq
                            .iter()
                            .zip(&bq2)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt();
                        let ds: f64 = sq
                            .iter()
                            .zip(&sq2)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt();
                        lip_bs.observe((db + ds) / (cs.gamma * dx), || Witness {
                            t,
                            x: xa.clone(),
                            x_alt: Some(xb.clone()),
                            u: uu.clone(),
                            v: vv.clone(),
                        });
                    }
                }
            }
        }
    }

    // regularity of f in (x, y, z) at fixed controls
    let zs = &g.z;
    for &t in &g.t {
        for uu in g.u.iter().take(5) {
            for vv in g.v.iter().take(5) {
                for (ix, xa) in g.x.iter().enumerate() {
                    for xb in g.x.iter().skip(ix + 1) {
                        for &ya in g.y.iter().take(2) {
                            for &yb in g.y.iter().skip(1).take(2) {
                                for za in zs.iter().take(2) {
                                    for zb in zs.iter().skip(1).take(2) {
                                        let dx = xa
                                            .iter()
                                            .zip(xb)
                                            .map(|(a, b)| (a - b) * (a - b))
                                            .sum::<f64>()
                                            .sqrt();
                                        let dz = za
                                            .iter()
                                            .zip(zb)
                                            .map(|(a, b)| (a - b) * (a - b))
                                            .sum::<f64>()
                                            .sqrt();
                                        let dy = (ya - yb).abs();
                                        let bound =
                                            cs.gamma * (dx.powf(hol) + dy + dz);
                                        if bound == 0.0 {
                                            continue;
                                        }
                                        let fa = cs.generator(t, xa, ya, za, uu, vv);
                                        let fb = cs.generator(t, xb, yb, zb, uu, vv);
                                        check_finite("f", &[fa, fb], t, xa, uu, vv)?;
                                        reg_f.observe((fa - fb).abs() / bound, || Witness {
                                            t,
                                            x: xa.clone(),
                                            x_alt: Some(xb.clone()),
                                            u: uu.clone(),
                                            v: vv.clone(),
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    // Hoelder continuity of g on the declared x-range
    for (ix, xa) in g.x.iter().enumerate() {
        for xb in g.x.iter().skip(ix + 1) {
            let dx = xa
                .iter()
                .zip(xb)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if dx == 0.0 {
                continue;
            }
            let ga = cs.terminal(xa);
            let gb = cs.terminal(xb);
            check_finite("g", &[ga, gb], 0.0, xa, &[], &[])?;
            hol_g.observe((ga - gb).abs() / (cs.gamma * dx.powf(hol)), || Witness {
                t: 0.0,
                x: xa.clone(),
                x_alt: Some(xb.clone()),
                u: vec![],
                v: vec![],
            });
        }
    }

    let mut entries = vec![
        growth_bs.finish(),
        lip_bs.finish(),
        growth_f.finish(),
        reg_f.finish(),
        hol_g.finish(),
    ];

    if let Some(psi) = &cs.psi {
        entries.push(check_neutralizer(cs, &g, psi, true)?);
    }
    if let Some(psi_tilde) = &cs.psi_tilde {
        entries.push(check_neutralizer(cs, &g, psi_tilde, false)?);
    }

    Ok(ValidationReport { entries })
}

/// Neutralizer check: outside the kappa-ball, the coefficients must not
/// distinguish `(u, psi(t,u))` pairs, and the neutralizer obeys its growth
/// bound. `for_u = true` checks the player-I neutralizer psi, otherwise
/// psi_tilde.
fn check_neutralizer(
    cs: &CoefficientSet,
    g: &ValidationGrid,
    psi: &NeutralizerFn,
    for_u: bool,
) -> Result<AssumptionCheck> {
    let mut acc = CheckAccum::new(if for_u { "neutralizer_a_u" } else { "neutralizer_a_v" });
    let rel = 1e-9;
    let own = if for_u { &g.u } else { &g.v };
    let own_space = if for_u { &cs.u_space } else { &cs.v_space };
    let out_space = if for_u { &cs.v_space } else { &cs.u_space };
    let outside: Vec<&Vec<f64>> = own
        .iter()
        .filter(|w| own_space.gauge(w) >= cs.kappa)
        .collect();
    let k = cs.k;
    let d = cs.d;
    let mut b1 = vec![0.0; k];
    let mut b2 = vec![0.0; k];
    let mut s1 = vec![0.0; k * d];
    let mut s2 = vec![0.0; k * d];
    for &t in &g.t {
        for wa in &outside {
            let pa = psi(t, wa);
            // growth bound is part of the assumption
            let ratio =
                out_space.gauge(&pa) / (cs.kappa * (1.0 + own_space.gauge(wa)));
            acc.observe(ratio, || Witness {
                t,
                x: vec![],
                x_alt: None,
                u: if for_u { (*wa).clone() } else { pa.clone() },
                v: if for_u { pa.clone() } else { (*wa).clone() },
            });
            for wb in &outside {
                let pb = psi(t, wb);
                for x in g.x.iter().take(4) {
                    let (ua, va) = if for_u { (&wa[..], &pa[..]) } else { (&pa[..], &wa[..]) };
                    let (ub, vb) = if for_u { (&wb[..], &pb[..]) } else { (&pb[..], &wb[..]) };
                    cs.drift_into(t, x, ua, va, &mut b1);
                    cs.drift_into(t, x, ub, vb, &mut b2);
                    cs.diffusion_into(t, x, ua, va, &mut s1);
                    cs.diffusion_into(t, x, ub, vb, &mut s2);
                    let fa = cs.generator(t, x, 0.5, &vec![0.25; d], ua, va);
                    let fb = cs.generator(t, x, 0.5, &vec![0.25; d], ub, vb);
                    let scale = 1.0 + norm(&b1) + norm(&s1) + fa.abs();
                    let diff = b1
                        .iter()
                        .zip(&b2)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max)
                        .max(
                            s1.iter()
                                .zip(&s2)
                                .map(|(a, b)| (a - b).abs())
                                .fold(0.0, f64::max),
                        )
                        .max((fa - fb).abs());
                    acc.observe(diff / (rel * scale), || Witness {
                        t,
                        x: x.clone(),
                        x_alt: None,
                        u: if for_u { (*wa).clone() } else { pa.clone() },
                        v: if for_u { pa.clone() } else { (*wa).clone() },
                    });
                }
            }
        }
    }
    Ok(acc.finish())
}

/// Merged-control coefficients for the additive example: both players act
/// through the sum `u + v`, so `psi(t,u) = -u` and `psi_tilde(t,v) = -v`
/// neutralize exactly.
pub struct AdditiveFuncs {
    pub b: Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>,
    pub sigma: Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>,
    pub f: Arc<dyn Fn(f64, &[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync>,
    pub g: TerminalFn,
}

#[allow(clippy::too_many_arguments)]
pub fn build_additive(
    k: usize,
    d: usize,
    u_dim: usize,
    v_dim: usize,
    funcs: AdditiveFuncs,
    gamma: f64,
    kappa: f64,
    p: f64,
) -> Result<CoefficientSet> {
    if u_dim != v_dim {
        return Err(Error::DimensionMismatch { u_dim, v_dim });
    }
    let ell = u_dim;
    let merged = |u: &[f64], v: &[f64]| -> Vec<f64> {
        u.iter().zip(v).map(|(a, b)| a + b).collect()
    };
    let fb = funcs.b.clone();
    let fs = funcs.sigma.clone();
    let ff = funcs.f.clone();
    let b: DriftFn = Arc::new(move |t, x, u, v, out| fb(t, x, &merged(u, v), out));
    let sigma: DiffusionFn = Arc::new(move |t, x, u, v, out| fs(t, x, &merged(u, v), out));
    let f: GeneratorFn = Arc::new(move |t, x, y, z, u, v| ff(t, x, y, z, &merged(u, v)));
    let psi: NeutralizerFn = Arc::new(|_t, u| u.iter().map(|a| -a).collect());
    let psi_tilde: NeutralizerFn = Arc::new(|_t, v| v.iter().map(|a| -a).collect());
    Ok(CoefficientSet {
        k,
        d,
        b,
        sigma,
        f,
        g: funcs.g,
        gamma,
        kappa,
        p,
        u_space: ControlSpace::unbounded(ell),
        v_space: ControlSpace::unbounded(ell),
        psi: Some(psi),
        psi_tilde: Some(psi_tilde),
    })
}

pub type ScalarFn2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type ScalarGen = Arc<dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync>;
pub type PhiFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// Scalar coupling example: `b = b0 + phi`, `sigma = sigma0 + phi`,
/// `f = f0 + phi` with `k = d = 1`, `p = 2`, scalar control spaces. The
/// sign condition (the zero set of `phi(t, u, .)` meets `[-kappa|u|,
/// kappa|u|]`) is verified on a sample grid; the neutralizers stay empty
/// until one is constructed from `phi`.
pub fn build_scalar_phi(
    b0: ScalarFn2,
    sigma0: ScalarFn2,
    f0: ScalarGen,
    phi: PhiFn,
    kappa: f64,
    gamma: f64,
    g: TerminalFn,
    horizon: f64,
) -> Result<CoefficientSet> {
    // sampled sign condition on a (t, u) grid; grid infimum with the
    // Lipschitz modulus of the v'-grid as slack
    let n_t = 9;
    let n_u = 16;
    // scan u from the origin outward: the interval shrinks to a point at
    // u = 0, so that is where violations surface first
    let mut u_scan = vec![0.0];
    for iu in 1..=n_u {
        let u = 4.0 * iu as f64 / n_u as f64;
        u_scan.push(u);
        u_scan.push(-u);
    }
    for it in 0..=n_t {
        let t = horizon * it as f64 / n_t as f64;
        for &u in &u_scan {
            let r = kappa * u.abs();
            let n_v = 64;
            let h = if n_v > 0 { 2.0 * r / n_v as f64 } else { 0.0 };
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for iv in 0..=n_v {
                let v = -r + 2.0 * r * iv as f64 / n_v as f64;
                let val = phi(t, u, v);
                lo = lo.min(val);
                hi = hi.max(val);
            }
            let slack = gamma * h;
            if !(lo <= slack && hi >= -slack) {
                return Err(Error::SignConditionViolated { t, u });
            }
        }
    }
    let pb0 = b0.clone();
    let ps0 = sigma0.clone();
    let pf0 = f0.clone();
    let phib = phi.clone();
    let phis = phi.clone();
    let phif = phi.clone();
    let b: DriftFn = Arc::new(move |t, x, u, v, out| {
        out[0] = pb0(t, x[0]) + phib(t, u[0], v[0]);
    });
    let sigma: DiffusionFn = Arc::new(move |t, x, u, v, out| {
        out[0] = ps0(t, x[0]) + phis(t, u[0], v[0]);
    });
    let f: GeneratorFn =
        Arc::new(move |t, x, y, z, u, v| pf0(t, x[0], y, z[0]) + phif(t, u[0], v[0]));
    Ok(CoefficientSet {
        k: 1,
        d: 1,
        b,
        sigma,
        f,
        g,
        gamma,
        kappa,
        p: 2.0,
        u_space: ControlSpace::unbounded(1),
        v_space: ControlSpace::unbounded(1),
        psi: None,
        psi_tilde: None,
    })
}
