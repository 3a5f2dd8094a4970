//! Named coefficient sets constructible from configuration. Custom games
//! are added here behind a registry key.

use crate::error::{Error, Result};
use crate::model::{
    build_additive, build_scalar_phi, AdditiveFuncs, CoefficientSet, ControlSpace,
};
use std::sync::Arc;

#[derive(Clone, Debug, Default, serde::Deserialize)]
pub struct ModelParams {
    pub gamma: Option<f64>,
    pub kappa: Option<f64>,
    pub sigma0: Option<f64>,
    /// When set, both control spaces become closed balls of this radius.
    pub bound: Option<f64>,
}

pub fn available_keys() -> &'static [&'static str] {
    &[
        "zero",
        "heat",
        "frozen",
        "mirror",
        "cancellation",
        "additive_drift",
        "additive_full",
        "scalar_phi_linear",
        "scalar_phi_sin",
    ]
}

/// Build a registered coefficient set.
pub fn build(key: &str, params: &ModelParams) -> Result<CoefficientSet> {
    let gamma = params.gamma.unwrap_or(2.0);
    let kappa = params.kappa.unwrap_or(1.0);
    let sigma0 = params.sigma0;
    let bounded = |cs: CoefficientSet| -> CoefficientSet {
        match params.bound {
            Some(r) => CoefficientSet {
                u_space: ControlSpace::ball(cs.u_space.dim, r),
                v_space: ControlSpace::ball(cs.v_space.dim, r),
                ..cs
            },
            None => cs,
        }
    };
    match key {
        "zero" => Ok(bounded(CoefficientSet {
            k: 1,
            d: 1,
            b: Arc::new(|_, _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]| out[0] = 0.0),
            sigma: Arc::new(|_, _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]| out[0] = 0.0),
            f: Arc::new(|_, _: &[f64], _, _: &[f64], _: &[f64], _: &[f64]| 0.0),
            g: Arc::new(|_: &[f64]| 0.0),
            gamma,
            kappa,
            p: 2.0,
            u_space: ControlSpace::ball(1, 1.0),
            v_space: ControlSpace::ball(1, 1.0),
            psi: Some(Arc::new(|_t, u| u.to_vec())),
            psi_tilde: Some(Arc::new(|_t, v| v.to_vec())),
        })),
        // uncontrolled heat problem: w(t, x) = x^2 + (T - t)
        "heat" => Ok(CoefficientSet {
            k: 1,
            d: 1,
            b: Arc::new(|_, _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]| out[0] = 0.0),
            sigma: Arc::new(|_, _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]| out[0] = 1.0),
            f: Arc::new(|_, _: &[f64], _, _: &[f64], _: &[f64], _: &[f64]| 0.0),
            g: Arc::new(|x: &[f64]| x[0] * x[0]),
            gamma: params.gamma.unwrap_or(6.0),
            kappa,
            p: 2.0,
            u_space: ControlSpace::ball(1, 0.0),
            v_space: ControlSpace::ball(1, 0.0),
            psi: Some(Arc::new(|_t, _u| vec![0.0])),
            psi_tilde: Some(Arc::new(|_t, _v| vec![0.0])),
        }),
        // frozen dynamics: value equals the terminal reward everywhere
        "frozen" => Ok(bounded(CoefficientSet {
            k: 1,
            d: 1,
            b: Arc::new(|_, _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]| out[0] = 0.0),
            sigma: Arc::new(|_, _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]| out[0] = 0.0),
            f: Arc::new(|_, _: &[f64], _, _: &[f64], _: &[f64], _: &[f64]| 0.0),
            g: Arc::new(|x: &[f64]| x[0]),
            gamma,
            kappa,
            p: 2.0,
            u_space: ControlSpace::ball(1, 1.0),
            v_space: ControlSpace::ball(1, 1.0),
            psi: Some(Arc::new(|_t, u| u.to_vec())),
            psi_tilde: Some(Arc::new(|_t, v| v.to_vec())),
        })),
        // b = u - v: the mirror response freezes the state
        "mirror" => {
            let s0 = sigma0.unwrap_or(0.0);
            Ok(bounded(CoefficientSet {
                k: 1,
                d: 1,
                b: Arc::new(|_, _: &[f64], u: &[f64], v: &[f64], out: &mut [f64]| {
                    out[0] = u[0] - v[0]
                }),
                sigma: Arc::new(move |_, _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]| {
                    out[0] = s0
                }),
                f: Arc::new(|_, _: &[f64], _, _: &[f64], _: &[f64], _: &[f64]| 0.0),
                g: Arc::new(|x: &[f64]| x[0]),
                gamma,
                kappa,
                p: 2.0,
                u_space: ControlSpace::ball(1, 1.0),
                v_space: ControlSpace::ball(1, 1.0),
                psi: Some(Arc::new(|_t, u| u.to_vec())),
                psi_tilde: Some(Arc::new(|_t, v| v.to_vec())),
            }))
        }
        // b = u + v, no noise: symmetric grids cancel
        "cancellation" => {
            let cs = build_additive(
                1,
                1,
                1,
                1,
                AdditiveFuncs {
                    b: Arc::new(|_t, _x, w, out| out[0] = w[0]),
                    sigma: Arc::new(|_t, _x, _w, out| out[0] = 0.0),
                    f: Arc::new(|_t, _x, _y, _z, _w| 0.0),
                    g: Arc::new(|x| x[0]),
                },
                gamma,
                kappa,
                2.0,
            )?;
            Ok(bounded(cs))
        }
        // b = u + v with additive diffusion
        "additive_drift" => {
            let s0 = sigma0.unwrap_or(1.0);
            let cs = build_additive(
                1,
                1,
                1,
                1,
                AdditiveFuncs {
                    b: Arc::new(|_t, _x, w, out| out[0] = w[0]),
                    sigma: Arc::new(move |_t, _x, _w, out| out[0] = s0),
                    f: Arc::new(|_t, _x, _y, _z, _w| 0.0),
                    g: Arc::new(|x| x[0]),
                },
                gamma,
                kappa,
                2.0,
            )?;
            Ok(bounded(cs))
        }
        // additive controls in drift and generator
        "additive_full" => {
            let cs = build_additive(
                1,
                1,
                1,
                1,
                AdditiveFuncs {
                    b: Arc::new(|_t, _x, w, out| out[0] = w[0]),
                    sigma: Arc::new(|_t, _x, _w, out| out[0] = 1.0),
                    f: Arc::new(|_t, _x, _y, _z, w| w[0]),
                    g: Arc::new(|x| x[0]),
                },
                gamma,
                kappa,
                2.0,
            )?;
            Ok(bounded(cs))
        }
        "scalar_phi_linear" => build_scalar_phi(
            Arc::new(|_, _| 0.0),
            Arc::new(|_, _| 0.0),
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_t, u, v| u + v),
            kappa,
            gamma,
            Arc::new(|x: &[f64]| x[0]),
            1.0,
        ),
        "scalar_phi_sin" => build_scalar_phi(
            Arc::new(|_, _| 0.0),
            Arc::new(|_, _| 0.0),
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_t, u: f64, v: f64| v - u.sin()),
            kappa,
            gamma,
            Arc::new(|x: &[f64]| x[0]),
            1.0,
        ),
        other => Err(Error::ConfigInvalid {
            field: "model.registry".into(),
            message: format!(
                "unknown key `{other}`; available: {}",
                available_keys().join(", ")
            ),
        }),
    }
}
