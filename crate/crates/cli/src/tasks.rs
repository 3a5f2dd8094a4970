//! Task execution: one task per invocation, producing a typed result plus
//! a pass flag and a one-line summary.

use crate::config::{ExperimentConfig, TaskBlock};
use sdg_core::bsde_engine::{payoff_j, BasisSpec};
use sdg_core::controls::ControlPath;
use sdg_core::dpp_harness::{check_dpp_w1, check_dpp_w2, tabulate_value_grid, DppReport};
use sdg_core::error::{Error, Result};
use sdg_core::game_values::{estimate_w1, estimate_w2, ValueEstimate};
use sdg_core::hamiltonians::{envelope_h, EnvelopeConfig, EnvelopeKind, EnvelopeResult, HamPoint};
use sdg_core::isaacs_pde::{
    cross_validate, solve_pde, CrossValReport, HamiltonianSide, PdeGrid, PdeGridSpec,
};
use sdg_core::mc_paths::generate;
use sdg_core::model::{validate_coefficients, ValidationGrid, ValidationReport};
use sdg_core::sde_engine::ControlledBy;

pub enum TaskResult {
    Validate {
        report: ValidationReport,
    },
    Bsde {
        y0: f64,
        std_err: f64,
    },
    Value {
        rows: Vec<(ValueEstimate, ValueEstimate)>,
        seed: u64,
    },
    Dpp {
        reports: Vec<(String, DppReport)>,
    },
    Hamiltonian {
        result: EnvelopeResult,
        which: String,
    },
    Pde {
        grid: PdeGrid,
    },
    Crossval {
        report: CrossValReport,
    },
}

fn side_of(s: &Option<String>) -> Result<HamiltonianSide> {
    match s.as_deref() {
        None | Some("supinf") => Ok(HamiltonianSide::SupInf),
        Some("infsup") => Ok(HamiltonianSide::InfSup),
        Some(other) => Err(Error::ConfigInvalid {
            field: "task.side".into(),
            message: format!("unknown side `{other}` (supinf or infsup)"),
        }),
    }
}

pub fn run_task(config: &ExperimentConfig, seed: u64) -> Result<(TaskResult, bool, String)> {
    let cs = config.coefficient_set()?;
    let grid = config.time_grid()?;
    let basis = BasisSpec::default();
    match &config.task {
        TaskBlock::Validate { x_range } => {
            let vgrid = ValidationGrid::default_for(&cs, x_range.unwrap_or(2.0));
            let report = validate_coefficients(&cs, &vgrid)?;
            let pass = report.all_passed();
            let summary = format!(
                "validate {}: {}",
                config.model.registry,
                if pass { "all assumptions PASS" } else { "assumption FAIL" }
            );
            Ok((TaskResult::Validate { report }, pass, summary))
        }
        TaskBlock::Bsde { x, u, v } => {
            let bundle = generate(&grid, cs.d, config.grid.m_paths, seed)?;
            let mu = ControlPath::constant(&grid, &cs.u_space, config.grid.m_paths, u)?;
            let nu = ControlPath::constant(&grid, &cs.v_space, config.grid.m_paths, v)?;
            let (y0, std_err) = payoff_j(&cs, x, &mu, &nu, &bundle, &basis)?;
            let summary = format!("bsde payoff at x={x:?}: Y0 = {y0:.6} (se {std_err:.2e})");
            Ok((TaskResult::Bsde { y0, std_err }, true, summary))
        }
        TaskBlock::Value { x_values } => {
            let bundle = generate(&grid, cs.d, config.grid.m_paths, seed)?;
            let strategies = config.strategy_class(&cs, &grid)?;
            let controls = config.control_class(&cs.u_space)?;
            let controls_v = config.control_class(&cs.v_space)?;
            let mut rows = Vec::new();
            for x in x_values {
                let w1 = estimate_w1(&cs, grid.t0, x, &strategies, &controls, &bundle, &basis)?;
                let w2 =
                    estimate_w2(&cs, grid.t0, x, &strategies, &controls_v, &bundle, &basis)?;
                rows.push((w1, w2));
            }
            let summary = format!(
                "value at {} points: w1 in [{:.4}, {:.4}]",
                rows.len(),
                rows.iter().map(|r| r.0.value).fold(f64::INFINITY, f64::min),
                rows.iter().map(|r| r.0.value).fold(f64::NEG_INFINITY, f64::max)
            );
            Ok((TaskResult::Value { rows, seed }, true, summary))
        }
        TaskBlock::Dpp {
            x,
            delta,
            epsilon,
            which,
            t_nodes,
            x_nodes,
            grid_m_paths,
        } => {
            let strategies = config.strategy_class(&cs, &grid)?;
            let controls = config.control_class(&cs.u_space)?;
            let controls_v = config.control_class(&cs.v_space)?;
            let bundle = generate(&grid, cs.d, config.grid.m_paths, seed)?;
            let m_grid = grid_m_paths.unwrap_or((config.grid.m_paths / 5).max(2000));
            let bundle_grid = generate(&grid, cs.d, m_grid, seed.wrapping_add(1))?;
            // sandwich grid: snap times to bundle nodes, span the reachable
            // stopped states
            let t_nodes = match t_nodes {
                Some(ts) => ts.clone(),
                None => {
                    let n_frac = (delta / grid.dt()).ceil() as usize;
                    let idxs = [0, n_frac / 3, 2 * n_frac / 3, n_frac];
                    let mut ts: Vec<f64> = idxs.iter().map(|&k| grid.node(k)).collect();
                    ts.dedup();
                    ts
                }
            };
            let x_nodes = match x_nodes {
                Some(xs) => xs.clone(),
                None => [-5.0, -2.0, -1.0, 0.0, 1.0, 2.0, 5.0]
                    .iter()
                    .map(|&m| x[0] + m * delta)
                    .collect(),
            };
            let which = which.clone().unwrap_or_else(|| "both".into());
            let mut reports = Vec::new();
            if which == "w1" || which == "both" {
                let vg = tabulate_value_grid(
                    &cs,
                    &t_nodes,
                    &x_nodes,
                    &strategies,
                    &controls,
                    &bundle_grid,
                    &basis,
                    ControlledBy::PlayerI,
                )?;
                let rep = check_dpp_w1(
                    &cs, grid.t0, x, *delta, &strategies, &controls, &vg, *epsilon, &bundle,
                    &basis,
                )?;
                reports.push(("w1".to_string(), rep));
            }
            if which == "w2" || which == "both" {
                let vg = tabulate_value_grid(
                    &cs,
                    &t_nodes,
                    &x_nodes,
                    &strategies,
                    &controls_v,
                    &bundle_grid,
                    &basis,
                    ControlledBy::PlayerII,
                )?;
                let rep = check_dpp_w2(
                    &cs, grid.t0, x, *delta, &strategies, &controls_v, &vg, *epsilon, &bundle,
                    &basis,
                )?;
                reports.push(("w2".to_string(), rep));
            }
            if reports.is_empty() {
                return Err(Error::ConfigInvalid {
                    field: "task.which".into(),
                    message: "one of w1, w2, both".into(),
                });
            }
            let pass = reports.iter().all(|(_, r)| r.pass);
            let summary = reports
                .iter()
                .map(|(w, r)| {
                    format!(
                        "{w}: {:.4} <= {:.4} <= {:.4} ({})",
                        r.lower,
                        r.w_hat,
                        r.upper,
                        if r.pass { "pass" } else { "fail" }
                    )
                })
                .collect::<Vec<_>>()
                .join("; ");
            Ok((TaskResult::Dpp { reports }, pass, format!("dpp {summary}")))
        }
        TaskBlock::Hamiltonian {
            t,
            x,
            y,
            z,
            gamma_xx,
            which,
            anchors,
            n_max,
            lattice_step,
        } => {
            let xi = HamPoint::scalar(*t, *x, *y, *z, *gamma_xx);
            let kind = match which.as_str() {
                "H1_lower" => EnvelopeKind::H1Lower,
                "H1_upper" => EnvelopeKind::H1Upper,
                "H2_lower" => EnvelopeKind::H2Lower,
                "H2_upper" => EnvelopeKind::H2Upper,
                other => {
                    return Err(Error::ConfigInvalid {
                        field: "task.which".into(),
                        message: format!("unknown envelope `{other}`"),
                    })
                }
            };
            let cfg = EnvelopeConfig {
                anchors: anchors.clone(),
                lattice_step: lattice_step.unwrap_or(0.25),
                n_max: n_max.unwrap_or(8),
                ball_samples: 128,
                control_samples: 8,
            };
            let result = envelope_h(&cs, &xi, kind, &cfg)?;
            let summary = format!(
                "hamiltonian {which}: levels 1..{} -> limit estimate {:.6}",
                cfg.n_max, result.limit
            );
            Ok((
                TaskResult::Hamiltonian {
                    result,
                    which: which.clone(),
                },
                true,
                summary,
            ))
        }
        TaskBlock::Pde {
            x_min,
            x_max,
            n_x,
            n_t,
            side,
            u_grid,
            v_grid,
        } => {
            let spec = PdeGridSpec {
                x_min: *x_min,
                x_max: *x_max,
                n_x: *n_x,
                n_t: *n_t,
            };
            let pde = solve_pde(
                &cs,
                grid.t0,
                grid.t_end,
                &spec,
                side_of(side)?,
                u_grid,
                v_grid,
            )?;
            let summary = format!(
                "pde solved: {} x {} nodes, dt {:.2e} (cfl bound {:.2e})",
                pde.n_t + 1,
                pde.n_x,
                pde.dt,
                pde.cfl_bound
            );
            Ok((TaskResult::Pde { grid: pde }, true, summary))
        }
        TaskBlock::Crossval {
            x,
            x_min,
            x_max,
            n_x,
            side,
            u_grid,
            v_grid,
        } => {
            let bundle = generate(&grid, cs.d, config.grid.m_paths, seed)?;
            let strategies = config.strategy_class(&cs, &grid)?;
            let controls = config.control_class(&cs.u_space)?;
            let spec = PdeGridSpec {
                x_min: *x_min,
                x_max: *x_max,
                n_x: *n_x,
                n_t: None,
            };
            let report = cross_validate(
                &cs,
                grid.t0,
                *x,
                &strategies,
                &controls,
                &bundle,
                &basis,
                &spec,
                side_of(side)?,
                u_grid,
                v_grid,
            )?;
            let pass = report.pass;
            let summary = format!(
                "crossval at x={x}: mc {:.5} vs pde {:.5}, gap {:.2e} {} tol {:.2e}",
                report.mc_value,
                report.pde_value,
                report.gap,
                if pass { "<" } else { ">=" },
                report.tol
            );
            Ok((TaskResult::Crossval { report }, pass, summary))
        }
    }
}
