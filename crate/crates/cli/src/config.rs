//! Experiment configuration: one JSON file describing the model, the
//! simulation grid, the control/strategy classes, the task and the output
//! destination.

use sdg_core::controls::{
    neutralizer_strategy, ControlClass, FeedbackControl, FeedbackStrategy, StrategyClass,
};
use sdg_core::error::{Error, Result};
use sdg_core::mc_paths::TimeGrid;
use sdg_core::model::{CoefficientSet, ControlSpace};
use sdg_core::registry::{self, ModelParams};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelBlock,
    pub grid: GridBlock,
    #[serde(default)]
    pub classes: ClassesBlock,
    pub task: TaskBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub registry: String,
    pub gamma: Option<f64>,
    pub kappa: Option<f64>,
    pub p: Option<f64>,
    pub sigma0: Option<f64>,
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub t0: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub n_steps: usize,
    pub m_paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassesBlock {
    #[serde(default)]
    pub strategies: Vec<StrategyDecl>,
    #[serde(default)]
    pub controls: Vec<ControlDecl>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategyDecl {
    Constant { value: Vec<f64>, label: Option<String> },
    Mirror,
    Negate,
    Neutralizer,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlDecl {
    Constant { value: Vec<f64>, label: Option<String> },
    Lattice { axes: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskBlock {
    Validate {
        x_range: Option<f64>,
    },
    Bsde {
        x: Vec<f64>,
        u: Vec<f64>,
        v: Vec<f64>,
    },
    Value {
        x_values: Vec<Vec<f64>>,
    },
    Dpp {
        x: Vec<f64>,
        delta: f64,
        epsilon: f64,
        which: Option<String>,
        t_nodes: Option<Vec<f64>>,
        x_nodes: Option<Vec<f64>>,
        grid_m_paths: Option<usize>,
    },
    Hamiltonian {
        t: f64,
        x: f64,
        y: f64,
        z: f64,
        gamma_xx: f64,
        which: String,
        anchors: Vec<Vec<f64>>,
        n_max: Option<usize>,
        lattice_step: Option<f64>,
    },
    Pde {
        x_min: f64,
        x_max: f64,
        n_x: usize,
        n_t: Option<usize>,
        side: Option<String>,
        u_grid: Vec<Vec<f64>>,
        v_grid: Vec<Vec<f64>>,
    },
    Crossval {
        x: f64,
        x_min: f64,
        x_max: f64,
        n_x: usize,
        side: Option<String>,
        u_grid: Vec<Vec<f64>>,
        v_grid: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: Option<String>,
    pub formats: Option<Vec<String>>,
}

fn invalid(field: &str, message: impl Into<String>) -> Error {
    Error::ConfigInvalid {
        field: field.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| invalid("<root>", e.to_string()))
    }

    /// Range and cross-field checks, with the offending field named.
    pub fn validate(&self) -> Result<()> {
        if !registry::available_keys().contains(&self.model.registry.as_str()) {
            return Err(invalid(
                "model.registry",
                format!(
                    "unknown key `{}`; available: {}",
                    self.model.registry,
                    registry::available_keys().join(", ")
                ),
            ));
        }
        if let Some(g) = self.model.gamma {
            if !(g > 0.0) {
                return Err(invalid("model.gamma", "must be positive"));
            }
        }
        if let Some(k) = self.model.kappa {
            if !(k > 0.0) {
                return Err(invalid("model.kappa", "must be positive"));
            }
        }
        if let Some(p) = self.model.p {
            if !(p > 1.0 && p <= 2.0) {
                return Err(invalid("model.p", "must lie in (1, 2]"));
            }
        }
        if !(self.grid.t_end > self.grid.t0) {
            return Err(invalid("grid.T", "horizon must exceed t0"));
        }
        if self.grid.n_steps == 0 {
            return Err(invalid("grid.n_steps", "must be positive"));
        }
        if self.grid.m_paths == 0 {
            return Err(invalid("grid.m_paths", "must be positive"));
        }
        let horizon = self.grid.t_end - self.grid.t0;
        match &self.task {
            TaskBlock::Dpp { delta, epsilon, .. } => {
                if !(*delta > 0.0 && *delta < horizon) {
                    return Err(invalid(
                        "task.delta",
                        format!("must lie in (0, {horizon})"),
                    ));
                }
                if !(*epsilon > 0.0) {
                    return Err(invalid("task.epsilon", "must be positive"));
                }
            }
            TaskBlock::Pde {
                x_min, x_max, n_x, ..
            }
            | TaskBlock::Crossval {
                x_min, x_max, n_x, ..
            } => {
                if !(x_max > x_min) {
                    return Err(invalid("task.x_max", "must exceed x_min"));
                }
                if *n_x < 3 {
                    return Err(invalid("task.n_x", "needs at least 3 nodes"));
                }
            }
            TaskBlock::Hamiltonian { which, .. } => {
                if !["H1_lower", "H1_upper", "H2_lower", "H2_upper"]
                    .contains(&which.as_str())
                {
                    return Err(invalid(
                        "task.which",
                        "one of H1_lower, H1_upper, H2_lower, H2_upper",
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn coefficient_set(&self) -> Result<CoefficientSet> {
        let params = ModelParams {
            gamma: self.model.gamma,
            kappa: self.model.kappa,
            sigma0: self.model.sigma0,
            bound: self.model.bound,
        };
        let mut cs = registry::build(&self.model.registry, &params)?;
        if let Some(p) = self.model.p {
            cs.p = p;
        }
        Ok(cs)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.t0, self.grid.t_end, self.grid.n_steps)
    }

    pub fn strategy_class(&self, cs: &CoefficientSet, grid: &TimeGrid) -> Result<StrategyClass> {
        let mut items = Vec::new();
        for (i, decl) in self.classes.strategies.iter().enumerate() {
            let item = match decl {
                StrategyDecl::Constant { value, label } => FeedbackStrategy::constant(
                    label.clone().unwrap_or_else(|| format!("const_{i}")),
                    cs.v_space.clone(),
                    cs.kappa,
                    value.clone(),
                ),
                StrategyDecl::Mirror => {
                    FeedbackStrategy::mirror(format!("mirror_{i}"), cs.v_space.clone(), cs.kappa)
                }
                StrategyDecl::Negate => {
                    FeedbackStrategy::negate(format!("negate_{i}"), cs.v_space.clone(), cs.kappa)
                }
                StrategyDecl::Neutralizer => {
                    let mut s = neutralizer_strategy(cs, grid)?;
                    s.label = format!("neutralizer_{i}");
                    s
                }
            };
            items.push(item);
        }
        StrategyClass::new(items)
    }

    pub fn control_class(&self, space: &ControlSpace) -> Result<ControlClass> {
        let mut items = Vec::new();
        for (i, decl) in self.classes.controls.iter().enumerate() {
            match decl {
                ControlDecl::Constant { value, label } => items.push(FeedbackControl::constant(
                    label.clone().unwrap_or_else(|| format!("const_{i}")),
                    space.clone(),
                    value.clone(),
                )),
                ControlDecl::Lattice { axes } => {
                    if axes.len() != space.dim {
                        return Err(invalid(
                            "classes.controls",
                            "lattice axes must match the control dimension",
                        ));
                    }
                    let mut points: Vec<Vec<f64>> = vec![vec![]];
                    for axis in axes {
                        let mut grown = Vec::new();
                        for p in &points {
                            for &v in axis {
                                let mut q = p.clone();
                                q.push(v);
                                grown.push(q);
                            }
                        }
                        points = grown;
                    }
                    for (j, p) in points.into_iter().enumerate() {
                        items.push(FeedbackControl::constant(
                            format!("lattice_{i}_{j}"),
                            space.clone(),
                            p,
                        ));
                    }
                }
            }
        }
        ControlClass::new(items)
    }
}
