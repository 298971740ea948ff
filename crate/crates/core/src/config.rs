//! TOML experiment description shared by the CLI, the sweeps and the benchmarks.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{
    CartpoleParams, ControlAffineSystem, GridAxis, LabelMode, PendulumParams, StageCost, StateEmbedding,
    StateGridSpec, DEFAULT_FD_STEP,
};
use crate::error::{Error, Result};
use crate::hjb::{HjbConfig, Scheme};
use crate::kernels::KernelSpec;
use crate::lqr::{solve_care, LqrSolution};
use crate::penalty::ControlPenalty;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub grid: GridConfig,
    pub kernel: KernelSpec,
    pub penalty: ControlPenalty,
    pub cost: CostConfig,
    pub epsilon: f64,
    pub gamma: f64,
    pub dt: f64,
    pub horizon_steps: usize,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SystemConfig {
    /// `x' = A x + B u` with inputs clipped to `[-bound, bound]`.
    Linear {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        bound: f64,
    },
    Pendulum {
        #[serde(default)]
        params: PendulumParams,
    },
    Cartpole {
        #[serde(default)]
        params: CartpoleParams,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelKind {
    #[default]
    Analytic,
    FiniteDifference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub counts: Vec<usize>,
    #[serde(default)]
    pub angle_axis: Option<usize>,
    #[serde(default)]
    pub max_points: Option<usize>,
    #[serde(default)]
    pub labels: LabelKind,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
}

fn default_fd_step() -> f64 {
    DEFAULT_FD_STEP
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CostConfig {
    Quadratic { weights: Vec<f64> },
    Pendulum { q1: f64, q2: f64, q_v: f64 },
    Cartpole { q_h: f64, q_v: f64, q_vel: f64, q_omega: f64, length: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Per-channel bound of the arctan-smoothed deployment policy; raw `u*` when absent.
    #[serde(default)]
    pub u_max: Option<Vec<f64>>,
    #[serde(default)]
    pub rmse: Option<RmseConfig>,
    #[serde(default)]
    pub rollout: Option<RolloutConfig>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    /// Worker threads for sweeps and rollouts.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_jobs() -> usize {
    1
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            u_max: None,
            rmse: None,
            rollout: None,
            sweep: None,
            jobs: default_jobs(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmseConfig {
    /// Sampling box in state coordinates; defaults to the data grid box.
    #[serde(default)]
    pub lower: Option<Vec<f64>>,
    #[serde(default)]
    pub upper: Option<Vec<f64>>,
    #[serde(default = "default_rmse_points")]
    pub n_points: usize,
}

fn default_rmse_points() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    /// Initial-state box in raw coordinates (angles, not their cos/sin).
    pub init_lower: Vec<f64>,
    pub init_upper: Vec<f64>,
    #[serde(default = "default_one")]
    pub n_initial: usize,
    #[serde(default = "default_one")]
    pub runs: usize,
    pub duration: f64,
    /// Zero-order-hold period of the policy.
    pub control_period: f64,
    #[serde(default = "default_substep")]
    pub substep: f64,
    #[serde(default)]
    pub noise: bool,
    /// Single start state (raw coordinates) for `rollout` mode.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
}

fn default_one() -> usize {
    1
}

fn default_substep() -> f64 {
    1e-3
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParameter {
    /// Kernel lengthscale.
    Sigma,
    /// Points per grid axis (the dataset size for one-dimensional grids).
    GridCount,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => cfg_err(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration is always representable in TOML")
    }

    /// Checks every section and their mutual consistency; all failures are `Error::Config`.
    pub fn validate(&self) -> Result<()> {
        let as_cfg = |e: Error| match e {
            Error::Argument(msg) => Error::Config(msg),
            other => other,
        };
        for (name, v) in [("epsilon", self.epsilon), ("gamma", self.gamma), ("dt", self.dt)] {
            if !v.is_finite() || v < 0.0 {
                return Err(cfg_err(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.gamma == 0.0 || self.dt == 0.0 {
            return Err(cfg_err("gamma and dt must be positive"));
        }
        if self.horizon_steps == 0 {
            return Err(cfg_err("horizon_steps must be at least 1"));
        }
        self.kernel.validate().map_err(as_cfg)?;
        self.penalty.validate().map_err(as_cfg)?;
        self.grid_spec()?.validate().map_err(as_cfg)?;
        let sys = self.system()?;
        if self.penalty.weights.len() != sys.n_u() {
            return Err(cfg_err(format!(
                "penalty has {} channels but the system has {} inputs",
                self.penalty.weights.len(),
                sys.n_u()
            )));
        }
        let n_x = self.grid_spec()?.state_dim();
        if n_x != sys.n_x() {
            return Err(cfg_err(format!(
                "grid produces {n_x}-dimensional states but the system has n_x = {}",
                sys.n_x()
            )));
        }
        match &self.cost {
            CostConfig::Quadratic { weights } if weights.len() != n_x => {
                return Err(cfg_err("quadratic cost needs one weight per state coordinate"))
            }
            CostConfig::Pendulum { .. } if n_x != 3 => return Err(cfg_err("pendulum cost needs a 3-state system")),
            CostConfig::Cartpole { .. } if n_x != 5 => return Err(cfg_err("cartpole cost needs a 5-state system")),
            _ => {}
        }
        self.validate_eval(sys.n_u(), n_x)
    }

    fn validate_eval(&self, n_u: usize, n_x: usize) -> Result<()> {
        let ev = &self.eval;
        if ev.jobs == 0 {
            return Err(cfg_err("eval.jobs must be at least 1"));
        }
        if let Some(m) = &ev.u_max {
            if m.len() != n_u || m.iter().any(|v| !(*v > 0.0)) {
                return Err(cfg_err("eval.u_max needs one positive bound per input"));
            }
        }
        if let Some(r) = &ev.rmse {
            for b in [&r.lower, &r.upper].into_iter().flatten() {
                if b.len() != n_x {
                    return Err(cfg_err("eval.rmse box must match the state dimension"));
                }
            }
            if r.n_points == 0 {
                return Err(cfg_err("eval.rmse.n_points must be at least 1"));
            }
        }
        if let Some(r) = &ev.rollout {
            let raw = self.grid.counts.len();
            if r.init_lower.len() != raw || r.init_upper.len() != raw {
                return Err(cfg_err("eval.rollout initial box must use raw grid coordinates"));
            }
            if r.x0.as_ref().is_some_and(|x| x.len() != raw) {
                return Err(cfg_err("eval.rollout.x0 must use raw grid coordinates"));
            }
            if !(r.substep > 0.0 && r.control_period >= r.substep && r.duration > 0.0) {
                return Err(cfg_err("eval.rollout needs duration > 0 and control_period >= substep > 0"));
            }
            let ratio = r.control_period / r.substep;
            if (ratio - ratio.round()).abs() > 1e-9 {
                return Err(cfg_err("eval.rollout.control_period must be a multiple of substep"));
            }
            if r.n_initial == 0 || r.runs == 0 {
                return Err(cfg_err("eval.rollout needs at least one run and one initial state"));
            }
        }
        if let Some(s) = &ev.sweep {
            if s.values.is_empty() {
                return Err(cfg_err("eval.sweep.values must not be empty"));
            }
            let bad = match s.parameter {
                SweepParameter::Sigma => s.values.iter().any(|v| !(*v > 0.0 && v.is_finite())),
                SweepParameter::GridCount => s.values.iter().any(|v| !(*v >= 1.0 && v.fract() == 0.0)),
            };
            if bad {
                return Err(cfg_err("eval.sweep.values out of range for the swept parameter"));
            }
        }
        Ok(())
    }

    pub fn system(&self) -> Result<ControlAffineSystem> {
        let built = match &self.system {
            SystemConfig::Linear { a, b, bound } => {
                ControlAffineSystem::linear(a.clone(), b.clone(), *bound, self.epsilon)
            }
            SystemConfig::Pendulum { params } => ControlAffineSystem::pendulum(*params, self.epsilon),
            SystemConfig::Cartpole { params } => ControlAffineSystem::cartpole(*params, self.epsilon),
        };
        built.map_err(|e| cfg_err(format!("system: {e}")))
    }

    pub fn grid_spec(&self) -> Result<StateGridSpec> {
        let g = &self.grid;
        if g.lower.len() != g.counts.len() || g.upper.len() != g.counts.len() {
            return Err(cfg_err("grid lower/upper/counts must have the same length"));
        }
        let axes = (0..g.counts.len())
            .map(|d| GridAxis::new(g.lower[d], g.upper[d], g.counts[d]))
            .collect();
        Ok(StateGridSpec {
            axes,
            embedding: StateEmbedding {
                angle_axis: g.angle_axis,
            },
            max_points: g.max_points,
        })
    }

    pub fn label_mode(&self) -> LabelMode {
        match self.grid.labels {
            LabelKind::Analytic => LabelMode::Analytic,
            LabelKind::FiniteDifference => LabelMode::FiniteDifference { h: self.grid.fd_step },
        }
    }

    pub fn stage_cost(&self) -> StageCost {
        match &self.cost {
            CostConfig::Quadratic { weights } => StageCost::Quadratic {
                weights: weights.clone(),
            },
            CostConfig::Pendulum { q1, q2, q_v } => StageCost::Pendulum {
                q1: *q1,
                q2: *q2,
                q_v: *q_v,
            },
            CostConfig::Cartpole {
                q_h,
                q_v,
                q_vel,
                q_omega,
                length,
            } => StageCost::Cartpole {
                q_h: *q_h,
                q_v: *q_v,
                q_vel: *q_vel,
                q_omega: *q_omega,
                length: *length,
            },
        }
    }

    pub fn hjb(&self) -> HjbConfig {
        HjbConfig::new(self.dt, self.horizon_steps).with_scheme(self.scheme)
    }

    /// Riccati feedback for a linear system with quadratic state cost, using
    /// the penalty weights as `R`; `None` for other problem classes.
    pub fn lqr_reference(&self) -> Result<Option<LqrSolution>> {
        let (SystemConfig::Linear { a, b, .. }, CostConfig::Quadratic { weights }) = (&self.system, &self.cost) else {
            return Ok(None);
        };
        let diag = |w: &[f64]| -> Vec<Vec<f64>> {
            (0..w.len())
                .map(|i| (0..w.len()).map(|j| if i == j { w[i] } else { 0.0 }).collect())
                .collect()
        };
        solve_care(a, b, &diag(weights), &diag(&self.penalty.weights)).map(Some)
    }

    /// SHA-256 of the canonical JSON form, excluding `output_dir` and `eval`,
    /// so that results from the same learning problem share a hash.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("configuration serializes to JSON");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
            map.remove("eval");
        }
        // serde_json maps are ordered by key, which makes the text canonical
        let text = serde_json::to_string(&value).expect("JSON value serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
