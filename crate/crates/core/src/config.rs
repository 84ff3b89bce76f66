//! TOML run and environment configuration.
//!
//! Every field is required; the shipped templates under `configs/` hold
//! the default values. Unknown keys are rejected so typos surface as errors.

use crate::bounds::Method;
use crate::boxes::IntervalBox;
use crate::env::{DynamicsModel, EnvSpec};
use crate::nn::ActionClip;
use crate::safety::{BoundKind, Obstacle, SafetySpec, StateBound, Track};
use crate::tensor::Matrix;
use crate::train::TrainingHyper;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("{path}: field `{field}`: {msg}")]
    Field { path: String, field: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum ModelFile {
    LaneBicycle { l_r: f64, l_f: f64 },
    PlanarBicycle { l_r: f64, l_f: f64 },
    Quad2d { mass: f64, length: f64, inertia: f64, gravity: f64 },
    Quad3d { mass: f64, arm: f64, kappa_z: f64, inertia: [f64; 3], gravity: f64 },
    Linear { a: Vec<Vec<f64>>, b: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum ObstacleFile {
    Static { dims: Vec<usize>, lb: Vec<f64>, ub: Vec<f64> },
    Moving { dims: Vec<usize>, start_lb: Vec<f64>, start_ub: Vec<f64>, end_lb: Vec<f64>, end_ub: Vec<f64>, duration: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateBoundFile {
    pub dim: usize,
    pub kind: String,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvFile {
    pub name: String,
    pub dt: f64,
    pub episode_len: usize,
    pub s0_lb: Vec<f64>,
    pub s0_ub: Vec<f64>,
    pub sample_lb: Vec<f64>,
    pub sample_ub: Vec<f64>,
    pub action_lo: Vec<f64>,
    pub action_hi: Vec<f64>,
    pub goal_dims: Vec<usize>,
    pub goal: Vec<f64>,
    pub dyn_hidden: usize,
    pub precision: f64,
    pub rmse_threshold: f64,
    pub terminate_dims: Vec<usize>,
    pub terminate_limit: f64,
    pub model: ModelFile,
    pub obstacles: Vec<ObstacleFile>,
    pub state_bounds: Vec<StateBoundFile>,
}

fn kind_name(k: BoundKind) -> &'static str {
    match k {
        BoundKind::Upper => "upper",
        BoundKind::Lower => "lower",
        BoundKind::Abs => "abs",
    }
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

impl EnvFile {
    pub fn from_spec(env: &EnvSpec) -> Self {
        let model = match &env.model {
            DynamicsModel::LaneBicycle { l_r, l_f } => ModelFile::LaneBicycle { l_r: *l_r, l_f: *l_f },
            DynamicsModel::PlanarBicycle { l_r, l_f } => ModelFile::PlanarBicycle { l_r: *l_r, l_f: *l_f },
            DynamicsModel::Quad2d { mass, length, inertia, gravity } => {
                ModelFile::Quad2d { mass: *mass, length: *length, inertia: *inertia, gravity: *gravity }
            }
            DynamicsModel::Quad3d { mass, arm, kappa_z, inertia, gravity } => {
                ModelFile::Quad3d { mass: *mass, arm: *arm, kappa_z: *kappa_z, inertia: *inertia, gravity: *gravity }
            }
            DynamicsModel::Linear { a, b } => ModelFile::Linear { a: rows(a), b: rows(b) },
        };
        let obstacles = env
            .spec
            .obstacles
            .iter()
            .map(|o| match &o.track {
                Track::Static { lb, ub } => ObstacleFile::Static { dims: o.dims.clone(), lb: lb.clone(), ub: ub.clone() },
                Track::Moving { start_lb, start_ub, end_lb, end_ub, duration } => ObstacleFile::Moving {
                    dims: o.dims.clone(),
                    start_lb: start_lb.clone(),
                    start_ub: start_ub.clone(),
                    end_lb: end_lb.clone(),
                    end_ub: end_ub.clone(),
                    duration: *duration,
                },
            })
            .collect();
        let state_bounds = env
            .spec
            .state_bounds
            .iter()
            .map(|b| StateBoundFile { dim: b.dim, kind: kind_name(b.kind).into(), threshold: b.threshold })
            .collect();
        Self {
            name: env.name.clone(),
            dt: env.dt,
            episode_len: env.episode_len,
            s0_lb: env.s0.lb().to_vec(),
            s0_ub: env.s0.ub().to_vec(),
            sample_lb: env.sample_range.lb().to_vec(),
            sample_ub: env.sample_range.ub().to_vec(),
            action_lo: env.action_clip.iter().map(|c| c.lo).collect(),
            action_hi: env.action_clip.iter().map(|c| c.hi).collect(),
            goal_dims: env.goal_dims.clone(),
            goal: env.goal.clone(),
            dyn_hidden: env.dyn_hidden,
            precision: env.precision,
            rmse_threshold: env.rmse_threshold,
            terminate_dims: env.terminate_dims.clone(),
            terminate_limit: env.terminate_limit,
            model,
            obstacles,
            state_bounds,
        }
    }

    pub fn to_spec(&self, path: &str) -> Result<EnvSpec, ConfigError> {
        let field = |f: &str, msg: String| ConfigError::Field { path: path.into(), field: f.into(), msg };
        let model = match &self.model {
            ModelFile::LaneBicycle { l_r, l_f } => DynamicsModel::LaneBicycle { l_r: *l_r, l_f: *l_f },
            ModelFile::PlanarBicycle { l_r, l_f } => DynamicsModel::PlanarBicycle { l_r: *l_r, l_f: *l_f },
            ModelFile::Quad2d { mass, length, inertia, gravity } => {
                DynamicsModel::Quad2d { mass: *mass, length: *length, inertia: *inertia, gravity: *gravity }
            }
            ModelFile::Quad3d { mass, arm, kappa_z, inertia, gravity } => {
                DynamicsModel::Quad3d { mass: *mass, arm: *arm, kappa_z: *kappa_z, inertia: *inertia, gravity: *gravity }
            }
            ModelFile::Linear { a, b } => {
                let ok = |m: &Vec<Vec<f64>>| !m.is_empty() && m.iter().all(|r| r.len() == m[0].len());
                if !ok(a) || !ok(b) || a.len() != a[0].len() || b.len() != a.len() {
                    return Err(field("model", "linear model needs square `a` and `b` with matching rows".into()));
                }
                DynamicsModel::Linear { a: Matrix::from_rows(a), b: Matrix::from_rows(b) }
            }
        };
        let s0 = IntervalBox::new(self.s0_lb.clone(), self.s0_ub.clone()).map_err(|e| field("s0_lb", e.to_string()))?;
        let sample_range =
            IntervalBox::new(self.sample_lb.clone(), self.sample_ub.clone()).map_err(|e| field("sample_lb", e.to_string()))?;
        if self.action_lo.len() != self.action_hi.len() {
            return Err(field("action_lo", "length differs from action_hi".into()));
        }
        let action_clip = self.action_lo.iter().zip(&self.action_hi).map(|(lo, hi)| ActionClip { lo: *lo, hi: *hi }).collect();
        let obstacles = self
            .obstacles
            .iter()
            .map(|o| match o {
                ObstacleFile::Static { dims, lb, ub } => Obstacle::fixed(dims.clone(), lb.clone(), ub.clone()),
                ObstacleFile::Moving { dims, start_lb, start_ub, end_lb, end_ub, duration } => Obstacle {
                    dims: dims.clone(),
                    track: Track::Moving {
                        start_lb: start_lb.clone(),
                        start_ub: start_ub.clone(),
                        end_lb: end_lb.clone(),
                        end_ub: end_ub.clone(),
                        duration: *duration,
                    },
                },
            })
            .collect();
        let state_bounds = self
            .state_bounds
            .iter()
            .map(|b| {
                let kind = match b.kind.as_str() {
                    "upper" => BoundKind::Upper,
                    "lower" => BoundKind::Lower,
                    "abs" => BoundKind::Abs,
                    other => return Err(field("state_bounds.kind", format!("`{other}` is not upper, lower or abs"))),
                };
                Ok(StateBound { dim: b.dim, kind, threshold: b.threshold })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let spec = SafetySpec::new(obstacles, state_bounds).map_err(|e| field("obstacles", e.to_string()))?;
        let env = EnvSpec {
            name: self.name.clone(),
            model,
            dt: self.dt,
            episode_len: self.episode_len,
            s0,
            sample_range,
            action_clip,
            spec,
            goal_dims: self.goal_dims.clone(),
            goal: self.goal.clone(),
            dyn_hidden: self.dyn_hidden,
            precision: self.precision,
            rmse_threshold: self.rmse_threshold,
            terminate_dims: self.terminate_dims.clone(),
            terminate_limit: self.terminate_limit,
        };
        env.validate().map_err(|e| ConfigError::Parse { path: path.into(), msg: e.to_string() })?;
        Ok(env)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Environment file, relative to the run config.
    pub env_file: String,
    pub seed: u64,
    pub k_target: usize,
    pub grid_budget: usize,
    pub output_dir: String,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSection {
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub gamma: f64,
    pub lr: f64,
    pub lambda_max: f64,
    pub a_r: f64,
    pub epsilon: f64,
    pub n_max: usize,
    pub bound_clip: f64,
    pub penalty: f64,
    pub penalty_margin: f64,
    pub batch_size: usize,
    pub rollout_len: usize,
    pub pretrain_steps: usize,
    pub grad_clip: f64,
    pub hidden: Vec<usize>,
    pub merge_window: usize,
    pub max_categories: usize,
    pub segment: usize,
    pub method: String,
    pub refine: bool,
    pub precision: f64,
    pub refine_max_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub precision: f64,
    pub method: String,
    /// Segment length for incremental bounding; 0 bounds the horizon at once.
    pub segment: usize,
    /// Leaf cap per initial cell; 0 means unlimited.
    pub max_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub samples: usize,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSection {
    pub max_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub dynamics: DynamicsSection,
    pub training: TrainingSection,
    pub verify: VerifySection,
    pub evaluation: EvalSection,
    pub synthesis: SynthesisSection,
}

fn parse_method(path: &str, field: &str, s: &str) -> Result<Method, ConfigError> {
    s.parse().map_err(|e: String| ConfigError::Field { path: path.into(), field: field.into(), msg: e })
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: path.into(), msg: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
        Self::from_toml(&text, &p)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn hyper(&self, path: &str) -> Result<TrainingHyper, ConfigError> {
        let t = &self.training;
        let hyper = TrainingHyper {
            gamma: t.gamma,
            lr: t.lr,
            lambda_max: t.lambda_max,
            a_r: t.a_r,
            epsilon: t.epsilon,
            n_max: t.n_max,
            bound_clip: t.bound_clip,
            penalty: t.penalty,
            penalty_margin: t.penalty_margin,
            batch_size: t.batch_size,
            rollout_len: t.rollout_len,
            pretrain_steps: t.pretrain_steps,
            grad_clip: t.grad_clip,
            hidden: t.hidden.clone(),
            merge_window: t.merge_window,
            max_categories: t.max_categories,
            segment: t.segment,
            method: parse_method(path, "training.method", &t.method)?,
            refine: t.refine,
            precision: t.precision,
            refine_max_cells: t.refine_max_cells,
            seed: self.run.seed,
        };
        hyper.validate().map_err(|e| ConfigError::Parse { path: path.into(), msg: e.to_string() })?;
        Ok(hyper)
    }

    pub fn bab_options(&self, path: &str) -> Result<crate::reach::BabOptions, ConfigError> {
        let v = &self.verify;
        if !(v.precision > 0.0) {
            return Err(ConfigError::Field { path: path.into(), field: "verify.precision".into(), msg: "must be positive".into() });
        }
        Ok(crate::reach::BabOptions {
            precision: v.precision,
            method: parse_method(path, "verify.method", &v.method)?,
            max_cells: (v.max_cells > 0).then_some(v.max_cells),
            segment: (v.segment > 0).then_some(v.segment),
        })
    }

    /// Environment file path resolved against the config's directory.
    pub fn env_path(&self, config_path: &Path) -> PathBuf {
        config_path.parent().unwrap_or(Path::new(".")).join(&self.run.env_file)
    }

    /// Config with training and run defaults for `env_file`.
    pub fn template(env_file: &str, output_dir: &str) -> Self {
        let h = TrainingHyper::default();
        RunConfig {
            run: RunSection {
                env_file: env_file.into(),
                seed: 0,
                k_target: 10,
                grid_budget: 16,
                output_dir: output_dir.into(),
                workers: 0,
            },
            dynamics: DynamicsSection { samples: 20000, epochs: 60, batch_size: 256, lr: 3e-3 },
            training: TrainingSection {
                gamma: h.gamma,
                lr: h.lr,
                lambda_max: h.lambda_max,
                a_r: h.a_r,
                epsilon: h.epsilon,
                n_max: h.n_max,
                bound_clip: h.bound_clip,
                penalty: h.penalty,
                penalty_margin: h.penalty_margin,
                batch_size: h.batch_size,
                rollout_len: h.rollout_len,
                pretrain_steps: h.pretrain_steps,
                grad_clip: h.grad_clip,
                hidden: h.hidden.clone(),
                merge_window: h.merge_window,
                max_categories: h.max_categories,
                segment: h.segment,
                method: h.method.to_string(),
                refine: h.refine,
                precision: h.precision,
                refine_max_cells: h.refine_max_cells,
            },
            verify: VerifySection { precision: 0.05, method: "crown".into(), segment: 5, max_cells: 0 },
            evaluation: EvalSection { samples: 100_000, episodes: 10 },
            synthesis: SynthesisSection { max_iterations: 4 },
        }
    }
}

pub fn load_env(path: &Path) -> Result<EnvSpec, ConfigError> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
    let file: EnvFile = toml::from_str(&text).map_err(|e| ConfigError::Parse { path: p.clone(), msg: e.to_string() })?;
    file.to_spec(&p)
}

pub fn env_to_toml(env: &EnvSpec) -> String {
    toml::to_string(&EnvFile::from_spec(env)).expect("env serialises")
}
