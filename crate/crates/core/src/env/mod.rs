//! Benchmark control environments.
//!
//! Each [`EnvSpec`] carries the continuous-time model used to generate
//! training data, its Euler discretisation, the initial region, the
//! safety constraints and the reward target. Verification and simulation never
//! call the ODE; they act on the fitted ReLU dynamics.

mod data;
mod sim;

pub use data::{fit_dynamics, generate_dataset, rmse, DynamicsDataset, FitOptions, FitResult};
pub use sim::{empirical_safety, simulate_episode, Episode, Policy};

use crate::boxes::IntervalBox;
use crate::nn::{ActionClip, AffineLayer, ReluNet};
use crate::safety::{BoundKind, Obstacle, SafetySpec, StateBound};
use crate::tensor::Matrix;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown environment `{0}`")]
    Unknown(String),
    #[error("initial state {0:?} lies outside the initial region")]
    OutsideInitial(Vec<f64>),
    #[error("dynamics fit diverged at epoch {0}")]
    Divergence(usize),
    #[error("invalid environment: {0}")]
    Invalid(String),
    #[error("dataset file: {0}")]
    Dataset(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Continuous-time plant models.
#[derive(Debug, Clone, PartialEq)]
pub enum DynamicsModel {
    /// `(x, theta, v)` lateral bicycle model; actions `(acc, delta_f)`.
    LaneBicycle { l_r: f64, l_f: f64 },
    /// `(x, y, theta, v)` with heading measured from the y-axis; actions `(acc, delta_f)`.
    PlanarBicycle { l_r: f64, l_f: f64 },
    /// `(p_h, p_v, theta, dp_h, dp_v, dtheta)`; two rotor thrusts.
    Quad2d { mass: f64, length: f64, inertia: f64, gravity: f64 },
    /// `(x, y, z, phi, theta, psi, dx, dy, dz, w_x, w_y, w_z)`; four rotor thrusts.
    Quad3d { mass: f64, arm: f64, kappa_z: f64, inertia: [f64; 3], gravity: f64 },
    /// Discrete map `s' = A s + B a`.
    Linear { a: Matrix, b: Matrix },
}

impl DynamicsModel {
    pub fn state_dim(&self) -> usize {
        match self {
            DynamicsModel::LaneBicycle { .. } => 3,
            DynamicsModel::PlanarBicycle { .. } => 4,
            DynamicsModel::Quad2d { .. } => 6,
            DynamicsModel::Quad3d { .. } => 12,
            DynamicsModel::Linear { a, .. } => a.rows(),
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            DynamicsModel::LaneBicycle { .. } | DynamicsModel::PlanarBicycle { .. } | DynamicsModel::Quad2d { .. } => 2,
            DynamicsModel::Quad3d { .. } => 4,
            DynamicsModel::Linear { b, .. } => b.cols(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub name: String,
    pub model: DynamicsModel,
    pub dt: f64,
    pub episode_len: usize,
    pub s0: IntervalBox,
    /// State range sampled for dynamics data.
    pub sample_range: IntervalBox,
    pub action_clip: Vec<ActionClip>,
    pub spec: SafetySpec,
    /// Reward is `exp(-|s[goal_dims] - goal|_2)`.
    pub goal_dims: Vec<usize>,
    pub goal: Vec<f64>,
    /// Width of each of the two hidden ReLU layers of the dynamics net.
    pub dyn_hidden: usize,
    pub precision: f64,
    pub rmse_threshold: f64,
    /// Episodes end once `|s_d| > terminate_limit` for some `d` here.
    pub terminate_dims: Vec<usize>,
    pub terminate_limit: f64,
}

pub const ENV_NAMES: [&str; 5] = ["lane_following", "vehicle_avoidance", "quad2d_fixed", "quad2d_moving", "quad3d"];

fn clip(lo: &[f64], hi: &[f64]) -> Vec<ActionClip> {
    lo.iter().zip(hi).map(|(l, h)| ActionClip { lo: *l, hi: *h }).collect()
}

fn bx(iv: &[(f64, f64)]) -> IntervalBox {
    IntervalBox::from_intervals(iv).expect("static box")
}

fn abs_bound(dim: usize, threshold: f64) -> StateBound {
    StateBound { dim, kind: BoundKind::Abs, threshold }
}

const MOVE_STEPS: usize = 500;

impl EnvSpec {
    pub fn builtin(name: &str) -> Result<EnvSpec, EnvError> {
        Ok(match name {
            "lane_following" => Self::lane_following(),
            "vehicle_avoidance" => Self::vehicle_avoidance(),
            "quad2d_fixed" => Self::quad2d(false),
            "quad2d_moving" => Self::quad2d(true),
            "quad3d" => Self::quad3d(),
            "corridor" => Self::corridor(),
            other => return Err(EnvError::Unknown(other.to_string())),
        })
    }

    pub fn lane_following() -> EnvSpec {
        EnvSpec {
            name: "lane_following".into(),
            model: DynamicsModel::LaneBicycle { l_r: 1.45, l_f: 1.45 },
            dt: 0.1,
            episode_len: 500,
            s0: bx(&[(-0.5, 0.5), (-0.2, 0.2), (0.0, 0.5)]),
            sample_range: bx(&[(-1.0, 1.0), (-1.0, 1.0), (-0.5, 5.5)]),
            action_clip: clip(&[-2.0, -0.5], &[2.0, 0.5]),
            spec: SafetySpec::new(
                vec![],
                vec![abs_bound(0, 0.7), abs_bound(1, PI / 4.0), StateBound { dim: 2, kind: BoundKind::Upper, threshold: 5.0 }],
            )
            .expect("static spec"),
            goal_dims: vec![0, 1, 2],
            goal: vec![0.0, 0.0, 1.0],
            dyn_hidden: 8,
            precision: 0.025,
            rmse_threshold: 0.02,
            terminate_dims: vec![],
            terminate_limit: 0.0,
        }
    }

    pub fn vehicle_avoidance() -> EnvSpec {
        let tracks = [
            ([-0.6, 1.0], [-0.35, 2.0]),
            ([0.6, 0.0], [0.75, 1.0]),
            ([0.0, 1.0], [0.0, 2.0]),
            ([-0.85, 1.0], [-1.6, 1.5]),
            ([0.75, 0.0], [0.85, 0.0]),
        ];
        let obstacles = tracks.iter().map(|(a, b)| Obstacle::moving_square(vec![0, 1], a, b, 0.1, MOVE_STEPS)).collect();
        EnvSpec {
            name: "vehicle_avoidance".into(),
            model: DynamicsModel::PlanarBicycle { l_r: 1.45, l_f: 1.45 },
            dt: 0.1,
            episode_len: 500,
            s0: bx(&[(-0.5, 0.5), (-0.5, 0.5), (-0.2, 0.2), (0.0, 0.1)]),
            sample_range: bx(&[(-2.0, 2.0), (-1.0, 3.0), (-1.8, 1.8), (-0.5, 5.5)]),
            action_clip: clip(&[-2.0, -0.5], &[2.0, 0.5]),
            spec: SafetySpec::new(
                obstacles,
                vec![StateBound { dim: 3, kind: BoundKind::Upper, threshold: 5.0 }, abs_bound(2, PI / 2.0)],
            )
            .expect("static spec"),
            goal_dims: vec![0, 1],
            goal: vec![1.0, 2.0],
            dyn_hidden: 10,
            precision: 0.025,
            rmse_threshold: 0.02,
            terminate_dims: vec![],
            terminate_limit: 0.0,
        }
    }

    pub fn quad2d(moving: bool) -> EnvSpec {
        let obstacles: Vec<Obstacle> = if moving {
            [
                ([0.6, 0.0], [0.6, 0.1]),
                ([-0.5, 0.2], [-0.4, 0.3]),
                ([-0.3, 0.4], [-0.4, 0.5]),
                ([-0.1, 0.3], [0.0, 0.4]),
                ([-0.7, 0.5], [-0.4, 0.6]),
            ]
            .iter()
            .map(|(a, b)| Obstacle::moving_square(vec![0, 1], a, b, 0.1, MOVE_STEPS))
            .collect()
        } else {
            [
                (-0.3, -0.1, 0.4, 0.6),
                (-1.2, -0.8, 0.2, 0.4),
                (0.0, 0.1, 0.5, 1.0),
                (0.6, 0.7, 0.0, 0.2),
                (-0.8, -0.7, 0.7, 0.9),
            ]
            .iter()
            .map(|&(xl, xu, yl, yu)| Obstacle::fixed(vec![0, 1], vec![xl, yl], vec![xu, yu]))
            .collect()
        };
        EnvSpec {
            name: if moving { "quad2d_moving" } else { "quad2d_fixed" }.into(),
            model: DynamicsModel::Quad2d { mass: 0.486, length: 0.25, inertia: 0.00383, gravity: 9.81 },
            dt: 0.02,
            episode_len: 500,
            s0: bx(&[(-0.5, 0.5), (-0.1, 0.1), (-0.1, 0.1), (-0.1, 0.1), (-0.1, 0.1), (-0.1, 0.1)]),
            sample_range: bx(&[(-1.5, 1.5), (-0.5, 1.5), (-1.2, 1.2), (-2.0, 2.0), (-2.0, 2.0), (-4.0, 4.0)]),
            action_clip: clip(&[0.0, 0.0], &[7.5, 7.5]),
            spec: SafetySpec::new(
                obstacles,
                vec![abs_bound(2, PI / 3.0), StateBound { dim: 1, kind: BoundKind::Lower, threshold: -0.2 }],
            )
            .expect("static spec"),
            goal_dims: vec![0, 1],
            goal: vec![0.6, 0.6],
            dyn_hidden: 6,
            precision: 0.0125,
            rmse_threshold: 0.02,
            terminate_dims: vec![],
            terminate_limit: 0.0,
        }
    }

    pub fn quad3d() -> EnvSpec {
        let obstacles = [
            (-0.5, 0.5, -0.2, 0.2, -0.65, -0.55),
            (-0.7, -0.6, -0.1, 0.1, -0.5, -0.4),
            (0.5, 0.6, -0.2, 0.2, -0.4, -0.3),
            (-0.8, -0.6, 0.2, 0.4, -0.3, -0.2),
            (-0.8, -0.6, -0.4, -0.2, -0.2, -0.1),
        ]
        .iter()
        .map(|&(xl, xu, yl, yu, zl, zu)| Obstacle::fixed(vec![0, 1, 2], vec![xl, yl, zl], vec![xu, yu, zu]))
        .collect();
        let mut s0 = vec![(-0.5, 0.5), (-0.1, 0.1), (-0.5, -0.3)];
        s0.extend(std::iter::repeat((-0.05, 0.05)).take(9));
        let mut range = vec![(-1.0, 1.0), (-1.0, 1.0), (-1.0, 0.5)];
        range.extend(std::iter::repeat((-1.2, 1.2)).take(3));
        range.extend(std::iter::repeat((-2.0, 2.0)).take(3));
        range.extend(std::iter::repeat((-4.0, 4.0)).take(3));
        EnvSpec {
            name: "quad3d".into(),
            model: DynamicsModel::Quad3d { mass: 0.468, arm: 0.225, kappa_z: 0.01, inertia: [4.9e-3, 4.9e-3, 8.8e-3], gravity: 9.81 },
            dt: 0.02,
            episode_len: 500,
            s0: bx(&s0),
            sample_range: bx(&range),
            action_clip: clip(&[0.0; 4], &[5.0; 4]),
            spec: SafetySpec::new(obstacles, vec![]).expect("static spec"),
            goal_dims: vec![0, 1, 2],
            goal: vec![0.0, 0.0, 0.0],
            dyn_hidden: 16,
            precision: 0.00625,
            rmse_threshold: 0.05,
            terminate_dims: vec![3, 4],
            terminate_limit: PI / 3.0,
        }
    }

    /// One-dimensional corridor `s' = s + a` whose goal lies inside the
    /// wall `(1, 2)`, so the controller must stop short of it.
    pub fn corridor() -> EnvSpec {
        let spec = SafetySpec::new(vec![Obstacle::fixed(vec![0], vec![1.0], vec![2.0])], vec![]).expect("static spec");
        let mut env = Self::linear(
            "corridor",
            Matrix::identity(1),
            Matrix::identity(1),
            bx(&[(0.0, 0.1)]),
            clip(&[-0.5], &[0.5]),
            spec,
            vec![1.5],
        );
        env.episode_len = 50;
        env.sample_range = bx(&[(-1.0, 3.0)]);
        env.precision = 0.05;
        env
    }

    /// Environment around a discrete linear map, used for toy problems.
    pub fn linear(
        name: &str,
        a: Matrix,
        b: Matrix,
        s0: IntervalBox,
        action_clip: Vec<ActionClip>,
        spec: SafetySpec,
        goal: Vec<f64>,
    ) -> EnvSpec {
        let n = a.rows();
        EnvSpec {
            name: name.into(),
            model: DynamicsModel::Linear { a, b },
            dt: 1.0,
            episode_len: 500,
            sample_range: s0.clone(),
            s0,
            action_clip,
            spec,
            goal_dims: (0..n).collect(),
            goal,
            dyn_hidden: 8,
            precision: 0.025,
            rmse_threshold: 1e-3,
            terminate_dims: vec![],
            terminate_limit: 0.0,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.model.action_dim()
    }

    /// Checks the structural invariants (dimensions, `S_0` inside the safe set).
    pub fn validate(&self) -> Result<(), EnvError> {
        let n = self.state_dim();
        let bad = |m: &str| Err(EnvError::Invalid(format!("{}: {m}", self.name)));
        if self.s0.dim() != n || self.sample_range.dim() != n {
            return bad("initial or sampling box has the wrong dimension");
        }
        if self.action_clip.len() != self.action_dim() {
            return bad("action clip count differs from action dimension");
        }
        if !(self.dt > 0.0) || self.episode_len == 0 {
            return bad("dt must be positive and the episode nonempty");
        }
        if self.goal_dims.len() != self.goal.len() || self.goal_dims.iter().any(|d| *d >= n) {
            return bad("goal dims do not match goal values");
        }
        let dims = self.spec.relevant_dims();
        if dims.iter().any(|d| *d >= n) || self.terminate_dims.iter().any(|d| *d >= n) {
            return bad("constraint refers to a missing state dimension");
        }
        if self.spec.region_cost(&self.s0, 0) > 0.0 {
            return bad("initial region intersects the unsafe set");
        }
        Ok(())
    }

    /// Continuous-time derivative `ds/dt`.
    pub fn ode_rhs(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        match &self.model {
            DynamicsModel::LaneBicycle { l_r, l_f } => {
                let (theta, v) = (s[1], s[2]);
                let beta = (l_r / (l_f + l_r) * a[1].tan()).atan();
                vec![v * (theta + beta).sin(), v / l_r * beta.sin(), a[0]]
            }
            DynamicsModel::PlanarBicycle { l_r, l_f } => {
                let (theta, v) = (s[2], s[3]);
                let beta = (l_r / (l_f + l_r) * a[1].tan()).atan();
                vec![v * (theta + beta).sin(), v * (theta + beta).cos(), v / l_r * beta.sin(), a[0]]
            }
            DynamicsModel::Quad2d { mass, length, inertia, gravity } => {
                let theta = s[2];
                let thrust = a[0] + a[1];
                vec![
                    s[3],
                    s[4],
                    s[5],
                    -theta.sin() / mass * thrust,
                    theta.cos() / mass * thrust - gravity,
                    length / inertia * (a[0] - a[1]),
                ]
            }
            DynamicsModel::Quad3d { mass, arm, kappa_z, inertia, gravity } => quad3d_rhs(s, a, *mass, *arm, *kappa_z, inertia, *gravity),
            DynamicsModel::Linear { a: am, b: bm } => {
                let next = self.linear_next(am, bm, s, a);
                next.iter().zip(s).map(|(n, x)| (n - x) / self.dt).collect()
            }
        }
    }

    fn linear_next(&self, am: &Matrix, bm: &Matrix, s: &[f64], a: &[f64]) -> Vec<f64> {
        am.mul_vec(s).iter().zip(bm.mul_vec(a)).map(|(x, y)| x + y).collect()
    }

    /// One explicit Euler step `s + dt * f(s, a)`.
    pub fn euler_step(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        if let DynamicsModel::Linear { a: am, b: bm } = &self.model {
            return self.linear_next(am, bm, s, a);
        }
        let d = self.ode_rhs(s, a);
        s.iter().zip(d).map(|(x, v)| x + self.dt * v).collect()
    }

    pub fn clip_action(&self, a: &mut [f64]) {
        for (v, c) in a.iter_mut().zip(&self.action_clip) {
            *v = v.clamp(c.lo, c.hi);
        }
    }

    pub fn goal_distance(&self, s: &[f64]) -> f64 {
        self.goal_dims.iter().zip(&self.goal).map(|(d, g)| (s[*d] - g).powi(2)).sum::<f64>().sqrt()
    }

    pub fn reward(&self, s: &[f64]) -> f64 {
        (-self.goal_distance(s)).exp()
    }

    pub fn terminated(&self, s: &[f64]) -> bool {
        self.terminate_dims.iter().any(|d| s[*d].abs() > self.terminate_limit)
    }

    /// Exact ReLU form of a linear model's map (identity-activated hidden channels).
    pub fn exact_linear_dynamics(&self) -> Option<ReluNet> {
        let DynamicsModel::Linear { a, b } = &self.model else { return None };
        let n = a.rows();
        let w = a.hstack(b);
        Some(ReluNet::new(vec![AffineLayer::new(w, vec![0.0; n])]).expect("linear dynamics net"))
    }
}

fn quad3d_rhs(s: &[f64], u: &[f64], mass: f64, arm: f64, kz: f64, inertia: &[f64; 3], g: f64) -> Vec<f64> {
    let (phi, theta, psi) = (s[3], s[4], s[5]);
    let w = [s[9], s[10], s[11]];
    let plant = [
        u[0] + u[1] + u[2] + u[3],
        arm * (u[1] - u[3]),
        arm * (-u[0] + u[2]),
        kz * (u[0] - u[1] + u[2] - u[3]),
    ];
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    let (ss, cs) = psi.sin_cos();
    // R = Rz(psi) Ry(theta) Rx(phi); only the third column multiplies the thrust.
    let r_col3 = [cs * st * cp + ss * sp, ss * st * cp - cs * sp, ct * cp];
    let f = plant[0] / mass;
    let acc = [r_col3[0] * f, r_col3[1] * f, r_col3[2] * f - g];
    let iw = [inertia[0] * w[0], inertia[1] * w[1], inertia[2] * w[2]];
    let cross = [w[1] * iw[2] - w[2] * iw[1], w[2] * iw[0] - w[0] * iw[2], w[0] * iw[1] - w[1] * iw[0]];
    let wdot = [
        (-cross[0] + plant[1]) / inertia[0],
        (-cross[1] + plant[2]) / inertia[1],
        (-cross[2] + plant[3]) / inertia[2],
    ];
    let tt = theta.tan();
    let euler = [
        w[0] + sp * tt * w[1] + cp * tt * w[2],
        cp * w[1] - sp * w[2],
        sp / ct * w[1] + cp / ct * w[2],
    ];
    vec![s[6], s[7], s[8], euler[0], euler[1], euler[2], acc[0], acc[1], acc[2], wdot[0], wdot[1], wdot[2]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_valid() {
        for name in ENV_NAMES {
            let env = EnvSpec::builtin(name).unwrap();
            env.validate().unwrap();
            assert_eq!(env.name, name);
        }
        assert!(matches!(EnvSpec::builtin("cartpole"), Err(EnvError::Unknown(_))));
    }

    #[test]
    fn lane_equilibrium_and_euler() {
        let env = EnvSpec::lane_following();
        assert_eq!(env.ode_rhs(&[0.0, 0.0, 1.0], &[0.0, 0.0]), vec![0.0, 0.0, 0.0]);
        let next = env.euler_step(&[0.0, PI / 6.0, 2.0], &[0.0, 0.0]);
        assert!((next[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn quad2d_hover_and_free_fall() {
        let env = EnvSpec::quad2d(false);
        let hover = 0.486 * 9.81 / 2.0;
        let d = env.ode_rhs(&[0.0; 6], &[hover, hover]);
        assert!(d.iter().all(|v| v.abs() < 1e-12), "{d:?}");
        let d = env.ode_rhs(&[0.0; 6], &[0.0, 0.0]);
        assert_eq!(d[4], -9.81);
        let next = env.euler_step(&[0.0; 6], &[0.0, 0.0]);
        assert!((next[4] - (-9.81 * 0.02)).abs() < 1e-15);
    }

    #[test]
    fn quad3d_hover() {
        let env = EnvSpec::quad3d();
        let u = 0.468 * 9.81 / 4.0;
        let d = env.ode_rhs(&[0.0; 12], &[u; 4]);
        assert!(d.iter().all(|v| v.abs() < 1e-12), "{d:?}");
        // Roll torque from unequal thrusts on rotors 1 and 3.
        let d = env.ode_rhs(&[0.0; 12], &[u, u + 0.1, u, u - 0.1]);
        assert!((d[9] - 0.225 * 0.2 / 4.9e-3).abs() < 1e-9);
        assert!(env.terminated(&[0.0, 0.0, 0.0, 1.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn euler_zero_rhs_is_fixed_point() {
        let env = EnvSpec::vehicle_avoidance();
        let s = [0.3, -0.2, 0.1, 0.0];
        assert_eq!(env.euler_step(&s, &[0.0, 0.0]), s.to_vec());
    }

    #[test]
    fn euler_truncation_error_is_second_order() {
        let mut env = EnvSpec::lane_following();
        let s = [0.1, 0.2, 1.5];
        let a = [0.3, 0.1];
        // Reference: fine Euler integration over one nominal step.
        let exact = |env: &EnvSpec, h: f64| {
            let mut x = s.to_vec();
            let n = 20000;
            let mut e = env.clone();
            e.dt = h / n as f64;
            for _ in 0..n {
                x = e.euler_step(&x, &a);
            }
            x
        };
        let err = |env: &mut EnvSpec, h: f64| {
            env.dt = h;
            let one = env.euler_step(&s, &a);
            let refx = exact(env, h);
            one.iter().zip(&refx).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
        };
        let e1 = err(&mut env, 0.1);
        let e2 = err(&mut env, 0.05);
        let ratio = e1 / e2;
        assert!((ratio - 4.0).abs() < 0.3, "ratio {ratio}");
    }
}
