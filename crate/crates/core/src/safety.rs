//! Unsafe sets and the region cost used both for verdicts and as a loss.
//!
//! Obstacles are open boxes (touching a face is safe) over a subset of the
//! state dimensions, optionally moving linearly in time. State bounds are
//! scalar constraints on single dimensions. For a bound box with endpoints
//! `lb, ub`, an obstacle `[a, b]` costs `prod_j relu(ub_j - a_j) * relu(b_j - lb_j)`
//! and a state bound costs the positive part of its violated endpoint.

use crate::autodiff::{Graph, Var};
use crate::boxes::IntervalBox;
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SafetyError {
    #[error("obstacle {0}: {1}")]
    Obstacle(usize, String),
    #[error("state bound {0}: {1}")]
    StateBound(usize, String),
}

/// Position of an obstacle over time.
#[derive(Debug, Clone, PartialEq)]
pub enum Track {
    Static { lb: Vec<f64>, ub: Vec<f64> },
    /// Linear interpolation from `start` to `end` over `duration` steps, then held.
    Moving { start_lb: Vec<f64>, start_ub: Vec<f64>, end_lb: Vec<f64>, end_ub: Vec<f64>, duration: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    /// State dimensions the obstacle box lives in.
    pub dims: Vec<usize>,
    pub track: Track,
}

impl Obstacle {
    pub fn fixed(dims: Vec<usize>, lb: Vec<f64>, ub: Vec<f64>) -> Self {
        Self { dims, track: Track::Static { lb, ub } }
    }

    /// A square of side `diameter` whose center moves from `from` to `to`.
    pub fn moving_square(dims: Vec<usize>, from: &[f64], to: &[f64], diameter: f64, duration: usize) -> Self {
        let h = 0.5 * diameter;
        Self {
            dims,
            track: Track::Moving {
                start_lb: from.iter().map(|v| v - h).collect(),
                start_ub: from.iter().map(|v| v + h).collect(),
                end_lb: to.iter().map(|v| v - h).collect(),
                end_ub: to.iter().map(|v| v + h).collect(),
                duration,
            },
        }
    }

    /// Obstacle interval along its `j`-th dim at `step`.
    pub fn interval(&self, step: usize, j: usize) -> (f64, f64) {
        match &self.track {
            Track::Static { lb, ub } => (lb[j], ub[j]),
            Track::Moving { start_lb, start_ub, end_lb, end_ub, duration } => {
                let t = if *duration == 0 { 1.0 } else { step.min(*duration) as f64 / *duration as f64 };
                (start_lb[j] + t * (end_lb[j] - start_lb[j]), start_ub[j] + t * (end_ub[j] - start_ub[j]))
            }
        }
    }

    /// Obstacle interval per dim at `step`.
    pub fn at(&self, step: usize) -> (Vec<f64>, Vec<f64>) {
        (0..self.dims.len()).map(|j| self.interval(step, j)).unzip()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundKind {
    /// `s_dim <= threshold`
    Upper,
    /// `s_dim >= threshold`
    Lower,
    /// `|s_dim| <= threshold`
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateBound {
    pub dim: usize,
    pub kind: BoundKind,
    pub threshold: f64,
}

/// Obstacles followed by state bounds; constraint `i` indexes that order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SafetySpec {
    pub obstacles: Vec<Obstacle>,
    pub state_bounds: Vec<StateBound>,
}

impl SafetySpec {
    pub fn new(obstacles: Vec<Obstacle>, state_bounds: Vec<StateBound>) -> Result<Self, SafetyError> {
        for (i, o) in obstacles.iter().enumerate() {
            let check = |lb: &[f64], ub: &[f64]| -> Result<(), SafetyError> {
                if lb.len() != o.dims.len() || ub.len() != o.dims.len() {
                    return Err(SafetyError::Obstacle(i, "box length differs from dims".into()));
                }
                if lb.iter().zip(ub).any(|(l, u)| !(l.is_finite() && u.is_finite() && l < u)) {
                    return Err(SafetyError::Obstacle(i, "box must be finite and nonempty".into()));
                }
                Ok(())
            };
            match &o.track {
                Track::Static { lb, ub } => check(lb, ub)?,
                Track::Moving { start_lb, start_ub, end_lb, end_ub, .. } => {
                    check(start_lb, start_ub)?;
                    check(end_lb, end_ub)?;
                }
            }
        }
        for (i, b) in state_bounds.iter().enumerate() {
            if !b.threshold.is_finite() {
                return Err(SafetyError::StateBound(i, "threshold must be finite".into()));
            }
            if b.kind == BoundKind::Abs && b.threshold < 0.0 {
                return Err(SafetyError::StateBound(i, "absolute bound needs a nonnegative threshold".into()));
            }
        }
        Ok(Self { obstacles, state_bounds })
    }

    pub fn num_constraints(&self) -> usize {
        self.obstacles.len() + self.state_bounds.len()
    }

    /// Dimensions that appear in any constraint, ascending.
    pub fn relevant_dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self
            .obstacles
            .iter()
            .flat_map(|o| o.dims.iter().copied())
            .chain(self.state_bounds.iter().map(|b| b.dim))
            .collect();
        dims.sort_unstable();
        dims.dedup();
        dims
    }

    /// Cost of each constraint for a bound box at `step`.
    pub fn constraint_costs(&self, bound: &IntervalBox, step: usize) -> Vec<f64> {
        let (lb, ub) = (bound.lb(), bound.ub());
        let mut costs = Vec::with_capacity(self.num_constraints());
        for o in &self.obstacles {
            let (a, b) = o.at(step);
            let mut c = 1.0;
            for (j, &d) in o.dims.iter().enumerate() {
                c *= (ub[d] - a[j]).max(0.0) * (b[j] - lb[d]).max(0.0);
            }
            costs.push(c);
        }
        for sb in &self.state_bounds {
            let d = sb.dim;
            costs.push(match sb.kind {
                BoundKind::Upper => (ub[d] - sb.threshold).max(0.0),
                BoundKind::Lower => (sb.threshold - lb[d]).max(0.0),
                BoundKind::Abs => (ub[d] - sb.threshold).max(0.0) + (-sb.threshold - lb[d]).max(0.0),
            });
        }
        costs
    }

    /// Total region cost; zero iff the box is clear of every constraint.
    pub fn region_cost(&self, bound: &IntervalBox, step: usize) -> f64 {
        self.constraint_costs(bound, step).iter().sum()
    }

    /// Indices of constraints with positive cost.
    pub fn violated(&self, bound: &IntervalBox, step: usize) -> Vec<usize> {
        self.constraint_costs(bound, step)
            .iter()
            .enumerate()
            .filter(|(_, c)| **c > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Whether a single state violates some constraint at `step`; agrees
    /// with `region_cost` of the degenerate box at `x` being positive.
    pub fn point_violates(&self, x: &[f64], step: usize) -> bool {
        let in_obstacle = self.obstacles.iter().any(|o| {
            o.dims.iter().enumerate().all(|(j, &d)| {
                let (a, b) = o.interval(step, j);
                x[d] > a && x[d] < b
            })
        });
        in_obstacle
            || self.state_bounds.iter().any(|sb| match sb.kind {
                BoundKind::Upper => x[sb.dim] > sb.threshold,
                BoundKind::Lower => x[sb.dim] < sb.threshold,
                BoundKind::Abs => x[sb.dim].abs() > sb.threshold,
            })
    }

    /// Minimum over constraints of the L-infinity gap to the constraint
    /// region; zero when intersecting, infinite without constraints.
    pub fn distance_to_unsafe(&self, bound: &IntervalBox, step: usize) -> f64 {
        let (lb, ub) = (bound.lb(), bound.ub());
        let mut best = f64::INFINITY;
        for o in &self.obstacles {
            let (a, b) = o.at(step);
            let mut gap: f64 = 0.0;
            for (j, &d) in o.dims.iter().enumerate() {
                gap = gap.max((a[j] - ub[d]).max(lb[d] - b[j]).max(0.0));
            }
            best = best.min(gap);
        }
        for sb in &self.state_bounds {
            let d = sb.dim;
            let gap = match sb.kind {
                BoundKind::Upper => sb.threshold - ub[d],
                BoundKind::Lower => lb[d] - sb.threshold,
                BoundKind::Abs => (sb.threshold - ub[d]).min(lb[d] + sb.threshold),
            };
            best = best.min(gap.max(0.0));
        }
        best
    }

    /// Differentiable region cost per column of `(lb, ub)`, as a `1 x c` row.
    pub fn tape_cost(&self, g: &mut Graph, lb: Var, ub: Var, step: usize) -> Option<Var> {
        let cols = g.value(lb).cols();
        let mut total: Option<Var> = None;
        let mut add = |g: &mut Graph, v: Var| {
            total = Some(match total {
                None => v,
                Some(t) => g.add(t, v),
            });
        };
        for o in &self.obstacles {
            let (a, b) = o.at(step);
            let mut prod: Option<Var> = None;
            for (j, &d) in o.dims.iter().enumerate() {
                let u = g.rows(ub, d, 1);
                let l = g.rows(lb, d, 1);
                let u = g.add_scalar(u, -a[j]);
                let u = g.relu(u);
                let l = g.scale(l, -1.0);
                let l = g.add_scalar(l, b[j]);
                let l = g.relu(l);
                let f = g.mul(u, l);
                prod = Some(match prod {
                    None => f,
                    Some(p) => g.mul(p, f),
                });
            }
            if let Some(p) = prod {
                add(g, p);
            }
        }
        for sb in &self.state_bounds {
            let d = sb.dim;
            let u = g.rows(ub, d, 1);
            let l = g.rows(lb, d, 1);
            let v = match sb.kind {
                BoundKind::Upper => {
                    let x = g.add_scalar(u, -sb.threshold);
                    g.relu(x)
                }
                BoundKind::Lower => {
                    let x = g.scale(l, -1.0);
                    let x = g.add_scalar(x, sb.threshold);
                    g.relu(x)
                }
                BoundKind::Abs => {
                    let x = g.add_scalar(u, -sb.threshold);
                    let x = g.relu(x);
                    let y = g.scale(l, -1.0);
                    let y = g.add_scalar(y, -sb.threshold);
                    let y = g.relu(y);
                    g.add(x, y)
                }
            };
            add(g, v);
        }
        debug_assert!(total.map_or(true, |t| g.value(t).shape() == (1, cols)));
        total
    }
}

/// Zero row helper for callers that need a cost node even without constraints.
pub fn zero_row(g: &mut Graph, cols: usize) -> Var {
    g.constant(Matrix::zeros(1, cols))
}
