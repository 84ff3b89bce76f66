//! Controller pretraining and curriculum training with a bound loss.
//!
//! The safe RL term is a discounted penalised trajectory loss obtained by
//! differentiating through the fitted dynamics. The bound term sums region
//! costs of differentiable IBP boxes over the unverified cells and the
//! memory buffer. Phase `k` of the curriculum trains until every grid cell
//! is proven safe for steps `1..=k` or the round budget runs out.

use crate::autodiff::{Graph, Var};
use crate::bounds::{tape_ibp_rollout, BoundError, Method};
use crate::boxes::IntervalBox;
use crate::env::EnvSpec;
use crate::nn::{tape_step, ClosedLoopSystem, NetVars, NnError, ParamVector, ReluNet};
use crate::optim::{stream_rng, Adam};
use crate::reach::{branch_and_bound, boxes_safe, extend_step_bounds, BabOptions, GridCell, ReachError, StepBounds};
use crate::safety::SafetySpec;
use crate::tensor::Matrix;
use rand::Rng;
use rayon::prelude::*;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
    #[error("training diverged at step {0}")]
    Divergence(usize),
    #[error(transparent)]
    Net(#[from] NnError),
    #[error(transparent)]
    Reach(#[from] ReachError),
    #[error(transparent)]
    Bound(#[from] BoundError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingHyper {
    pub gamma: f64,
    pub lr: f64,
    pub lambda_max: f64,
    pub a_r: f64,
    /// Buffer admission distance.
    pub epsilon: f64,
    /// Training rounds per phase.
    pub n_max: usize,
    /// Ceiling on the bound loss.
    pub bound_clip: f64,
    /// Weight of the unsafe-state cost in the safe RL loss.
    pub penalty: f64,
    /// Half-width of the box around each state whose cost is penalised.
    pub penalty_margin: f64,
    /// Initial states per safe RL batch.
    pub batch_size: usize,
    /// Unrolled steps per safe RL rollout.
    pub rollout_len: usize,
    pub pretrain_steps: usize,
    pub grad_clip: f64,
    /// Hidden layer widths of the controller.
    pub hidden: Vec<usize>,
    /// Buffer categories span this many consecutive phase indices.
    pub merge_window: usize,
    pub max_categories: usize,
    /// Segment length for incremental bounding.
    pub segment: usize,
    /// Bounds deciding which cells count as unverified during training.
    pub method: Method,
    /// Refine unverified cells by branch-and-bound at the start of each phase.
    pub refine: bool,
    pub precision: f64,
    /// Leaf cap per refined cell.
    pub refine_max_cells: usize,
    pub seed: u64,
}

impl Default for TrainingHyper {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 1e-3,
            lambda_max: 10.0,
            a_r: 0.5,
            epsilon: 0.05,
            n_max: 200,
            bound_clip: 100.0,
            penalty: 100.0,
            penalty_margin: 0.02,
            batch_size: 64,
            rollout_len: 50,
            pretrain_steps: 300,
            grad_clip: 10.0,
            hidden: vec![32, 32],
            merge_window: 5,
            max_categories: 32,
            segment: 5,
            method: Method::Ibp,
            refine: true,
            precision: 0.05,
            refine_max_cells: 64,
            seed: 0,
        }
    }
}

impl TrainingHyper {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Hyper(m.into()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.lr >= 0.0) || !(self.lambda_max > 0.0) || !(self.a_r > 0.0) {
            return bad("lr must be nonnegative and lambda_max, a_r positive");
        }
        if !(self.epsilon >= 0.0) || !(self.bound_clip > 0.0) || !(self.penalty >= 0.0) || !(self.penalty_margin >= 0.0) {
            return bad("epsilon, penalty and margin must be nonnegative and the clip positive");
        }
        if self.n_max == 0 || self.batch_size == 0 || self.rollout_len == 0 {
            return bad("n_max, batch_size and rollout_len must be at least 1");
        }
        if self.merge_window == 0 || self.max_categories == 0 || self.segment == 0 || self.refine_max_cells < 2 {
            return bad("merge_window, max_categories and segment must be positive and refine_max_cells at least 2");
        }
        if !(self.precision > 0.0) || !(self.grad_clip > 0.0) {
            return bad("precision and grad_clip must be positive");
        }
        if self.hidden.iter().any(|w| *w == 0) {
            return bad("hidden widths must be positive");
        }
        Ok(())
    }

    pub fn bab_options(&self) -> BabOptions {
        BabOptions { precision: self.precision, method: self.method, max_cells: Some(self.refine_max_cells), segment: Some(self.segment) }
    }
}

/// `min(lambda_max, a_r * L_saferl / L_bound)`, or `lambda_max` when the
/// bound loss is negligible.
pub fn mix_lambda(l_saferl: f64, l_bound: f64, hyper: &TrainingHyper) -> f64 {
    if l_bound < 1e-12 {
        return hyper.lambda_max;
    }
    hyper.lambda_max.min(hyper.a_r * l_saferl / l_bound)
}

/// Random controller with the configured hidden layers.
pub fn init_controller(env: &EnvSpec, hyper: &TrainingHyper) -> ReluNet {
    let mut dims = vec![env.state_dim()];
    dims.extend(&hyper.hidden);
    dims.push(env.action_dim());
    ReluNet::random(&dims, &mut stream_rng(hyper.seed, 0))
}

fn system(env: &EnvSpec, dynamics: &ReluNet, controller: &ReluNet) -> Result<ClosedLoopSystem, NnError> {
    ClosedLoopSystem::new(controller.clone(), dynamics.clone(), Some(env.action_clip.clone()))
}

/// Volume-weighted sampler over a list of boxes.
#[derive(Debug, Clone)]
pub struct RegionSampler {
    boxes: Vec<IntervalBox>,
    cumulative: Vec<f64>,
}

impl RegionSampler {
    pub fn new(boxes: Vec<IntervalBox>) -> Self {
        assert!(!boxes.is_empty(), "sampler needs at least one box");
        let vols: Vec<f64> = boxes.iter().map(|b| b.volume()).collect();
        let uniform = vols.iter().sum::<f64>() <= 0.0;
        let mut acc = 0.0;
        let cumulative = vols
            .iter()
            .map(|v| {
                acc += if uniform { 1.0 } else { *v };
                acc
            })
            .collect();
        Self { boxes, cumulative }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let total = *self.cumulative.last().expect("nonempty");
        let u = rng.gen::<f64>() * total;
        let i = self.cumulative.partition_point(|c| *c <= u).min(self.boxes.len() - 1);
        self.boxes[i].sample(rng)
    }

    /// `n` samples as matrix columns.
    pub fn batch(&self, n: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_columns(&(0..n).map(|_| self.sample(rng)).collect::<Vec<_>>())
    }
}

const EVAL_STREAM: u64 = u64::MAX;
const ROUND_STREAM: u64 = 1 << 32;
const EVAL_EVERY: usize = 10;

fn selector(dims: &[usize], n: usize) -> Matrix {
    let mut m = Matrix::zeros(dims.len(), n);
    for (i, d) in dims.iter().enumerate() {
        m.set(i, *d, 1.0);
    }
    m
}

fn accumulate(g: &mut Graph, acc: Option<Var>, v: Var) -> Option<Var> {
    Some(match acc {
        None => v,
        Some(a) => g.add(a, v),
    })
}

/// Mean over the batch of `sum_t gamma^(t-1) [(1 - r_t) + w c_t]` on the tape.
fn safe_rl_tape(
    g: &mut Graph,
    env: &EnvSpec,
    sys: &ClosedLoopSystem,
    ctrl: &NetVars,
    dynamics: &NetVars,
    starts: &Matrix,
    hyper: &TrainingHyper,
) -> Var {
    let b = starts.cols();
    let sel = g.constant(selector(&env.goal_dims, env.state_dim()));
    let goal = g.constant(Matrix::column(&env.goal.iter().map(|v| -v).collect::<Vec<_>>()));
    let mut s = g.constant(starts.clone());
    let mut total = None;
    let mut disc = 1.0;
    for t in 1..=hyper.rollout_len {
        s = tape_step(g, sys, ctrl, dynamics, s);
        let p = g.matmul(sel, s);
        let p = g.add_bias(p, goal);
        let sq = g.square(p);
        let d2 = g.sum_rows(sq);
        let d2 = g.add_scalar(d2, 1e-12);
        let d = g.sqrt(d2);
        let nd = g.neg(d);
        let r = g.exp(nd);
        let nr = g.neg(r);
        let mut term = g.add_scalar(nr, 1.0);
        if hyper.penalty > 0.0 {
            let lo = g.add_scalar(s, -hyper.penalty_margin);
            let hi = g.add_scalar(s, hyper.penalty_margin);
            if let Some(c) = env.spec.tape_cost(g, lo, hi, t) {
                let c = g.scale(c, hyper.penalty);
                term = g.add(term, c);
            }
        }
        let term = g.scale(term, disc);
        total = accumulate(g, total, term);
        disc *= hyper.gamma;
    }
    let sum = g.sum(total.expect("rollout_len >= 1"));
    g.scale(sum, 1.0 / b as f64)
}

/// Plain evaluation of the safe RL loss.
pub fn safe_rl_objective(env: &EnvSpec, sys: &ClosedLoopSystem, starts: &Matrix, hyper: &TrainingHyper) -> f64 {
    let step = sys.compose_step();
    let mut x = starts.clone();
    let cols = x.cols();
    let n = x.rows();
    let mut total = 0.0;
    let mut disc = 1.0;
    let mut s = vec![0.0; n];
    for t in 1..=hyper.rollout_len {
        x = step.forward_batch(&x).expect("state dim");
        for c in 0..cols {
            for (r, v) in s.iter_mut().enumerate() {
                *v = x.get(r, c);
            }
            let d2: f64 = env.goal_dims.iter().zip(&env.goal).map(|(d, g)| (s[*d] - g).powi(2)).sum();
            let mut term = 1.0 - (-(d2 + 1e-12).sqrt()).exp();
            if hyper.penalty > 0.0 && env.spec.num_constraints() > 0 {
                let bx = IntervalBox::point(&s).inflate(hyper.penalty_margin);
                term += hyper.penalty * env.spec.region_cost(&bx, t);
            }
            total += disc * term;
        }
        disc *= hyper.gamma;
    }
    total / cols as f64
}

/// Safe RL loss and its controller gradient for a batch of initial states.
pub fn safe_rl_gradient(
    env: &EnvSpec,
    sys: &ClosedLoopSystem,
    starts: &Matrix,
    hyper: &TrainingHyper,
) -> (f64, ParamVector) {
    let mut g = Graph::new();
    let ctrl = NetVars::register(&mut g, &sys.controller, true);
    let dynamics = NetVars::register(&mut g, &sys.dynamics, false);
    let loss = safe_rl_tape(&mut g, env, sys, &ctrl, &dynamics, starts, hyper);
    let grads = g.backward(loss).expect("scalar loss");
    (g.scalar(loss), ctrl.gradient(&sys.controller, &grads))
}

/// Gradient descent on the safe RL loss from a random controller; returns
/// the best controller seen on a fixed evaluation batch.
pub fn pretrain(env: &EnvSpec, dynamics: &ReluNet, hyper: &TrainingHyper) -> Result<ReluNet, TrainError> {
    pretrain_from(env, dynamics, &init_controller(env, hyper), hyper)
}

pub fn pretrain_from(env: &EnvSpec, dynamics: &ReluNet, init: &ReluNet, hyper: &TrainingHyper) -> Result<ReluNet, TrainError> {
    hyper.validate()?;
    let sampler = RegionSampler::new(vec![env.s0.clone()]);
    let eval = sampler.batch(hyper.batch_size, &mut stream_rng(hyper.seed, EVAL_STREAM));
    let mut sys = system(env, dynamics, init)?;
    let mut best = (safe_rl_objective(env, &sys, &eval, hyper), sys.controller.clone());
    let mut params = sys.controller.params();
    let mut opt = Adam::new(hyper.lr, params.len()).with_clip(hyper.grad_clip);
    for it in 0..hyper.pretrain_steps {
        let starts = sampler.batch(hyper.batch_size, &mut stream_rng(hyper.seed, it as u64 + 1));
        let (loss, grad) = safe_rl_gradient(env, &sys, &starts, hyper);
        if !loss.is_finite() || !grad.0.iter().all(|v| v.is_finite()) {
            return Err(TrainError::Divergence(it));
        }
        opt.step(&mut params.0, &grad.0);
        sys.controller = sys.controller.with_params(&params).map_err(|_| TrainError::Divergence(it))?;
        if (it + 1) % EVAL_EVERY == 0 || it + 1 == hyper.pretrain_steps {
            let score = safe_rl_objective(env, &sys, &eval, hyper);
            if score < best.0 {
                best = (score, sys.controller.clone());
            }
        }
    }
    Ok(best.1)
}

/// One buffer category: cells whose bounds came close to the unsafe set in
/// phases `i1..=i2`.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub cells: Vec<GridCell>,
    pub i1: usize,
    pub i2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBuffer {
    pub entries: Vec<BufferEntry>,
    pub window: usize,
    pub max_categories: usize,
}

impl MemoryBuffer {
    pub fn new(window: usize, max_categories: usize) -> Self {
        assert!(window >= 1 && max_categories >= 1, "window and category cap must be positive");
        Self { entries: Vec::new(), window, max_categories }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_categories(&self) -> usize {
        self.entries.len()
    }

    pub fn num_cells(&self) -> usize {
        self.entries.iter().map(|e| e.cells.len()).sum()
    }

    /// Adds `cells` at phase index `k`, merging into the category of `k`'s window.
    pub fn insert(&mut self, cells: Vec<GridCell>, k: usize) {
        assert!(k >= 1, "phase indices start at 1");
        if cells.is_empty() {
            return;
        }
        let key = (k - 1) / self.window;
        match self.entries.iter_mut().find(|e| (e.i1 - 1) / self.window == key) {
            Some(e) => {
                e.i1 = e.i1.min(k);
                e.i2 = e.i2.max(k);
                for c in cells {
                    if !e.cells.iter().any(|x| x.id == c.id) {
                        e.cells.push(c);
                    }
                }
                e.cells.sort_by(|a, b| a.id.cmp(&b.id));
            }
            None => {
                let mut cells = cells;
                cells.sort_by(|a, b| a.id.cmp(&b.id));
                cells.dedup_by(|a, b| a.id == b.id);
                self.entries.push(BufferEntry { cells, i1: k, i2: k });
                self.entries.sort_by_key(|e| e.i1);
            }
        }
        while self.entries.len() > self.max_categories {
            let second = self.entries.remove(1);
            let first = &mut self.entries[0];
            first.i2 = first.i2.max(second.i2);
            for c in second.cells {
                if !first.cells.iter().any(|x| x.id == c.id) {
                    first.cells.push(c);
                }
            }
            first.cells.sort_by(|a, b| a.id.cmp(&b.id));
        }
    }
}

/// Adds the cells whose step-`k` box lies within `epsilon` of the unsafe
/// set; returns how many were added.
pub fn buffer_update(
    buffer: &mut MemoryBuffer,
    grid: &[GridCell],
    sys: &ClosedLoopSystem,
    k: usize,
    epsilon: f64,
    spec: &SafetySpec,
    opts: &BabOptions,
) -> Result<usize, TrainError> {
    let bounds: Vec<StepBounds> = grid
        .par_iter()
        .map(|c| extend_step_bounds(sys, &c.bx, None, k, opts, spec))
        .collect::<Result<_, _>>()?;
    Ok(admit(buffer, grid, &bounds, k, epsilon, spec))
}

fn admit(buffer: &mut MemoryBuffer, grid: &[GridCell], bounds: &[StepBounds], k: usize, epsilon: f64, spec: &SafetySpec) -> usize {
    let close: Vec<GridCell> = grid
        .iter()
        .zip(bounds)
        .filter(|(_, b)| spec.distance_to_unsafe(&b.combined[k - 1], k) < epsilon)
        .map(|(c, _)| c.clone())
        .collect();
    let n = close.len();
    buffer.insert(close, k);
    n
}

/// Differentiable bound loss, unclipped; `None` when nothing is referenced.
fn bound_tape(
    g: &mut Graph,
    sys: &ClosedLoopSystem,
    ctrl: &NetVars,
    dynamics: &NetVars,
    cells: &[IntervalBox],
    buffer: &MemoryBuffer,
    k: usize,
    spec: &SafetySpec,
) -> Option<Var> {
    let mut total = None;
    let roll = |g: &mut Graph, boxes: &[IntervalBox], horizon: usize| {
        let lo = g.constant(Matrix::from_columns(&boxes.iter().map(|b| b.lb().to_vec()).collect::<Vec<_>>()));
        let hi = g.constant(Matrix::from_columns(&boxes.iter().map(|b| b.ub().to_vec()).collect::<Vec<_>>()));
        tape_ibp_rollout(g, sys, ctrl, dynamics, lo, hi, horizon)
    };
    if !cells.is_empty() {
        let steps = roll(g, cells, k);
        for (t, (lo, hi)) in steps.iter().enumerate() {
            if let Some(c) = spec.tape_cost(g, *lo, *hi, t + 1) {
                let c = g.sum(c);
                total = accumulate(g, total, c);
            }
        }
    }
    for e in &buffer.entries {
        let boxes: Vec<IntervalBox> = e.cells.iter().map(|c| c.bx.clone()).collect();
        let steps = roll(g, &boxes, e.i2);
        let (lo, hi) = steps[e.i2 - 1];
        if let Some(c) = spec.tape_cost(g, lo, hi, e.i2) {
            let c = g.sum(c);
            total = accumulate(g, total, c);
        }
    }
    total
}

/// Bound loss over `cells` (steps `1..=k`) and the buffer (step `i2` of each
/// category), clipped at `clip`.
pub fn bound_loss(
    sys: &ClosedLoopSystem,
    cells: &[IntervalBox],
    buffer: &MemoryBuffer,
    k: usize,
    spec: &SafetySpec,
    clip: f64,
) -> f64 {
    bound_loss_gradient(sys, cells, buffer, k, spec, clip).0
}

/// Clipped bound loss and its controller gradient. Above the clip the loss
/// is rescaled, which keeps the gradient direction.
pub fn bound_loss_gradient(
    sys: &ClosedLoopSystem,
    cells: &[IntervalBox],
    buffer: &MemoryBuffer,
    k: usize,
    spec: &SafetySpec,
    clip: f64,
) -> (f64, ParamVector) {
    let mut g = Graph::new();
    let ctrl = NetVars::register(&mut g, &sys.controller, true);
    let dynamics = NetVars::register(&mut g, &sys.dynamics, false);
    let Some(loss) = bound_tape(&mut g, sys, &ctrl, &dynamics, cells, buffer, k, spec) else {
        return (0.0, ParamVector(vec![0.0; sys.controller.num_params()]));
    };
    let raw = g.scalar(loss);
    let f = if raw > clip { clip / raw } else { 1.0 };
    let scaled = g.scale(loss, f);
    let grads = g.backward(scaled).expect("scalar loss");
    (raw * f, ctrl.gradient(&sys.controller, &grads))
}

/// One row of the curriculum log.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseRecord {
    pub k: usize,
    pub n_train: usize,
    pub l_saferl: f64,
    pub l_bound: f64,
    pub lambda: f64,
    pub n_uc: usize,
    pub n_buffer: usize,
    pub wall_ms: u128,
}

pub fn phase_log_csv(rows: &[PhaseRecord]) -> String {
    let mut out = String::from("k,n_train,l_saferl,l_bound,lambda,n_uc,n_buffer,wall_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:e},{:e},{:e},{},{},{}\n",
            r.k, r.n_train, r.l_saferl, r.l_bound, r.lambda, r.n_uc, r.n_buffer, r.wall_ms
        ));
    }
    out
}

/// Closed loop, grid and horizon for a curriculum run.
#[derive(Debug, Clone)]
pub struct CurriculumTask<'a> {
    pub env: &'a EnvSpec,
    pub dynamics: &'a ReluNet,
    /// Cells to make safe; safe RL starts are sampled from them too.
    pub grid: Vec<GridCell>,
    pub k_target: usize,
}

#[derive(Debug, Clone)]
pub struct CurriculumResult {
    pub controller: ReluNet,
    /// Grid after refinement.
    pub grid: Vec<GridCell>,
    pub buffer: MemoryBuffer,
    pub log: Vec<PhaseRecord>,
    /// Total optimiser steps.
    pub steps: usize,
    /// Unverified cells at the end of each phase.
    pub unverified: Vec<usize>,
}

fn all_bounds(
    sys: &ClosedLoopSystem,
    grid: &[GridCell],
    prev: Option<&[StepBounds]>,
    k: usize,
    opts: &BabOptions,
    spec: &SafetySpec,
) -> Result<Vec<StepBounds>, TrainError> {
    Ok((0..grid.len())
        .into_par_iter()
        .map(|i| extend_step_bounds(sys, &grid[i].bx, prev.map(|p| &p[i]), k, opts, spec))
        .collect::<Result<_, _>>()?)
}

fn unverified(bounds: &[StepBounds], spec: &SafetySpec) -> Vec<usize> {
    bounds.iter().enumerate().filter(|(_, b)| !boxes_safe(&b.combined, spec)).map(|(i, _)| i).collect()
}

/// Curriculum over phases `k = 1..=k_target` starting from `controller`.
pub fn curriculum_train(task: CurriculumTask<'_>, controller: &ReluNet, hyper: &TrainingHyper) -> Result<CurriculumResult, TrainError> {
    hyper.validate()?;
    let CurriculumTask { env, dynamics, mut grid, k_target } = task;
    if k_target == 0 {
        return Err(BoundError::ZeroHorizon.into());
    }
    let spec = &env.spec;
    let opts = hyper.bab_options();
    let mut sys = system(env, dynamics, controller)?;
    let sampler = RegionSampler::new(grid.iter().map(|c| c.bx.clone()).collect());
    let mut params = sys.controller.params();
    let mut opt = Adam::new(hyper.lr, params.len()).with_clip(hyper.grad_clip);
    let mut buffer = MemoryBuffer::new(hyper.merge_window, hyper.max_categories);
    let mut log = Vec::new();
    let mut unverified_counts = Vec::new();
    let mut steps = 0usize;
    let start = Instant::now();
    // Bounds for the current grid and parameters at the previous horizon.
    let mut cache: Option<Vec<StepBounds>> = None;
    for k in 1..=k_target {
        let mut bounds = all_bounds(&sys, &grid, cache.as_deref(), k, &opts, spec)?;
        let mut suc = unverified(&bounds, spec);
        if hyper.refine && !suc.is_empty() {
            let refined: Vec<_> = suc
                .par_iter()
                .map(|&i| branch_and_bound(&grid[i], &sys, k, spec, &opts))
                .collect::<Result<_, _>>()?;
            let mut next: Vec<GridCell> =
                grid.iter().enumerate().filter(|(i, _)| !suc.contains(i)).map(|(_, c)| c.clone()).collect();
            for r in refined {
                next.extend(r.leaves.into_iter().map(|l| l.cell));
            }
            next.sort_by(|a, b| a.id.cmp(&b.id));
            grid = next;
            bounds = all_bounds(&sys, &grid, None, k, &opts, spec)?;
            suc = unverified(&bounds, spec);
        }
        let mut n_train = 0;
        while n_train < hyper.n_max && !suc.is_empty() {
            let starts = sampler.batch(hyper.batch_size, &mut stream_rng(hyper.seed, ROUND_STREAM + steps as u64));
            let cells: Vec<IntervalBox> = suc.iter().map(|&i| grid[i].bx.clone()).collect();
            let mut g = Graph::new();
            let ctrl = NetVars::register(&mut g, &sys.controller, true);
            let dynv = NetVars::register(&mut g, &sys.dynamics, false);
            let lsr = safe_rl_tape(&mut g, env, &sys, &ctrl, &dynv, &starts, hyper);
            let l_saferl = g.scalar(lsr);
            let (total, l_bound, lambda) = match bound_tape(&mut g, &sys, &ctrl, &dynv, &cells, &buffer, k, spec) {
                Some(lb) if g.scalar(lb) > 0.0 => {
                    let raw = g.scalar(lb);
                    let f = if raw > hyper.bound_clip { hyper.bound_clip / raw } else { 1.0 };
                    let l_bound = raw * f;
                    let lambda = mix_lambda(l_saferl, l_bound, hyper);
                    let weighted = g.scale(lb, lambda * f);
                    (g.add(lsr, weighted), l_bound, lambda)
                }
                _ => (lsr, 0.0, 0.0),
            };
            let grads = g.backward(total).expect("scalar loss");
            let grad = ctrl.gradient(&sys.controller, &grads);
            if !g.scalar(total).is_finite() || !grad.0.iter().all(|v| v.is_finite()) {
                return Err(TrainError::Divergence(steps));
            }
            opt.step(&mut params.0, &grad.0);
            sys.controller = sys.controller.with_params(&params).map_err(|_| TrainError::Divergence(steps))?;
            steps += 1;
            n_train += 1;
            bounds = all_bounds(&sys, &grid, None, k, &opts, spec)?;
            suc = unverified(&bounds, spec);
            log.push(PhaseRecord {
                k,
                n_train,
                l_saferl,
                l_bound,
                lambda,
                n_uc: suc.len(),
                n_buffer: buffer.num_cells(),
                wall_ms: start.elapsed().as_millis(),
            });
        }
        if n_train == 0 {
            log.push(PhaseRecord {
                k,
                n_train: 0,
                l_saferl: 0.0,
                l_bound: 0.0,
                lambda: 0.0,
                n_uc: 0,
                n_buffer: buffer.num_cells(),
                wall_ms: start.elapsed().as_millis(),
            });
        }
        unverified_counts.push(suc.len());
        admit(&mut buffer, &grid, &bounds, k, hyper.epsilon, spec);
        cache = Some(bounds);
    }
    Ok(CurriculumResult { controller: sys.controller, grid, buffer, log, steps, unverified: unverified_counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ActionClip, AffineLayer};
    use crate::safety::Obstacle;

    fn one_step_identity() -> ClosedLoopSystem {
        let ctrl = ReluNet::new(vec![AffineLayer::new(Matrix::from_rows(&[vec![0.0]]), vec![0.0])]).unwrap();
        let dynamics = ReluNet::new(vec![AffineLayer::new(Matrix::from_rows(&[vec![1.0, 0.0]]), vec![0.0])]).unwrap();
        ClosedLoopSystem::new(ctrl, dynamics, None).unwrap()
    }

    fn cell(id: &str, l: f64, u: f64) -> GridCell {
        GridCell { id: id.into(), bx: IntervalBox::new(vec![l], vec![u]).unwrap(), depth: id.len() - 1 }
    }

    #[test]
    fn lambda_examples() {
        let h = TrainingHyper::default();
        assert!((mix_lambda(1.0, 0.1, &h) - 5.0).abs() < 1e-12);
        assert!((mix_lambda(1.0, 100.0, &h) - 0.005).abs() < 1e-15);
        let h1 = TrainingHyper { a_r: 1.0, ..TrainingHyper::default() };
        assert_eq!(mix_lambda(100.0, 0.01, &h1), 10.0);
        assert_eq!(mix_lambda(1.0, 0.0, &h), h.lambda_max);
    }

    #[test]
    fn bound_loss_examples() {
        let sys = one_step_identity();
        let spec = SafetySpec::new(vec![Obstacle::fixed(vec![0], vec![1.0], vec![2.0])], vec![]).unwrap();
        let empty = MemoryBuffer::new(5, 8);
        let b = IntervalBox::new(vec![0.9], vec![1.1]).unwrap();
        assert!((bound_loss(&sys, &[b], &empty, 1, &spec, 100.0) - 0.11).abs() < 1e-12);
        let far = IntervalBox::new(vec![-1.0], vec![0.5]).unwrap();
        assert_eq!(bound_loss(&sys, &[far], &empty, 3, &spec, 100.0), 0.0);
        assert_eq!(bound_loss(&sys, &[], &empty, 3, &spec, 100.0), 0.0);
        let wide = IntervalBox::new(vec![0.0], vec![30.0]).unwrap();
        assert_eq!(bound_loss(&sys, &[wide], &empty, 1, &spec, 0.5), 0.5);
    }

    #[test]
    fn buffer_merge_rule() {
        let mut b = MemoryBuffer::new(5, 8);
        b.insert(vec![cell("c0", 0.0, 0.5)], 3);
        b.insert(vec![cell("c1", 0.5, 1.0)], 5);
        assert_eq!(b.entries.len(), 1);
        let e = &b.entries[0];
        assert_eq!((e.i1, e.i2, e.cells.len()), (3, 5, 2));
        b.insert(vec![cell("c1", 0.5, 1.0)], 6);
        assert_eq!(b.entries.len(), 2);
        let mut capped = MemoryBuffer::new(1, 2);
        for k in 1..=4 {
            capped.insert(vec![cell(&format!("c{k}"), 0.0, 1.0)], k);
        }
        assert_eq!(capped.num_categories(), 2);
        assert_eq!(capped.num_cells(), 4);
    }

    #[test]
    fn buffer_admission_by_distance() {
        let sys = one_step_identity();
        let spec = SafetySpec::new(vec![Obstacle::fixed(vec![0], vec![1.0], vec![2.0])], vec![]).unwrap();
        let opts = BabOptions::new(0.01, Method::Ibp);
        let mut b = MemoryBuffer::new(5, 8);
        let far = [cell("c0", 0.0, 0.5)];
        assert_eq!(buffer_update(&mut b, &far, &sys, 2, 0.05, &spec, &opts).unwrap(), 0);
        assert!(b.is_empty());
        let near = [cell("c1", 0.5, 0.99)];
        assert_eq!(buffer_update(&mut b, &near, &sys, 2, 0.05, &spec, &opts).unwrap(), 1);
        assert_eq!((b.entries[0].i1, b.entries[0].i2), (2, 2));
    }

    fn shift_env(s0: (f64, f64), goal: f64, spec: SafetySpec) -> EnvSpec {
        EnvSpec::linear(
            "shift",
            Matrix::identity(1),
            Matrix::identity(1),
            IntervalBox::from_intervals(&[s0]).unwrap(),
            vec![ActionClip { lo: -1.0, hi: 1.0 }],
            spec,
            vec![goal],
        )
    }

    fn fast_hyper() -> TrainingHyper {
        TrainingHyper {
            hidden: vec![8],
            batch_size: 32,
            rollout_len: 15,
            pretrain_steps: 300,
            lr: 1e-2,
            ..TrainingHyper::default()
        }
    }

    #[test]
    fn pretrain_contracts_to_goal() {
        let env = shift_env((-0.5, 0.5), 0.0, SafetySpec::default());
        let dynamics = env.exact_linear_dynamics().unwrap();
        let ctrl = pretrain(&env, &dynamics, &fast_hyper()).unwrap();
        let sys = system(&env, &dynamics, &ctrl).unwrap();
        for i in 0..=20 {
            let mut s = vec![-0.5 + i as f64 * 0.05];
            for _ in 0..15 {
                s = sys.step(&s).unwrap();
            }
            assert!(s[0].abs() < 0.05, "start {i}: {s:?}");
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let env = shift_env((-0.5, 0.5), 0.0, SafetySpec::default());
        let dynamics = env.exact_linear_dynamics().unwrap();
        let h = TrainingHyper { lr: 0.0, pretrain_steps: 5, ..fast_hyper() };
        let init = init_controller(&env, &h);
        assert_eq!(pretrain(&env, &dynamics, &h).unwrap().params(), init.params());
    }

    #[test]
    fn already_safe_policy_is_untouched() {
        let spec = SafetySpec::new(vec![Obstacle::fixed(vec![0], vec![1.0], vec![2.0])], vec![]).unwrap();
        let env = shift_env((0.0, 0.1), 0.0, spec);
        let dynamics = env.exact_linear_dynamics().unwrap();
        let ctrl = ReluNet::new(vec![AffineLayer::new(Matrix::from_rows(&[vec![-1.0]]), vec![0.0])]).unwrap();
        let task = CurriculumTask { env: &env, dynamics: &dynamics, grid: vec![GridCell::root(env.s0.clone())], k_target: 4 };
        let out = curriculum_train(task, &ctrl, &fast_hyper()).unwrap();
        assert_eq!(out.steps, 0);
        assert_eq!(out.controller, ctrl);
        assert_eq!(out.log.len(), 4);
    }

    #[test]
    fn large_epsilon_buffers_every_phase() {
        let spec = SafetySpec::new(vec![Obstacle::fixed(vec![0], vec![1.0], vec![2.0])], vec![]).unwrap();
        let env = shift_env((0.0, 0.1), 0.0, spec);
        let dynamics = env.exact_linear_dynamics().unwrap();
        let ctrl = ReluNet::new(vec![AffineLayer::new(Matrix::from_rows(&[vec![-1.0]]), vec![0.0])]).unwrap();
        let grid = vec![cell("c0", 0.0, 0.05), cell("c1", 0.05, 0.1)];
        let task = CurriculumTask { env: &env, dynamics: &dynamics, grid: grid.clone(), k_target: 7 };
        let h = TrainingHyper { epsilon: 10.0, merge_window: 3, ..fast_hyper() };
        let out = curriculum_train(task, &ctrl, &h).unwrap();
        let ranges: Vec<(usize, usize)> = out.buffer.entries.iter().map(|e| (e.i1, e.i2)).collect();
        assert_eq!(ranges, vec![(1, 3), (4, 6), (7, 7)]);
        assert!(out.buffer.entries.iter().all(|e| e.cells.len() == 2));
    }
}
