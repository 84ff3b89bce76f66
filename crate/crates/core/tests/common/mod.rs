//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use rand::Rng;
use reachguard::boxes::IntervalBox;
use reachguard::nn::{ActionClip, ClosedLoopSystem, ReluNet};
use reachguard::tensor::Matrix;

pub fn random_system(rng: &mut impl Rng, n: usize, m: usize, clip: bool) -> ClosedLoopSystem {
    let hc = rng.gen_range(2..=6);
    let hd = rng.gen_range(2..=6);
    let controller = ReluNet::random(&[n, hc, m], rng);
    let dynamics = ReluNet::random(&[n + m, hd, n], rng);
    let clip = clip.then(|| (0..m).map(|_| ActionClip { lo: -0.5, hi: 0.5 }).collect());
    ClosedLoopSystem::new(controller, dynamics, clip).expect("dims chain")
}

pub fn random_box(rng: &mut impl Rng, n: usize, max_radius: f64) -> IntervalBox {
    let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-3..max_radius)).collect();
    IntervalBox::from_center_radius(&c, &r).expect("valid box")
}

/// `count` uniform samples of `bx` as matrix columns, corners first.
pub fn sample_columns(bx: &IntervalBox, count: usize, rng: &mut impl Rng) -> Matrix {
    let n = bx.dim();
    let mut cols = Vec::with_capacity(count);
    cols.push(bx.lb().to_vec());
    cols.push(bx.ub().to_vec());
    while cols.len() < count {
        cols.push(bx.sample(rng));
    }
    cols.truncate(count.max(1));
    let mut m = Matrix::zeros(n, cols.len());
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            m.set(i, j, *v);
        }
    }
    m
}

/// States after steps `1..=k` of the closed loop, one matrix per step.
pub fn rollout(sys: &ClosedLoopSystem, x0: &Matrix, k: usize) -> Vec<Matrix> {
    let step = sys.compose_step();
    let mut x = x0.clone();
    (0..k)
        .map(|_| {
            x = step.forward_batch(&x).expect("dims match");
            x.clone()
        })
        .collect()
}

/// Number of sample columns falling outside `bx` by more than `slack`.
pub fn outside(bx: &IntervalBox, x: &Matrix, slack: f64) -> usize {
    (0..x.cols()).filter(|&j| !bx.contains(&x.col(j), slack)).count()
}

/// Sampled trajectories from `bx` that touch the unsafe set within `k` steps.
pub fn audit(sys: &ClosedLoopSystem, bx: &IntervalBox, spec: &reachguard::safety::SafetySpec, k: usize, n: usize, rng: &mut impl Rng) -> usize {
    let x0 = sample_columns(bx, n, rng);
    let states = rollout(sys, &x0, k);
    (0..x0.cols())
        .filter(|&j| states.iter().enumerate().any(|(t, x)| spec.point_violates(&x.col(j), t + 1)))
        .count()
}
