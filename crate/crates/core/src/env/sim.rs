//! Episode rollouts and sampled safety on the fitted closed loop.

use super::{EnvError, EnvSpec};
use crate::dictionary::ControllerDictionary;
use crate::nn::{ClosedLoopSystem, ReluNet};
use crate::optim::stream_rng;
use crate::tensor::Matrix;
use rayon::prelude::*;

/// Source of the controller for an episode.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    Single(&'a ReluNet),
    /// Controller picked once per episode from the initial state.
    Dictionary(&'a ControllerDictionary),
}

impl<'a> Policy<'a> {
    /// Controller for an episode starting at `s0`, with its dictionary entry index.
    pub fn select(&self, s0: &[f64]) -> Option<(usize, &'a ReluNet)> {
        match self {
            Policy::Single(net) => Some((0, net)),
            Policy::Dictionary(dict) => dict.lookup(s0).map(|i| (i, &dict.entries[i].controller)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// `s_0, s_1, ...` up to termination or the episode length.
    pub states: Vec<Vec<f64>>,
    /// Reward of `s_1, s_2, ...`.
    pub rewards: Vec<f64>,
    pub total_reward: f64,
    /// `violations[t]` flags `s_{t+1}`.
    pub violations: Vec<bool>,
    /// Dictionary entry used (0 for a single controller).
    pub controller: usize,
}

impl Episode {
    pub fn first_violation(&self) -> Option<usize> {
        self.violations.iter().position(|v| *v).map(|t| t + 1)
    }
}

fn closed_loop(env: &EnvSpec, dynamics: &ReluNet, controller: &ReluNet) -> Result<ClosedLoopSystem, EnvError> {
    ClosedLoopSystem::new(controller.clone(), dynamics.clone(), Some(env.action_clip.clone()))
        .map_err(|e| EnvError::Invalid(e.to_string()))
}

/// Rolls the composed step network from `s0` for the episode length.
pub fn simulate_episode(env: &EnvSpec, dynamics: &ReluNet, policy: Policy<'_>, s0: &[f64]) -> Result<Episode, EnvError> {
    if !env.s0.contains(s0, 0.0) {
        return Err(EnvError::OutsideInitial(s0.to_vec()));
    }
    let (controller, net) = policy.select(s0).ok_or_else(|| EnvError::Invalid("initial state not covered by the dictionary".into()))?;
    let step = closed_loop(env, dynamics, net)?.compose_step();
    let mut states = vec![s0.to_vec()];
    let mut rewards = Vec::with_capacity(env.episode_len);
    let mut violations = Vec::with_capacity(env.episode_len);
    let mut s = s0.to_vec();
    for t in 1..=env.episode_len {
        s = step.forward(&s).map_err(|e| EnvError::Invalid(e.to_string()))?;
        rewards.push(env.reward(&s));
        violations.push(env.spec.point_violates(&s, t));
        states.push(s.clone());
        if env.terminated(&s) {
            break;
        }
    }
    let total_reward = rewards.iter().sum();
    Ok(Episode { states, rewards, total_reward, violations, controller })
}

const CHUNK: usize = 2048;

/// Fraction of `n` initial states (sample `i` drawn from `stream_rng(seed, i)`)
/// whose `k`-step rollout never enters the unsafe set. States the dictionary
/// does not cover count as unsafe.
pub fn empirical_safety(
    env: &EnvSpec,
    dynamics: &ReluNet,
    policy: Policy<'_>,
    k: usize,
    n: usize,
    seed: u64,
) -> Result<f64, EnvError> {
    assert!(n >= 1, "need at least one sample");
    if k == 0 {
        return Ok(1.0);
    }
    let nets: Vec<ReluNet> = match policy {
        Policy::Single(net) => vec![closed_loop(env, dynamics, net)?.compose_step()],
        Policy::Dictionary(dict) => dict
            .entries
            .iter()
            .map(|e| closed_loop(env, dynamics, &e.controller).map(|s| s.compose_step()))
            .collect::<Result<_, _>>()?,
    };
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let safe: Vec<usize> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK).min(n);
            let mut groups: Vec<Vec<Vec<f64>>> = vec![Vec::new(); nets.len()];
            for i in start..end {
                let s0 = env.s0.sample(&mut stream_rng(seed, i as u64));
                if let Some((e, _)) = policy.select(&s0) {
                    groups[e].push(s0);
                }
            }
            groups.iter().zip(&nets).filter(|(g, _)| !g.is_empty()).map(|(g, net)| count_safe(env, net, g, k)).sum::<usize>()
        })
        .collect();
    Ok(safe.iter().sum::<usize>() as f64 / n as f64)
}

fn count_safe(env: &EnvSpec, step: &ReluNet, starts: &[Vec<f64>], k: usize) -> usize {
    let cols = starts.len();
    let mut x = Matrix::from_columns(starts);
    let mut ok = vec![true; cols];
    let mut s = vec![0.0; x.rows()];
    for t in 1..=k {
        x = step.forward_batch(&x).expect("step net matches the state dim");
        for (c, flag) in ok.iter_mut().enumerate() {
            if *flag {
                for (r, v) in s.iter_mut().enumerate() {
                    *v = x.get(r, c);
                }
                if env.spec.point_violates(&s, t) {
                    *flag = false;
                }
            }
        }
    }
    ok.iter().filter(|f| **f).count()
}
