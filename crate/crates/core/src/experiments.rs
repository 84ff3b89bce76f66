//! Ablation drivers shared by the CLI and the acceptance suite.

use crate::bounds::{incremental_rollout, rollout_bounds, IncrementalSchedule, Method};
use crate::dictionary::{synthesize, SynthesisOptions, SynthesisResult};
use crate::env::EnvSpec;
use crate::nn::{ClosedLoopSystem, ReluNet};
use crate::optim::Adam;
use crate::reach::GridCell;
use crate::train::{bound_loss_gradient, MemoryBuffer, TrainError, TrainingHyper};
use std::time::{Duration, Instant};

#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalTiming {
    pub k: usize,
    pub monolithic: Duration,
    pub incremental: Duration,
}

impl IncrementalTiming {
    pub fn ratio(&self) -> f64 {
        self.incremental.as_secs_f64() / self.monolithic.as_secs_f64().max(1e-12)
    }
}

/// Runs `epochs` epochs on one cell for each horizon in `ks`, once with
/// monolithic and once with segment-by-segment CROWN bounds. An epoch
/// bounds steps `1..=k` and takes one bound-loss gradient step, so both
/// variants follow the same parameter trajectory.
pub fn ablate_incremental(
    env: &EnvSpec,
    dynamics: &ReluNet,
    controller: &ReluNet,
    cell: &GridCell,
    ks: &[usize],
    epochs: usize,
    hyper: &TrainingHyper,
) -> Result<Vec<IncrementalTiming>, TrainError> {
    let base = ClosedLoopSystem::new(controller.clone(), dynamics.clone(), Some(env.action_clip.clone()))?;
    let buffer = MemoryBuffer::new(hyper.merge_window, hyper.max_categories);
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut times = [Duration::ZERO; 2];
        for (mode, time) in times.iter_mut().enumerate() {
            let mut sys = base.clone();
            let mut params = sys.controller.params();
            let mut opt = Adam::new(hyper.lr, params.len()).with_clip(hyper.grad_clip);
            let start = Instant::now();
            for _ in 0..epochs {
                let boxes = if mode == 0 {
                    rollout_bounds(&sys, &cell.bx, k, Method::Crown)?
                } else {
                    incremental_rollout(&sys, &cell.bx, &IncrementalSchedule::uniform(k, hyper.segment)?, Method::Crown)?.boxes
                };
                debug_assert_eq!(boxes.len(), k);
                let (_, grad) = bound_loss_gradient(&sys, &[cell.bx.clone()], &buffer, k, &env.spec, hyper.bound_clip);
                opt.step(&mut params.0, &grad.0);
                sys.controller = sys.controller.with_params(&params)?;
            }
            *time = start.elapsed();
        }
        rows.push(IncrementalTiming { k, monolithic: times[0], incremental: times[1] });
    }
    Ok(rows)
}

pub fn incremental_csv(rows: &[IncrementalTiming]) -> String {
    let mut out = String::from("k,monolithic_ms,incremental_ms,ratio\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.3},{:.3},{:.4}\n",
            r.k,
            r.monolithic.as_secs_f64() * 1e3,
            r.incremental.as_secs_f64() * 1e3,
            r.ratio()
        ));
    }
    out
}

/// Single-controller coverage against the synthesised dictionary.
#[derive(Debug, Clone)]
pub struct MultiAblation {
    pub single: f64,
    pub multi: f64,
    pub synthesis: SynthesisResult,
}

pub fn ablate_multi(
    env: &EnvSpec,
    dynamics: &ReluNet,
    base: &ReluNet,
    grid: &[GridCell],
    k: usize,
    hyper: &TrainingHyper,
    opts: &SynthesisOptions,
) -> Result<MultiAblation, crate::dictionary::DictionaryError> {
    let synthesis = synthesize(env, dynamics, base, grid, k, hyper, opts)?;
    Ok(MultiAblation { single: synthesis.baseline_coverage, multi: synthesis.dictionary.coverage(), synthesis })
}
