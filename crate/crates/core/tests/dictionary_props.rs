mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reachguard::bounds::Method;
use reachguard::dictionary::{synthesize, SynthesisOptions};
use reachguard::env::EnvSpec;
use reachguard::nn::ClosedLoopSystem;
use reachguard::reach::{split_initial, BabOptions};
use reachguard::train::{pretrain, TrainingHyper};

#[test]
fn dictionary_accounts_for_volume_and_is_sound() {
    let env = EnvSpec::corridor();
    let dynamics = env.exact_linear_dynamics().unwrap();
    let hyper = TrainingHyper { hidden: vec![16, 16], penalty: 0.0, n_max: 40, ..TrainingHyper::default() };
    let base = pretrain(&env, &dynamics, &hyper).unwrap();
    let sys = ClosedLoopSystem::new(base.clone(), dynamics.clone(), Some(env.action_clip.clone())).unwrap();
    let grid = split_initial(&env.s0, 4, &sys, &env.spec, 1).unwrap();
    let opts = SynthesisOptions {
        verify: BabOptions { precision: 0.02, method: Method::Crown, max_cells: None, segment: Some(2) },
        max_iterations: 4,
    };
    let k = 5;
    let res = synthesize(&env, &dynamics, &base, &grid, k, &hyper, &opts).unwrap();
    let dict = &res.dictionary;

    let total = dict.covered_volume() + dict.residual_volume();
    assert!((total - env.s0.volume()).abs() <= 1e-9 * env.s0.volume(), "{total}");

    for it in &res.log {
        assert!(it.new_volume > 0.0 || it.stalled, "{it:?}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for entry in &dict.entries {
        let sys = sys.with_controller(entry.controller.clone()).unwrap();
        let per_cell = 10_000 / entry.cells.len() + 1;
        for cell in &entry.cells {
            assert_eq!(audit(&sys, &cell.bx, &env.spec, k, per_cell, &mut rng), 0);
        }
    }
    assert!(res.dictionary.coverage() >= res.baseline_coverage);
    assert!(!res.log.is_empty(), "base controller was already verified");
}
