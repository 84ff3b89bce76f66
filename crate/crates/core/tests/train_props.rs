mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reachguard::bounds::{rollout_bounds, Method};
use reachguard::env::EnvSpec;
use reachguard::netfile::to_text;
use reachguard::reach::{split_initial, GridCell};
use reachguard::safety::{Obstacle, SafetySpec};
use reachguard::train::{bound_loss, curriculum_train, mix_lambda, pretrain, CurriculumTask, MemoryBuffer, TrainingHyper};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bound_loss_vanishes_exactly_when_all_boxes_are_safe(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sys = random_system(&mut rng, 2, 1, true);
        let spec = SafetySpec::new(vec![Obstacle::fixed(vec![0], vec![0.8], vec![3.0])], vec![]).unwrap();
        let cells = vec![random_box(&mut rng, 2, 0.2), random_box(&mut rng, 2, 0.2)];
        let mut buffer = MemoryBuffer::new(5, 8);
        let extra = GridCell::root(random_box(&mut rng, 2, 0.2));
        buffer.insert(vec![extra.clone()], 2);
        let k = 3;
        let loss = bound_loss(&sys, &cells, &buffer, k, &spec, 100.0);
        let mut costs = Vec::new();
        for c in &cells {
            for (t, b) in rollout_bounds(&sys, c, k, Method::Ibp).unwrap().iter().enumerate() {
                costs.push(spec.region_cost(b, t + 1));
            }
        }
        let at_i2 = rollout_bounds(&sys, &extra.bx, 2, Method::Ibp).unwrap();
        costs.push(spec.region_cost(&at_i2[1], 2));
        let all_safe = costs.iter().all(|c| *c == 0.0);
        prop_assert_eq!(loss == 0.0, all_safe, "loss {} costs {:?}", loss, costs);
        prop_assert!(loss <= 100.0);
    }

    #[test]
    fn lambda_respects_cap_and_ratio(l_s in 0.0f64..1e3, l_b in 0.0f64..1e3, cap in 0.1f64..20.0, a_r in 0.01f64..2.0) {
        let hyper = TrainingHyper { lambda_max: cap, a_r, ..TrainingHyper::default() };
        let lambda = mix_lambda(l_s, l_b, &hyper);
        prop_assert!(lambda <= cap);
        if lambda < cap {
            prop_assert!(lambda * l_b <= a_r * l_s * (1.0 + 1e-12));
        }
    }
}

#[test]
fn curriculum_is_reproducible() {
    let env = EnvSpec::corridor();
    let dynamics = env.exact_linear_dynamics().unwrap();
    let hyper = TrainingHyper { hidden: vec![16, 16], penalty: 0.0, ..TrainingHyper::default() };
    let run = || {
        let init = pretrain(&env, &dynamics, &hyper).unwrap();
        let sys = reachguard::nn::ClosedLoopSystem::new(init.clone(), dynamics.clone(), Some(env.action_clip.clone())).unwrap();
        let grid = split_initial(&env.s0, 4, &sys, &env.spec, 1).unwrap();
        let res = curriculum_train(CurriculumTask { env: &env, dynamics: &dynamics, grid, k_target: 5 }, &init, &hyper).unwrap();
        (to_text(&res.controller), res.steps, res.grid)
    };
    let (a, steps, grid_a) = run();
    let (b, _, grid_b) = run();
    assert_eq!(a, b);
    assert_eq!(grid_a, grid_b);
    assert!(steps > 0);
}
