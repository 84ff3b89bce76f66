mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reachguard::bounds::Method;
use reachguard::nn::ClosedLoopSystem;
use reachguard::reach::{branch_and_bound, step_bounds, verify_horizon, BabOptions, GridCell, Verdict};
use reachguard::safety::{Obstacle, SafetySpec};

fn spec() -> SafetySpec {
    SafetySpec::new(
        vec![Obstacle::fixed(vec![0, 1], vec![0.6, -2.0], vec![2.0, 2.0]), Obstacle::fixed(vec![1], vec![-3.0], vec![-0.9])],
        vec![],
    )
    .unwrap()
}

fn instance(seed: u64) -> (ClosedLoopSystem, GridCell) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sys = random_system(&mut rng, 2, 1, true);
    let mut bx = random_box(&mut rng, 2, 0.3);
    bx = reachguard::boxes::IntervalBox::from_center_radius(&bx.center().iter().map(|c| c * 0.3).collect::<Vec<_>>(), &bx.radius()).unwrap();
    (sys, GridCell::root(bx))
}

#[test]
fn safe_cells_survive_dense_sampling() {
    let spec = spec();
    let opts = BabOptions { precision: 0.05, method: Method::Crown, max_cells: Some(64), segment: Some(2) };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut safe_cells = 0;
    for seed in 0..40 {
        let (sys, cell) = instance(seed);
        let k = 4;
        let cert = verify_horizon(&sys, &[cell], k, &spec, &opts, "props").unwrap();
        for r in cert.safe_records() {
            safe_cells += 1;
            for (t, b) in step_bounds(&sys, &r.cell.bx, k, &opts, &spec).unwrap().iter().enumerate() {
                assert_eq!(spec.region_cost(b, t + 1), 0.0);
            }
            assert_eq!(audit(&sys, &r.cell.bx, &spec, k, if safe_cells <= 5 { 100_000 } else { 5_000 }, &mut rng), 0);
        }
    }
    assert!(safe_cells > 5, "only {safe_cells} safe cells exercised");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splitting_keeps_safe_cells_safe(seed in any::<u64>(), dim in 0usize..2) {
        let (sys, cell) = instance(seed);
        let spec = spec();
        let opts = BabOptions { precision: 10.0, method: Method::Ibp, max_cells: Some(1), segment: None };
        let parent = branch_and_bound(&cell, &sys, 3, &spec, &opts).unwrap();
        if parent.verdict == Verdict::Safe {
            let (a, b) = cell.split(dim);
            for child in [a, b] {
                prop_assert_eq!(branch_and_bound(&child, &sys, 3, &spec, &opts).unwrap().verdict, Verdict::Safe);
            }
        }
    }
}
