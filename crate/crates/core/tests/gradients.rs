mod common;

use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn every_primitive_matches_central_differences(seed in any::<u64>()) {
        for prim in common::primitives() {
            let err = common::check_primitive(&prim, seed);
            prop_assert!(err < 1e-4, "{}: {err}", prim.name);
        }
    }
}

#[test]
fn full_objective_matches_central_differences() {
    for seed in 1..=5 {
        let err = common::check_full_loss(2, 6, 3, seed);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}
