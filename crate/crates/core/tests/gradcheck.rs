mod support;

use support::{check_loss_grads, check_model_grads, layer_cases, CheckStats, LOSS_CASES, REL_TOL};

const INSTANCES: u64 = 20;

#[test]
fn layer_gradients_match_finite_differences() {
    for (name, spec) in layer_cases() {
        let mut total = CheckStats::default();
        for seed in 0..INSTANCES {
            let s = check_model_grads(&spec, 1000 + seed, 3);
            assert!(s.max_rel < REL_TOL, "{name} seed {seed}: rel err {}", s.max_rel);
            total.merge(s);
        }
        assert!(total.compared > 10 * total.skipped, "{name}: too many kinks skipped {total:?}");
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    for case in LOSS_CASES {
        for seed in 0..INSTANCES {
            let s = check_loss_grads(case, seed);
            assert!(s.max_rel < REL_TOL, "{case} seed {seed}: rel err {}", s.max_rel);
        }
    }
}
