// NaN errors must fail, hence the negated comparisons
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use common::{desk_end_to_end, layer_cases, MAX_KINK_SHARE};

const LAYER_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;

#[test]
fn every_layer_matches_finite_differences() {
    let cases = layer_cases(10);
    assert!(cases.len() >= 100, "only {} cases", cases.len());
    let failures: Vec<String> = cases
        .iter()
        .filter(|c| !(c.max_rel < LAYER_TOL))
        .map(|c| format!("{}: {:.3e}", c.layer, c.max_rel))
        .collect();
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn desk_model_end_to_end() {
    for seed in [5, 11] {
        let r = desk_end_to_end(seed);
        assert!(r.max_rel < MODEL_TOL, "seed {seed}: max relative error {:.3e}", r.max_rel);
        assert!(
            (r.kinks as f64) <= MAX_KINK_SHARE * r.probes as f64,
            "seed {seed}: {} of {} probes straddle a kink",
            r.kinks,
            r.probes
        );
    }
}
