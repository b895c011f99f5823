mod common;

use common::{finite_difference_grads, random_any};
use dpclip::clipping::nonprivate_strategy;

/// Per-tensor `‖fd − analytic‖ / ‖analytic‖`, floored for tensors whose
/// gradient is numerically zero.
fn worst_tensor_error(seed: u64) -> (f64, String) {
    let case = random_any(seed);
    let analytic = nonprivate_strategy(&case.model, &case.x, &case.y).unwrap().grads;
    let fd = finite_difference_grads(&case.model, &case.x, &case.y, 1e-6);
    let mut worst = (0.0, String::new());
    for ((a, f), p) in analytic.iter().zip(&fd).zip(&case.model.params) {
        let err = a.sub(f).unwrap().norm() / a.norm().max(1e-6);
        if err > worst.0 {
            worst = (err, p.name.clone());
        }
    }
    worst
}

#[test]
fn analytic_gradients_match_central_differences() {
    for seed in 0..20 {
        let (err, name) = worst_tensor_error(9000 + seed);
        assert!(err <= 1e-4, "model {seed}: parameter {name} relative error {err:e}");
    }
}
