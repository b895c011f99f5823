mod common;

use common::{naive_norms, random_case, rel_err, Family, FAMILIES};
use dpclip::clipping::{
    fast_per_example_norms, naive_per_example_gradients, nonprivate_strategy, per_example_gradients,
};
use dpclip::Tensor;

const TRIALS: u64 = 50;

fn check_family(family: Family) {
    for trial in 0..TRIALS {
        let seed = 1000 * (family as u64 + 1) + trial;
        let case = random_case(family, seed);
        assert!(case.model.param_count() <= 5000, "{family:?} trial {trial}: {} params", case.model.param_count());
        let fast = fast_per_example_norms(&case.model, &case.x, &case.y).unwrap();
        let naive = naive_norms(&case).unwrap();
        for (i, (&f, &n)) in fast.data().iter().zip(&naive).enumerate() {
            let err = (f - n).abs() / n.max(1e-12);
            assert!(err <= 1e-6, "{family:?} trial {trial} example {i}: fast {f} naive {n}");
        }
    }
}

#[test]
fn linear_norms_match_per_example_backward() {
    check_family(Family::Linear);
}

#[test]
fn conv_norms_match_per_example_backward() {
    check_family(Family::Conv);
}

#[test]
fn rnn_norms_match_per_example_backward() {
    check_family(Family::Rnn);
}

#[test]
fn lstm_norms_match_per_example_backward() {
    check_family(Family::Lstm);
}

#[test]
fn layernorm_norms_match_per_example_backward() {
    check_family(Family::LayerNorm);
}

#[test]
fn attention_norms_match_per_example_backward() {
    check_family(Family::Attention);
}

#[test]
fn per_example_gradients_match_tensorwise() {
    for (f, &family) in FAMILIES.iter().enumerate() {
        for trial in 0..5 {
            let case = random_case(family, 77 + 10 * f as u64 + trial);
            let fast = per_example_gradients(&case.model, &case.x, &case.y).unwrap();
            let naive = naive_per_example_gradients(&case.model, &case.x, &case.y).unwrap();
            for (i, example) in naive.iter().enumerate() {
                let row: Vec<Tensor> =
                    fast.iter().zip(example).map(|(g, n)| g.rows(i, 1).unwrap().reshape(n.shape()).unwrap()).collect();
                assert!(rel_err(&row, example, 1e-12) <= 1e-8, "{family:?} trial {trial} example {i}");
            }
        }
    }
}

#[test]
fn per_example_gradients_sum_to_the_batch_gradient() {
    for (f, &family) in FAMILIES.iter().enumerate() {
        let case = random_case(family, 500 + f as u64);
        let tau = case.y.len() as f64;
        let per = per_example_gradients(&case.model, &case.x, &case.y).unwrap();
        let summed: Vec<Tensor> =
            per.iter().map(|g| g.sum_rows().reshape(&g.shape()[1..]).unwrap().scale(1.0 / tau)).collect();
        let batch = nonprivate_strategy(&case.model, &case.x, &case.y).unwrap().grads;
        assert!(rel_err(&summed, &batch, 1e-12) <= 1e-10, "{family:?}");
    }
}
