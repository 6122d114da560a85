//! Central finite-difference oracles for every differentiable op, plus
//! property tests for shape arithmetic.

#[path = "common/gradoracle.rs"]
mod gradoracle;

use layerwise::autodiff::Tape;
use layerwise::nn::PoolSpec;
use proptest::prelude::*;

#[test]
fn conv2d_matches_finite_differences() {
    assert!(gradoracle::conv2d_suite() >= 50);
}

#[test]
fn linear_matches_finite_differences() {
    assert!(gradoracle::linear_suite() >= 50);
}

#[test]
fn batch_norm_train_matches_finite_differences() {
    assert!(gradoracle::batch_norm_suite() >= 50);
}

#[test]
fn leaky_relu_matches_finite_differences_away_from_kink() {
    assert!(gradoracle::leaky_relu_suite() >= 50);
}

#[test]
fn max_pool_matches_finite_differences_at_non_tied_points() {
    assert!(gradoracle::max_pool_suite() >= 50);
}

#[test]
fn avg_pool_matches_finite_differences() {
    assert!(gradoracle::avg_pool_suite() >= 50);
}

#[test]
fn adaptive_avg_pool_matches_finite_differences() {
    assert!(gradoracle::adaptive_avg_pool_suite() >= 50);
}

#[test]
fn cross_entropy_matches_finite_differences() {
    assert!(gradoracle::cross_entropy_suite() >= 50);
}

#[test]
fn frobenius_onehot_matches_finite_differences() {
    assert!(gradoracle::frobenius_suite() >= 50);
}

proptest! {
    #[test]
    fn conv_output_shape_formula(
        n in 1usize..3, cin in 1usize..3, cout in 1usize..3,
        hw in 3usize..8, stride in 1usize..3,
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![0.0; n * cin * hw * hw], vec![n, cin, hw, hw], false);
        let w = tape.leaf(vec![0.0; cout * cin * 9], vec![cout, cin, 3, 3], false);
        let b = tape.leaf(vec![0.0; cout], vec![cout], false);
        let out = tape.conv2d(x, w, b, stride, 1).unwrap();
        let expect = (hw + 2 - 3) / stride + 1;
        prop_assert_eq!(tape.shape(out), &[n, cout, expect, expect]);
    }

    #[test]
    fn pool_output_shape_formula(
        n in 1usize..3, c in 1usize..3, hw in 2usize..9, window in 1usize..3,
    ) {
        prop_assume!(window <= hw);
        let mut tape = Tape::new();
        let x = tape.leaf(vec![0.0; n * c * hw * hw], vec![n, c, hw, hw], false);
        let out = tape.pool2d(x, PoolSpec::max(window, window)).unwrap();
        let expect = (hw - window) / window + 1;
        prop_assert_eq!(tape.shape(out), &[n, c, expect, expect]);
    }

    #[test]
    fn adaptive_pool_hits_requested_shape(
        n in 1usize..3, c in 1usize..3, hw in 1usize..8, target in 1usize..8,
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![0.0; n * c * hw * hw], vec![n, c, hw, hw], false);
        let out = tape.adaptive_avg_pool2d(x, target, target).unwrap();
        prop_assert_eq!(tape.shape(out), &[n, c, target, target]);
    }
}
