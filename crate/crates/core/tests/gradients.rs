//! Finite-difference verification of every differentiable op and loss.
//! f32 (the training precision) must sit below 1e-3 relative error; the
//! identical generic code in f64 must sit below 1e-6.

mod common;

#[test]
fn every_op_and_loss_passes_finite_difference_checks() {
    for case in common::run_gradient_suite() {
        case.f32_report
            .assert_below(1e-3, &format!("{} (f32)", case.label));
        case.f64_report
            .assert_below(1e-6, &format!("{} (f64)", case.label));
    }
}

#[test]
fn reconstruction_head_gradient_matches_finite_differences() {
    common::head_reconstruction_grad_report().assert_below(1e-3, "head_reconstruct mse");
}

#[test]
fn full_model_backward_matches_finite_differences() {
    common::full_model_grad_report().assert_below(1e-3, "full model total loss");
}
