//! Tape gradients of the training objectives against central differences.

mod common;

use common::*;

fn check(points: &[Point]) {
    assert!(!points.is_empty());
    for p in points {
        let e = p.rel_error();
        assert!(e < REL_TOL, "{}: {} analytic {} numeric {} (rel {e:e})", p.what, p.name, p.analytic, p.numeric);
    }
}

#[test]
fn ordinal_loss_gradient() {
    check(&ordinal_points());
}

#[test]
fn total_dae_loss_gradient() {
    for grl in [true, false] {
        let points = dae_total_points(grl);
        check(&points);
        assert!(points.iter().any(|p| depflow::dae::DaeModel::is_encoder_param(p.name.split('[').next().unwrap())));
    }
}

#[test]
fn reversal_negates_the_encoder_gradient_exactly() {
    let n = grl_negation().unwrap();
    assert!(n > 0);
}

#[test]
fn duration_prior_and_flow_graph_forms() {
    check(&loss_form_points());
}

#[test]
fn generator_loss_gradients() {
    check(&generator_points());
}
