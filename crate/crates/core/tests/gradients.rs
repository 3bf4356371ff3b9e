mod common;

use common::grads;

#[test]
fn every_component_matches_central_differences() {
    for (name, check) in grads::suite() {
        assert!(check.coordinates > 0, "{name}: nothing checked");
        assert!(
            check.max_rel_error <= grads::TOLERANCE,
            "{name}: relative error {:.3e}",
            check.max_rel_error
        );
    }
}

#[test]
fn rel_err_floor_handles_vanishing_gradients() {
    assert_eq!(common::rel_err(0.0, 0.0), 0.0);
    assert!(common::rel_err(1e-9, 0.0) < 1e-2);
}
