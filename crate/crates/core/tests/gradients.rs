mod common;

use common::*;

#[test]
fn every_loss_matches_central_differences() {
    for (name, r) in all_gradchecks() {
        println!("{name}: max rel error {:.2e} over {} probes", r.max_rel_error, r.checked);
        assert!(r.checked > 0, "{name}: nothing probed");
        assert!(r.max_rel_error < GRAD_TOL, "{name}: {r:?}");
    }
}
