//! Library routines against independent scalar re-implementations, on 100
//! random small instances each. Loss oracles sum in a different order than
//! the library, so they agree to round-off; the cache mean is bit-exact.

mod common;

use common::oracles::{cache_average_worst, cross_entropy_worst, similarity_worst};

#[test]
fn similarity_matches_scalar_loop() {
    let w = similarity_worst();
    assert!(w <= 1e-13, "worst {w}");
}

#[test]
fn cross_entropy_matches_definition() {
    let w = cross_entropy_worst();
    assert!(w <= 1e-13, "worst {w}");
}

#[test]
fn cache_matches_two_pass_mean() {
    let w = cache_average_worst();
    assert_eq!(w, 0.0);
}
