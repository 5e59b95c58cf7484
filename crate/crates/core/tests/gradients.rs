//! Analytic gradients against central finite differences.

mod common;

use common::{backward_error, correspondence_error, grad_case, guidance_errors};

const CASES: u64 = 24;
const REL_TOL: f64 = 1e-4;

#[test]
fn guidance_loss_gradients() {
    for seed in 0..CASES {
        let (f, q) = guidance_errors(&grad_case(seed));
        assert!(f <= REL_TOL, "case {}: d/dF error {}", seed, f);
        assert!(q <= REL_TOL, "case {}: d/dq error {}", seed, q);
    }
}

#[test]
fn correspondence_loss_gradients() {
    for seed in 0..CASES {
        let e = correspondence_error(&grad_case(100 + seed));
        assert!(e <= REL_TOL, "case {}: error {}", seed, e);
    }
}

#[test]
fn backward_features_gradients() {
    for seed in 0..CASES {
        let e = backward_error(&grad_case(200 + seed));
        assert!(e <= REL_TOL, "case {}: error {}", seed, e);
    }
}
