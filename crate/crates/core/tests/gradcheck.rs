// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::gradcheck::{run_all, REL_TOL};

#[test]
fn every_primitive_matches_central_differences() {
    for seed in [7u64, 8, 9] {
        for (name, rel) in run_all(seed) {
            assert!(rel < REL_TOL, "seed {seed}: {name} relative error {rel:.3e}");
        }
    }
}

#[test]
fn oracle_rejects_a_wrong_gradient() {
    use common::gradcheck::check;
    use lincirc::numerics::Tensor;
    // Tape computes x*x but the reference claims x*x*x: the gradients disagree.
    let x = Tensor::from_vec(vec![0.5, 1.5, -1.0]);
    let rel = check(&[x], |t, v| t.mul(v[0], v[0]).unwrap(), |x| x[0].iter().map(|p| p * p * p).collect(), 3);
    assert!(rel > 0.1, "oracle failed to flag mismatch: {rel}");
}
