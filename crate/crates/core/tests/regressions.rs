//! Cases once found by the property suite.

mod common;

use common::*;
use fieldmachine::gaussian::{evolve, symplectic_eigenvalues};
use fieldmachine::qtp::{ramp_valve, MergeConfig, TrotterScheme, ValveDirection};

/// The symmetric eigensolver misconverged on one split frame of this pair and
/// reported a symplectic eigenvalue of 0.73.
#[test]
fn split_frame_with_ill_conditioned_covariance() {
    let spec = PairSpec {
        n_left: 14,
        n_right: 13,
        j_hz: 0.01,
        erf: true,
        t_left: 32.67908489609723,
        t_right: 35.12760138745306,
    };
    let t = 19.177684269083173;
    let pair = spec.build();
    let merged = evolve(&spec.initial_state(&pair), &pair.coupled, t).unwrap();
    let d_ref = symplectic_eigenvalues(&merged).unwrap()[0];
    let cfg = MergeConfig::new(t, ValveDirection::Split).with_scheme(TrotterScheme::SplitStep);
    for f in ramp_valve(&merged, &pair.uncoupled, &pair.coupled, &cfg, 40).unwrap() {
        let d = symplectic_eigenvalues(&f.state).unwrap()[0];
        assert!(d >= 1.0, "frame at {} ms: {d}", f.time);
        assert!((d - d_ref).abs() < 1e-6 * d_ref, "frame at {} ms: {d} vs {d_ref}", f.time);
    }
    cone_preserved(&spec, t).unwrap();
}
