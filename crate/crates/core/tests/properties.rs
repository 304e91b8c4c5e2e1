mod common;

use common::*;
use proptest::prelude::*;

fn check(r: Check) -> Result<(), TestCaseError> {
    r.map_err(TestCaseError::fail)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn propagators_are_symplectic(spec in pair_spec(), t in 0.0f64..50.0) {
        check(symplectic_propagators(&spec, t))?;
    }

    #[test]
    fn operations_stay_inside_the_cone(spec in pair_spec(), t in 0.1f64..20.0) {
        check(cone_preserved(&spec, t))?;
    }

    #[test]
    fn entropy_is_positive_and_conserved(spec in pair_spec(), t in 0.0f64..50.0) {
        check(entropy_invariant(&spec, t))?;
    }

    #[test]
    fn relative_entropy_vanishes_only_on_the_diagonal(spec in pair_spec(), dt in prop_oneof![1.0f64..30.0, -15.0f64..-1.0]) {
        check(relative_entropy_positive(&spec, dt))?;
    }

    #[test]
    fn mutual_information_is_positive_and_cleared_by_decorrelation(spec in pair_spec(), t in 0.0f64..30.0) {
        check(mutual_information_checks(&spec, t))?;
    }

    #[test]
    fn energy_density_sums_to_total(spec in pair_spec(), t in 0.0f64..30.0) {
        check(energy_density_sums(&spec, t))?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn trotter_error_is_second_order(spec in pair_spec(), t in 1.0f64..10.0) {
        check(trotter_halving(&spec, t))?;
    }

    #[test]
    fn slower_valves_inject_less(spec in pair_spec()) {
        check(merge_split_octaves(&spec, &[1.0, 4.0, 16.0, 64.0]))?;
    }
}
