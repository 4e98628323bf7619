//! The full finite-difference suite over operations, cells and losses.

use hypercell_core::gradcheck::standard_suite;

#[test]
fn every_component_matches_finite_differences() {
    for seed in [0, 1] {
        let suite = standard_suite(10, 1e-5, seed).unwrap();
        assert_eq!(suite.len(), 15 + 6);
        for entry in &suite {
            assert_eq!(entry.report.checked, 10, "{}", entry.name);
            assert!(
                entry.report.passes(1e-4),
                "seed {seed} {}: {:?}",
                entry.name,
                entry.report
            );
        }
    }
}
