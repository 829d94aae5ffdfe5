use tim4rec::ops::with_corrupted_silu_backward;
use tim4rec::verify::{metric_oracle, run_suite};

#[test]
fn quick_suite_passes() {
    let checks = run_suite(true);
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    assert!(failed.is_empty(), "{failed:#?}");
    assert!(checks.iter().any(|c| c.name == "grad-model"));
}

#[test]
fn corrupted_rule_fails_named_checks() {
    let checks = with_corrupted_silu_backward(|| run_suite(true));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    assert!(failed.contains(&"grad-silu"), "{failed:?}");
    assert!(!failed.contains(&"kernel-parity"));
}

#[test]
fn metric_oracle_has_no_mismatches() {
    assert_eq!(metric_oracle(200, 99).unwrap(), 0);
}
