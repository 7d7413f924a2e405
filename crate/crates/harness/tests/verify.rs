use hmr_harness::verify::{run, select, Sabotage, SUITES};
use hmr_harness::HarnessError;

#[test]
fn filter_by_module_or_suite() {
    assert_eq!(select(Some("ssm")).unwrap(), ["scan-equivalence", "zoh-limit"]);
    assert_eq!(select(Some("procrustes")).unwrap(), ["procrustes"]);
    assert_eq!(select(None).unwrap().len(), SUITES.len());
    assert!(matches!(select(Some("nope")), Err(HarnessError::Usage(_))));
}

#[test]
fn ssm_suites_pass_and_only_they_run() {
    let r = run(Some("ssm"), Sabotage::default()).unwrap();
    let names: Vec<_> = r.suites.iter().map(|s| s.suite.as_str()).collect();
    assert_eq!(names, ["scan-equivalence", "zoh-limit"]);
    assert!(r.passed, "{:?}", r.failures);
    let scan = r.suite("scan-equivalence").unwrap();
    assert_eq!(scan.cases, 1000);
    assert!(scan.max_err < 1e-10);
    assert!(scan.wall_clock_s < 10.0, "{} s", scan.wall_clock_s);
}

#[test]
fn sign_flipped_state_matrix_is_caught() {
    let r = run(Some("scan-equivalence"), Sabotage { flip_a_bar_sign: true }).unwrap();
    assert!(!r.passed);
    let s = r.suite("scan-equivalence").unwrap();
    assert!(s.failed_cases > 0 && s.max_err > 1e-3, "{s:?}");
    assert!(s.failures[0].contains("max diff"), "{}", s.failures[0]);
    assert_eq!(r.failures.len(), 1);
    assert_eq!(r.failures[0].suite, "scan-equivalence");
    // Same report twice, clock aside.
    let again = run(Some("scan-equivalence"), Sabotage { flip_a_bar_sign: true }).unwrap();
    assert_eq!(hmr_harness::report::hash_without_clock(&r), hmr_harness::report::hash_without_clock(&again));
}

#[test]
fn cheap_suites_pass() {
    for suite in ["procrustes", "permutation", "loss-zero", "loss-weighting"] {
        let r = run(Some(suite), Sabotage::default()).unwrap();
        assert!(r.passed, "{suite}: {:?}", r.suites[0].failures);
        assert!(r.suites[0].cases > 0);
    }
}
