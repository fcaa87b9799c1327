use compconv::verify::{run_suite, Suite};

#[test]
fn every_suite_passes() {
    for suite in Suite::ALL {
        let r = run_suite(suite, 0).unwrap();
        eprintln!(
            "{} {}/{} in {:.2}s max_rel={:?}",
            suite.name(),
            r.passed,
            r.checks,
            r.seconds,
            r.max_rel_error
        );
        assert!(r.ok(), "{:#?}", r.failures);
    }
}
