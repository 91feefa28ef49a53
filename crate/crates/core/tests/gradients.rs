use esnet_core::gradcheck::suite::{block_cases, network_cases, op_cases, SuiteCase, SuiteScale};

fn assert_all(cases: &[SuiteCase]) {
    for c in cases {
        println!(
            "{:<40} {:.3e} ({} checked, {} skipped)",
            c.name, c.report.max_rel_error, c.report.checked, c.report.skipped
        );
    }
    let failed: Vec<&SuiteCase> = cases.iter().filter(|c| !c.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn ops_match_central_differences() {
    let cases = op_cases().unwrap();
    assert_eq!(cases.len(), 16);
    assert_all(&cases);
}

#[test]
fn blocks_match_central_differences() {
    assert_all(&block_cases().unwrap());
}

#[test]
fn scaled_network_matches_central_differences() {
    let cases = network_cases(SuiteScale::Small).unwrap();
    assert!(cases[0].report.checked >= 9_500);
    assert_all(&cases);
}
