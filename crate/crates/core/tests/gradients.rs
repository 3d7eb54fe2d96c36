use std::time::Instant;

use mwdcnn::gradsuite::{run_suite, SuiteOptions};

#[test]
fn full_finite_difference_suite() {
    let start = Instant::now();
    let reports = run_suite(&SuiteOptions::default()).unwrap();
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).collect();
    for r in reports.iter().filter(|r| !r.label.contains("(seed")) {
        print!("{r}");
    }
    println!("{} checks in {:.1?}", reports.len(), start.elapsed());
    assert!(failed.is_empty(), "{}", failed.iter().map(|r| r.to_string()).collect::<String>());
}
