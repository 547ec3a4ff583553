use kvchain::verify::run_all;

#[test]
fn every_suite_passes() {
    let results = run_all(0).unwrap();
    for r in &results {
        println!("{:<24} worst {:.3e} <= {:.1e} {}", r.name, r.worst, r.threshold, r.passed);
    }
    assert!(results.iter().all(|r| r.passed));
}
