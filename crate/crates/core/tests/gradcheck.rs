use sparkdqn::gradcheck::{run_all, TOLERANCE};

#[test]
fn every_backward_matches_finite_differences() {
    let results = run_all(2024, 6).unwrap();
    assert!(results.len() >= 100, "{} instances", results.len());
    let failures: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    assert!(failures.is_empty(), "tolerance {TOLERANCE}: {failures:#?}");
}
