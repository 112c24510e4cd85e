use lightstereo::gradcheck::{run_suite, TOLERANCE};

#[test]
fn every_backward_matches_finite_differences() {
    let results = run_suite(7).unwrap();
    let mut failed = Vec::new();
    for r in &results {
        println!("{:<28} max rel err {:.3e} over {} entries", r.name, r.max_rel_error, r.entries);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    assert!(results.len() >= 20);
    assert!(failed.is_empty(), "above {TOLERANCE}: {failed:?}");
}
