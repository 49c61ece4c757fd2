//! The release gate: every numbered criterion runs in order and prints one
//! pass/fail line. A single test keeps the run serial, which the mutation
//! criterion needs because it flips the global fault switch.

use m4fuse_core::accept;

#[test]
fn acceptance_criteria() {
    let results = accept::run_all().expect("criterion runner errored");
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.pass { "PASS" } else { "FAIL" };
        println!(
            "[{status}] {}. {} ({}): {} [{:.1}s]",
            r.id, r.name, r.area, r.detail, r.seconds
        );
        if !r.pass {
            failed.push(r.id);
        }
    }
    assert!(failed.is_empty(), "criteria {failed:?} failed, see lines above");
}
