use std::time::Instant;

use geoaware::gradsuite::{run_gradient_suite, SUITE_TOLERANCE};
use geoaware::numerics::Fault;

#[test]
fn every_component_passes_within_a_minute() {
    let t = Instant::now();
    let entries = run_gradient_suite(None).unwrap();
    let elapsed = t.elapsed().as_secs_f64();
    for e in &entries {
        assert!(e.passed(), "{}: {:e} > {SUITE_TOLERANCE:e}", e.component, e.max_rel_err);
    }
    for name in ["conv1d", "project_vision", "trunk", "mlp_head", "vqbet_head", "end_to_end_geo", "end_to_end_pixel"] {
        assert!(entries.iter().any(|e| e.component == name), "{name} missing");
    }
    assert!(elapsed <= 60.0, "{elapsed:.1} s");
}

#[test]
fn broken_conv1d_backward_is_caught_and_named() {
    let entries = run_gradient_suite(Some(Fault::Conv1dBackward)).unwrap();
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.component.as_str()).collect();
    assert!(failed.contains(&"conv1d"), "{failed:?}");
    assert!(!failed.contains(&"matmul") && !failed.contains(&"end_to_end_pixel"), "{failed:?}");
}
