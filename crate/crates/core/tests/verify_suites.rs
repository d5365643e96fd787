use cipa_core::bench::bench_scan;
use cipa_core::verify::{
    crm_suite, determinism_suite, geometry_suite, gradient_suite, lti_suite, metrics_suite, preprocessing_suite, Fault,
};

#[test]
fn lti_suite_passes_and_catches_a_broken_scan() {
    let ok = lti_suite(20, 3, None).unwrap();
    assert!(ok.passed, "{ok:?}");
    assert!(ok.max_error < 1e-9);
    let bad = lti_suite(5, 3, Some(Fault::Scan)).unwrap();
    assert!(!bad.passed, "{bad:?}");
}

#[test]
fn gradient_suite_passes_for_several_seeds() {
    for seed in [0, 1] {
        let (r, reports) = gradient_suite(seed, 2).unwrap();
        let worst = reports.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).unwrap();
        assert!(r.passed, "seed {seed}: {} at {:.3e}", worst.name, worst.rel_err);
        for needle in ["selective_scan", "ss2d", "crm", "dcim", "cipa_net"] {
            assert!(reports.iter().any(|g| g.name.starts_with(needle)), "no check for {needle}");
        }
    }
}

#[test]
fn geometry_suite_passes_and_catches_a_shift() {
    assert!(geometry_suite(1, None).unwrap().passed);
    assert!(!geometry_suite(1, Some(Fault::Geometry)).unwrap().passed);
}

#[test]
fn crm_outputs_stay_in_bounds() {
    let r = crm_suite(100, 2).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn metric_suite_passes_and_catches_a_flipped_pixel() {
    assert!(metrics_suite(50, 4, None).unwrap().passed);
    assert!(!metrics_suite(50, 4, Some(Fault::Metrics)).unwrap().passed);
}

#[test]
fn preprocessing_suite_passes() {
    let r = preprocessing_suite(100, 5).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn training_is_reproducible_and_resumable() {
    let r = determinism_suite().unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn chunked_scan_matches_sequential_in_bench() {
    let r = bench_scan(1, 0).unwrap();
    assert_eq!(r.rows.len(), 6);
    assert!(r.max_chunk_diff <= 1e-5, "{}", r.table());
    assert!(r.rows.iter().all(|row| row.sequential_ms > 0.0));
}
