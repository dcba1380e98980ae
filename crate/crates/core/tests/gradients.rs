use fgs_core::tensor::gradcheck::{op_suite, SUITE_FLOOR};

#[test]
fn every_layer_matches_finite_differences() {
    let suite = op_suite(20, 2024).unwrap();
    let names: Vec<&str> = suite.iter().map(|(n, _)| *n).collect();
    for op in ["conv2d", "dense", "relu", "sigmoid", "softmax cross-entropy", "batchnorm", "maxpool2d", "upsample2d"] {
        assert!(names.iter().any(|n| n.starts_with(op)), "{op} not covered");
    }
    let mut total = 0;
    for (name, report) in &suite {
        assert!(report.forward_err < 1e-5, "{name}: forward off by {:.2e}", report.forward_err);
        for p in &report.probes {
            let err = p.rel_err(SUITE_FLOOR);
            assert!(err < 1e-3, "{name}: {p:?} rel err {err:.2e}");
        }
        total += report.probes.len();
    }
    assert!(total >= 100, "only {total} probes");
}

#[test]
fn checks_are_reproducible() {
    let a = op_suite(5, 7).unwrap();
    let b = op_suite(5, 7).unwrap();
    for ((_, ra), (_, rb)) in a.iter().zip(&b) {
        assert_eq!(ra.probes, rb.probes);
    }
}
