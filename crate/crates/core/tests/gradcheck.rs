use redistill::kernel::{grad_check, GradCheckOp, Probe, DEFAULT_DELTA};

const TOL: f64 = 1e-5;

#[test]
fn every_op_passes_on_twenty_seeds() {
    for op in [GradCheckOp::RedBlock, GradCheckOp::RedLoss, GradCheckOp::KdLoss, GradCheckOp::DiffusionLoss] {
        for seed in 0..20 {
            let r = op.run(seed, TOL);
            assert!(r.passed, "{} seed {seed}: {:?}", op.name(), r.groups);
            assert!(r.max_rel_error < TOL);
            assert!(!r.groups.is_empty());
        }
    }
}

#[test]
fn corrupted_backward_is_caught_on_every_seed() {
    for seed in 0..20 {
        let r = GradCheckOp::CorruptedRedBlock.run(seed, TOL);
        assert!(!r.passed, "seed {seed}");
        assert!(r.max_rel_error > 1e-2);
    }
}

#[test]
fn checker_accepts_exact_and_rejects_scaled_gradients() {
    // L = Σ x³ + x·y, with dL/dx = 3x² + y and dL/dy = x.
    let x = [0.3, -1.2, 2.0];
    let y = [0.7, 0.1, -0.4];
    let dx: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 3.0 * a * a + b).collect();
    let loss = |v: &[Vec<f64>]| v[0].iter().zip(&v[1]).map(|(a, b)| a * a * a + a * b).sum::<f64>();
    let good = grad_check("cubic", &[Probe::new("x", &x, &dx), Probe::new("y", &y, &x)], loss, TOL, DEFAULT_DELTA);
    assert!(good.passed, "{:?}", good.groups);
    let wrong: Vec<f64> = dx.iter().map(|g| 1.01 * g).collect();
    let bad = grad_check("cubic", &[Probe::new("x", &x, &wrong), Probe::new("y", &y, &x)], loss, TOL, DEFAULT_DELTA);
    assert!(!bad.passed);
    assert_eq!(bad.groups[0].name, "x");
    assert!(bad.groups[1].max_rel_error < TOL);
}

#[test]
fn non_finite_losses_fail() {
    let r = grad_check("nan", &[Probe::new("x", &[1.0], &[0.0])], |_| f64::NAN, TOL, DEFAULT_DELTA);
    assert!(!r.passed);
}
