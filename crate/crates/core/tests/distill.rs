use wavelet_vit::distill::{distill_loss, fit_projection, DistillBatch};
use wavelet_vit::numerics::Matrix;
use wavelet_vit::selfcheck::{fit_fixture, gradient_check};

#[test]
fn gradient_matches_central_differences() {
    for (seed, dim) in [(1u64, 2usize), (2, 16), (3, 64)] {
        let rel = gradient_check(seed, 100, dim).unwrap();
        assert!(rel <= 1e-5, "dim {dim}: relative error {rel:e}");
    }
}

#[test]
fn loss_sums_over_levels() {
    let t = vec![1.0f64, 0.0];
    let orth = vec![0.0f64, 3.0];
    let b = DistillBatch {
        readouts: vec![t.clone(), orth.clone(), orth],
        teacher: t,
    };
    assert!((distill_loss(&b).unwrap() - 2.0).abs() < 1e-15);
}

#[test]
fn fit_descends_strictly_on_fixture() {
    let (h, t, w0) = fit_fixture();
    let r = fit_projection(&h, &t, &w0, 100, 0.1).unwrap();
    assert!(!r.diverged);
    assert_eq!(r.history.len(), 101);
    assert!(r.history.windows(2).all(|w| w[1] < w[0]));
    assert!(r.history[100] < 1e-3 * r.history[0]);
    assert_eq!((r.rows, r.cols), (2, 2));
}

#[test]
fn ascent_is_flagged_as_divergence() {
    let (h, t, w0) = fit_fixture();
    let r = fit_projection(&h, &t, &w0, 100, -0.05).unwrap();
    assert!(r.diverged);
    assert!(r.history.len() < 100);
}

#[test]
fn fit_handles_several_rows() {
    let h = Matrix::from_rows(&[vec![1.0f64, 0.2, -0.4], vec![0.1, 0.9, 0.3], vec![-0.5, 0.4, 1.0]]).unwrap();
    let t = Matrix::from_rows(&[vec![0.0f64, 1.0], vec![1.0, 0.2], vec![0.5, -0.5]]).unwrap();
    let w0 = Matrix::from_rows(&[vec![0.3f64, 0.1], vec![-0.2, 0.4], vec![0.1, 0.1]]).unwrap();
    let r = fit_projection(&h, &t, &w0, 200, 0.05).unwrap();
    assert!(r.history.last().unwrap() < &r.history[0]);
}
