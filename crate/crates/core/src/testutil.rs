#[track_caller]
pub fn assert_close(a: impl Into<f64>, b: impl Into<f64>, tol: f64) {
    let (a, b) = (a.into(), b.into());
    assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
}
