//! Central finite differences against analytic gradients.

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)` over all
/// coordinates, with step `h`.
pub fn max_relative_error<F>(f: F, params: &[f64], analytic: &[f64], h: f64, floor: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let x = p[i];
        p[i] = x + h;
        let up = f(&p);
        p[i] = x - h;
        let down = f(&p);
        p[i] = x;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}
