/// Inverse golden ratio.
const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section minimization of a unimodal `f` on `[lo, hi]` until the
/// bracket is narrower than `tol`. Returns the best interior point seen.
pub fn golden_section(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a) > tol {
        // NaN compares false and so is treated like +inf
        if fc < fd || fd.is_nan() {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd || fd.is_nan() {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Step in `[0, 1]` minimizing a convex `phi`; returns `(0, phi(0))` when no
/// tested step strictly improves on it.
///
/// The bracket is first halved while `phi(hi/2) >= phi(0)`, which for convex
/// `phi` keeps the minimizer inside `[0, hi]`, then refined to `tol * hi`.
pub fn segment_search(phi: impl Fn(f64) -> f64, tol: f64) -> (f64, f64) {
    let f0 = phi(0.0);
    let mut hi = 1.0;
    let f1 = phi(1.0);
    if f1 < f0 && phi(1.0 - tol) >= f1 {
        return (1.0, f1);
    }
    loop {
        let mid = 0.5 * hi;
        if mid < 1e-16 {
            return (0.0, f0);
        }
        let fm = phi(mid);
        if fm >= f0 || fm.is_nan() {
            hi = mid;
        } else {
            break;
        }
    }
    let (g, fg) = golden_section(&phi, 0.0, hi, tol * hi);
    if fg < f0 {
        (g, fg)
    } else {
        (0.0, f0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_minimum() {
        let (x, fx) = golden_section(|x| (x - 0.3) * (x - 0.3), 0.0, 1.0, 1e-9);
        assert!((x - 0.3).abs() < 1e-8);
        assert!(fx < 1e-16);
    }

    #[test]
    fn segment_prefers_endpoint_for_decreasing_phi() {
        let (g, _) = segment_search(|t| -t, 1e-6);
        assert_eq!(g, 1.0);
    }

    #[test]
    fn segment_rejects_ascent() {
        assert_eq!(segment_search(|t| t, 1e-6), (0.0, 0.0));
        assert_eq!(segment_search(|_| 2.0, 1e-6), (0.0, 2.0));
    }

    #[test]
    fn segment_finds_tiny_optimum_and_handles_barriers() {
        let (g, _) = segment_search(|t| (t - 1e-4) * (t - 1e-4), 1e-6);
        assert!((g - 1e-4).abs() < 1e-9);
        let barrier = |t: f64| if t > 0.5 { f64::INFINITY } else { (t - 0.4).powi(2) };
        let (g, _) = segment_search(barrier, 1e-6);
        assert!((g - 0.4).abs() < 1e-6);
    }
}
