/// Adaptive Simpson integration of `f` over `[a, b]`.
///
/// Subdivision stops when the Richardson error estimate of a panel falls
/// below its share of `rel_tol` times the running scale of the integral.
/// The scale is the integral of `|f|` estimated on a coarse grid so that
/// integrals which cancel to zero still terminate.
pub fn adaptive_simpson<F: Fn(f64) -> f64 + ?Sized>(f: &F, a: f64, b: f64, rel_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    const GRID: usize = 64;
    let h = (b - a) / GRID as f64;
    let scale: f64 = (0..=GRID).map(|i| f(a + i as f64 * h).abs()).sum::<f64>() * h.abs();
    let eps = rel_tol * scale.max(f64::MIN_POSITIVE);
    // Start from a fixed partition so oscillatory integrands are resolved.
    let mut total = 0.0;
    for i in 0..GRID / 4 {
        let lo = a + (4 * i) as f64 * h;
        let hi = if i + 1 == GRID / 4 { b } else { lo + 4.0 * h };
        let fa = f(lo);
        let fb = f(hi);
        let m = 0.5 * (lo + hi);
        let fm = f(m);
        let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
        total += recurse(f, lo, hi, fa, fm, fb, whole, eps / (GRID / 4) as f64, 48);
    }
    total
}

#[allow(clippy::too_many_arguments)]
fn recurse<F: Fn(f64) -> f64 + ?Sized>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, eps: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * eps {
        return left + right + delta / 15.0;
    }
    recurse(f, a, m, fa, flm, fm, left, 0.5 * eps, depth - 1) + recurse(f, m, b, fm, frm, fb, right, 0.5 * eps, depth - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_and_oscillatory() {
        let v = adaptive_simpson(&|x: f64| x * x * x - x, 0.0, 2.0, 1e-12);
        assert!((v - 2.0).abs() < 1e-12);
        let k = 37.0;
        let v = adaptive_simpson(&|x: f64| (k * x).cos(), -0.5, 0.5, 1e-10);
        assert!((v - 2.0 * (k * 0.5).sin() / k).abs() < 1e-11);
        let v = adaptive_simpson(&|x: f64| (-x * x).exp(), -8.0, 8.0, 1e-10);
        assert!((v - std::f64::consts::PI.sqrt()).abs() < 1e-9);
    }
}
