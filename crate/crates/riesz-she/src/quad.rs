//! Adaptive one-dimensional quadrature (Gauss-Kronrod 7-15).
//!
//! Used by the kernel evaluations. Handles integrable endpoint behavior by
//! bisection; the caller is expected to substitute away genuinely singular
//! integrands first.

/// Kronrod nodes on [0, 1] side of the symmetric rule (abscissa magnitudes).
const XK: [f64; 8] = [
    0.991455371120813,
    0.949107912342759,
    0.864864423359769,
    0.741531185599394,
    0.586087235467691,
    0.405845151377397,
    0.207784955007898,
    0.0,
];

const WK: [f64; 8] = [
    0.022935322010529,
    0.063092092629979,
    0.104790010322250,
    0.140653259715525,
    0.169004726639267,
    0.190350578064785,
    0.204432940075298,
    0.209482141084728,
];

/// Gauss weights, matching the odd Kronrod nodes (indices 1, 3, 5, 7).
const WG: [f64; 4] = [
    0.129484966168870,
    0.279705391489277,
    0.381830050505119,
    0.417959183673469,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut ik = 0.0;
    let mut ig = 0.0;
    for (i, (&x, &wk)) in XK.iter().zip(WK.iter()).enumerate() {
        let (fl, fr) = if x == 0.0 {
            let v = f(c);
            (v, 0.0)
        } else {
            (f(c - h * x), f(c + h * x))
        };
        let s = fl + fr;
        ik += wk * s;
        if i % 2 == 1 {
            ig += WG[i / 2] * s;
        }
    }
    (ik * h, (ik - ig).abs() * h)
}

fn integrate_core<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
    presplit: usize,
) -> f64 {
    if a == b {
        return 0.0;
    }
    // (lo, hi, estimate, err)
    let pieces = presplit.max(1);
    let mut stack: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(64 + pieces);
    let mut total = 0.0;
    for i in 0..pieces {
        let lo = a + (b - a) * i as f64 / pieces as f64;
        let hi = a + (b - a) * (i + 1) as f64 / pieces as f64;
        let (v, e) = gk15(&f, lo, hi);
        total += v;
        stack.push((lo, hi, v, e));
    }
    let mut done_sum = 0.0;
    let mut done_err = 0.0;
    let max_splits = 20_000;
    let mut splits = 0;
    while let Some((lo, hi, est, err)) = stack.pop() {
        let tol = rel_tol.max(1e-15) * total.abs() + abs_tol;
        let live_err: f64 = stack.iter().map(|s| s.3).sum();
        if err <= tol * ((hi - lo) / (b - a)).abs().max(1e-12)
            || err <= 4.0 * f64::EPSILON * est.abs()
            || (done_err + live_err + err) <= tol
            || hi - lo < 1e-14 * (b - a).abs()
            || splits >= max_splits
        {
            done_sum += est;
            done_err += err;
            continue;
        }
        splits += 1;
        let mid = 0.5 * (lo + hi);
        let (il, el) = gk15(&f, lo, mid);
        let (ir, er) = gk15(&f, mid, hi);
        total += il + ir - est;
        stack.push((lo, mid, il, el));
        stack.push((mid, hi, ir, er));
    }
    done_sum
}

/// Integrate f over [a, b] adaptively until the local error estimates,
/// summed, fall below `max(abs_tol, rel_tol * |integral|)`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64, abs_tol: f64) -> f64 {
    integrate_core(f, a, b, rel_tol, abs_tol, 1)
}

/// Like [`integrate`] but seeds the adaptive pass with a uniform pre-split,
/// for wide domains where a single coarse rule would read near-zero and
/// miss localized mass entirely.
pub fn integrate_wide<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
    pieces: usize,
) -> f64 {
    integrate_core(f, a, b, rel_tol, abs_tol, pieces)
}

/// Convenience wrapper with tight default tolerances.
pub fn integrate_default<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    integrate(f, a, b, 1e-12, 1e-14)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_exact() {
        // degree 3 is exact even for the embedded Gauss rule
        let v = integrate_default(|x| x * x * x, 0.0, 1.0);
        assert!((v - 0.25).abs() < 1e-14, "{v}");
    }

    #[test]
    fn sine() {
        let v = integrate_default(f64::sin, 0.0, std::f64::consts::PI);
        assert!((v - 2.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn endpoint_singularity() {
        // integrable inverse square root
        let v = integrate(|x| 1.0 / x.sqrt(), 0.0, 1.0, 1e-10, 1e-12);
        assert!((v - 2.0).abs() < 1e-8, "{v}");
    }

    #[test]
    fn gaussian_tail() {
        let v = integrate_default(|x| (-x * x / 2.0).exp(), -10.0, 10.0);
        let expect = (2.0 * std::f64::consts::PI).sqrt();
        assert!((v - expect).abs() < 1e-11, "{v}");
    }

    #[test]
    fn sharp_peak() {
        // narrow Gaussian inside a wide interval exercises the adaptive split
        let s = 1e-3;
        let v = integrate(
            |x| (-(x - 0.3) * (x - 0.3) / (2.0 * s * s)).exp(),
            0.0,
            1.0,
            1e-10,
            1e-16,
        );
        let expect = (2.0 * std::f64::consts::PI).sqrt() * s;
        assert!((v - expect).abs() < 1e-12 * 1.0_f64.max(expect / 1e-3), "{v} vs {expect}");
    }
}
