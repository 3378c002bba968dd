//! Reference values for testing the accountant.
//!
//! Everything here is computed by direct numerical integration of the
//! Rényi moment of the sampled Gaussian mixture, with no binomial expansion
//! and no code shared with the main crate. Slow and simple on purpose.

use std::f64::consts::PI;

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// ln N(x; 0, z^2)
fn log_normal0(x: f64, z: f64) -> f64 {
    -x * x / (2.0 * z * z) - (z * (2.0 * PI).sqrt()).ln()
}

/// ln(mu(x) / mu0(x)) where mu = (1-q) N(0,z^2) + q N(1,z^2).
fn log_ratio(x: f64, q: f64, z: f64) -> f64 {
    let t = (2.0 * x - 1.0) / (2.0 * z * z);
    log_add_exp((1.0 - q).ln(), q.ln() + t)
}

/// Which Rényi moment to integrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// E_{x~mu0}[(mu/mu0)^order]
    Forward,
    /// E_{x~mu}[(mu0/mu)^order]
    Reverse,
}

fn log_integrand(x: f64, q: f64, z: f64, order: f64, dir: Direction) -> f64 {
    let lr = log_ratio(x, q, z);
    match dir {
        Direction::Forward => log_normal0(x, z) + order * lr,
        // mu0^order * mu^(1-order) = mu0 * (mu/mu0)^(1-order)
        Direction::Reverse => log_normal0(x, z) + (1.0 - order) * lr,
    }
}

fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
    h / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive_simpson<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    noise: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(fa, flm, fm, m - a);
    let right = simpson(fm, frm, fb, b - m);
    let diff = left + right - whole;
    if depth == 0 || diff.abs() <= 15.0 * tol || diff.abs() <= noise * whole.abs() {
        return left + right + diff / 15.0;
    }
    adaptive_simpson(f, a, m, fa, flm, fm, left, tol / 2.0, noise, depth - 1)
        + adaptive_simpson(f, m, b, fm, frm, fb, right, tol / 2.0, noise, depth - 1)
}

/// Natural log of the Rényi moment, by adaptive Simpson integration over
/// panels of width z/4 spanning every mixture component by 40 standard
/// deviations. The error target is 1e-12 of a coarse first estimate of the
/// integral, spread over the range by width. Where the log-integrand is
/// large its exponential carries relative noise of about |log| ulps, so
/// subdivision also stops once the Simpson difference is below that.
pub fn log_moment(q: f64, z: f64, order: f64, dir: Direction) -> f64 {
    assert!((0.0..=1.0).contains(&q) && z > 0.0 && order > 1.0);
    let lo = -40.0 * z - 1.0;
    let hi = order.max(1.0) + 40.0 * z + 1.0;
    let panel = z / 4.0;
    let panels = ((hi - lo) / panel).ceil() as usize;

    let mut shift = f64::NEG_INFINITY;
    let mut magnitude: f64 = 1.0;
    let scan = panels * 8;
    for i in 0..=scan {
        let x = lo + (hi - lo) * i as f64 / scan as f64;
        let l = log_integrand(x, q, z, order, dir);
        shift = shift.max(l);
        magnitude = magnitude.max(l.abs());
    }
    let noise = 64.0 * f64::EPSILON * magnitude;
    let f = |x: f64| (log_integrand(x, q, z, order, dir) - shift).exp();

    let coarse: f64 = (0..panels)
        .map(|p| {
            let a = lo + p as f64 * panel;
            simpson(f(a), f(a + 0.5 * panel), f(a + panel), panel)
        })
        .sum();
    let tol = 1e-12 * coarse * panel / (hi - lo);
    let mut total = 0.0;
    for p in 0..panels {
        let a = lo + p as f64 * panel;
        let b = a + panel;
        let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
        let whole = simpson(fa, fm, fb, b - a);
        total += adaptive_simpson(&f, a, b, fa, fm, fb, whole, tol, noise, 40);
    }
    shift + total.ln()
}

/// Per-step RDP at `order` from the forward moment.
pub fn rdp(q: f64, z: f64, order: f64) -> f64 {
    log_moment(q, z, order, Direction::Forward) / (order - 1.0)
}

/// RDP of the reverse direction (used to check the forward one dominates).
pub fn rdp_reverse(q: f64, z: f64, order: f64) -> f64 {
    log_moment(q, z, order, Direction::Reverse) / (order - 1.0)
}

/// Full accountant: `steps` identical sampled Gaussian steps, converted to
/// epsilon at `delta` by minimizing over `orders`.
pub fn epsilon(q: f64, z: f64, steps: u64, delta: f64, orders: &[f64]) -> f64 {
    orders
        .iter()
        .map(|&o| steps as f64 * rdp(q, z, o) + (1.0 / delta).ln() / (o - 1.0))
        .fold(f64::INFINITY, f64::min)
}

/// The order grid used by default in the main crate, restated independently.
pub fn default_orders() -> Vec<f64> {
    let mut v: Vec<f64> = (2..=64).map(|i| i as f64).collect();
    v.extend([80.0, 96.0, 128.0, 256.0, 512.0]);
    v
}

/// Continuous minimum over order of `order/(2 z^2) + ln(1/delta)/(order-1)`
/// for the unsubsampled Gaussian, found by calculus.
pub fn gaussian_epsilon_continuous(z: f64, delta: f64) -> (f64, f64) {
    let l = (1.0 / delta).ln();
    // d/dλ: 1/(2z²) - l/(λ-1)² = 0
    let order = 1.0 + z * (2.0 * l).sqrt();
    let eps = order / (2.0 * z * z) + l / (order - 1.0);
    (order, eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unsubsampled_matches_closed_form() {
        for &z in &[0.5, 1.0, 2.0] {
            for &o in &[2.0, 5.0, 17.5] {
                let got = rdp(1.0, z, o);
                let want = o / (2.0 * z * z);
                assert!((got - want).abs() / want < 1e-9, "z={z} o={o} {got} {want}");
            }
        }
    }

    #[test]
    fn zero_rate_is_zero() {
        assert!(rdp(0.0, 1.0, 3.0).abs() < 1e-12);
    }

    #[test]
    fn second_order_small_rate_closed_form() {
        // For order 2 the moment is 1 + q^2 (e^{1/z^2} - 1).
        let (q, z) = (0.01f64, 2.0f64);
        let want = (q * q * ((1.0 / (z * z)).exp() - 1.0)).ln_1p();
        let got = rdp(q, z, 2.0);
        assert!((got - want).abs() / want < 1e-9, "{got} {want}");
    }
}
