//! Gauss–Legendre rules and adaptive bisection quadrature.

use std::sync::OnceLock;

use crate::real::Real;

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let pn = if n == 0 { 1.0 } else { p1 };
    let d = n as f64 * (x * pn - p0) / (x * x - 1.0);
    (pn, d)
}

fn gl10() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(10))
}

/// Fixed-order rule applied on `[a, b]`.
pub fn fixed<T: Real, F: FnMut(T) -> T>(mut f: F, a: T, b: T, rule: &(Vec<f64>, Vec<f64>)) -> T {
    let half = (b - a) / T::lit(2.0);
    let mid = (a + b) / T::lit(2.0);
    let mut acc = T::zero();
    for (x, w) in rule.0.iter().zip(&rule.1) {
        acc = acc + T::lit(*w) * f(mid + half * T::lit(*x));
    }
    acc * half
}

const MAX_DEPTH: u32 = 48;

/// Adaptive bisection with a 10-point Gauss–Legendre rule, to absolute tolerance `tol`.
pub fn integrate<T: Real, F: FnMut(T) -> T>(mut f: F, a: T, b: T, tol: T) -> T {
    if a == b {
        return T::zero();
    }
    let rule = gl10();
    let whole = fixed(&mut f, a, b, rule);
    refine(&mut f, a, b, whole, tol, 0, rule)
}

fn refine<T: Real, F: FnMut(T) -> T>(
    f: &mut F,
    a: T,
    b: T,
    whole: T,
    tol: T,
    depth: u32,
    rule: &(Vec<f64>, Vec<f64>),
) -> T {
    let mid = (a + b) / T::lit(2.0);
    let left = fixed(&mut *f, a, mid, rule);
    let right = fixed(&mut *f, mid, b, rule);
    let split = left + right;
    if (split - whole).abs() <= tol || depth >= MAX_DEPTH || mid == a || mid == b {
        return split;
    }
    let half_tol = tol / T::lit(2.0);
    refine(f, a, mid, left, half_tol, depth + 1, rule)
        + refine(f, mid, b, right, half_tol, depth + 1, rule)
}

/// Integrates over `[a, b]` split at the given interior breakpoints.
pub fn integrate_with_breaks<T: Real, F: FnMut(T) -> T>(
    mut f: F,
    a: T,
    b: T,
    breaks: &[T],
    tol: T,
) -> T {
    let mut pts: Vec<T> = breaks.iter().copied().filter(|&p| p > a && p < b).collect();
    pts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    pts.dedup();
    let n = pts.len() + 1;
    let piece_tol = tol / T::lit(n as f64);
    let mut lo = a;
    let mut acc = T::zero();
    for hi in pts.into_iter().chain(std::iter::once(b)) {
        acc = acc + integrate(&mut f, lo, hi, piece_tol);
        lo = hi;
    }
    acc
}

/// Integrates over `[a, ∞)` via the map `ξ = a + t / (1 - t)`.
pub fn integrate_to_infinity<T: Real, F: FnMut(T) -> T>(mut f: F, a: T, tol: T) -> T {
    let one = T::one();
    integrate(
        |t: T| {
            let s = one - t;
            let x = a + t / s;
            let v = f(x) / (s * s);
            if v.is_finite() {
                v
            } else {
                T::zero()
            }
        },
        T::zero(),
        one,
        tol,
    )
}

/// `E f(mean + sd·Z)` for standard normal `Z`: composite 10-point rule on
/// 48 panels over `mean ± 10 sd`. Exact up to ~1e-13 for smooth `f`.
pub fn gaussian_expectation<T: Real, F: FnMut(T) -> T>(mut f: F, mean: T, sd: T) -> T {
    if sd <= T::zero() {
        return f(mean);
    }
    const PANELS: usize = 48;
    let rule = gl10();
    let width = T::lit(20.0 / PANELS as f64);
    let norm = T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let mut acc = T::zero();
    for p in 0..PANELS {
        let lo = T::lit(-10.0) + width * T::lit(p as f64);
        acc = acc + fixed(|z: T| norm * (-z * z / T::lit(2.0)).exp() * f(mean + sd * z), lo, lo + width, rule);
    }
    acc
}
