use crate::kernels::coefficient::{CoefficientFn, Interp};
use crate::quad;
use crate::real::{effective_tol, Real};

/// Number of grid intervals on `[0, R]` for tabulated ρ.
const RHO_GRID_INTERVALS: usize = 4096;

/// Computes `ρ(x) = ∫ h(y - x) h(y) dy`.
///
/// Gaussian bumps and piecewise-constant tables have closed forms; everything
/// else goes through adaptive quadrature split at the kinks of both factors.
pub fn compute_rho<T: Real>(h: &CoefficientFn<T>, x: T, tol: f64) -> T {
    if h.is_zero() {
        return T::zero();
    }
    match h {
        CoefficientFn::GaussianBump {
            amplitude, scale, ..
        } => {
            let half_pi = T::FRAC_PI_2();
            *amplitude * *amplitude * *scale * half_pi.sqrt() * (-(x * x) / (T::lit(2.0) * *scale * *scale)).exp()
        }
        CoefficientFn::PiecewiseTable {
            knots,
            values,
            interp: Interp::Step,
        } => step_autocorrelation(knots, values, x),
        _ => {
            let Some((lo, hi)) = h.support() else {
                return T::nan();
            };
            // h(y - x) lives on [lo + x, hi + x]
            let a = lo.max(lo + x);
            let b = hi.min(hi + x);
            if a >= b {
                return T::zero();
            }
            let mut breaks = h.breakpoints();
            breaks.extend(h.breakpoints().into_iter().map(|p| p + x));
            quad::integrate_with_breaks(|y| h.eval(y - x) * h.eval(y), a, b, &breaks, effective_tol(tol))
        }
    }
}

fn step_autocorrelation<T: Real>(knots: &[T], values: &[T], x: T) -> T {
    // piece i covers [knots[i-1], knots[i]) with value values[i], i = 1..knots.len()
    let mut acc = T::zero();
    for i in 1..knots.len() {
        let vi = values[i];
        if vi == T::zero() {
            continue;
        }
        for j in 1..knots.len() {
            let vj = values[j];
            if vj == T::zero() {
                continue;
            }
            let lo = knots[i - 1].max(knots[j - 1] + x);
            let hi = knots[i].min(knots[j] + x);
            if hi > lo {
                acc = acc + vi * vj * (hi - lo);
            }
        }
    }
    acc
}

#[derive(Debug, Clone)]
enum RhoEval<T: Real> {
    Zero,
    Closed,
    /// Values at `i · step` for `i = 0..=n`; ρ vanishes beyond `n · step`.
    Table { step: T, values: Vec<T> },
}

/// The interaction kernel `h` together with its autocorrelation ρ.
#[derive(Debug, Clone)]
pub struct InteractionKernel<T: Real> {
    h: CoefficientFn<T>,
    rho0: T,
    eval: RhoEval<T>,
}

impl<T: Real> InteractionKernel<T> {
    /// Builds the kernel. Callers must have checked that `h` is square-integrable.
    pub fn new(h: CoefficientFn<T>, tol: f64) -> Self {
        if h.is_zero() {
            return Self {
                h,
                rho0: T::zero(),
                eval: RhoEval::Zero,
            };
        }
        let rho0 = compute_rho(&h, T::zero(), tol);
        let closed = matches!(
            h,
            CoefficientFn::GaussianBump { .. }
                | CoefficientFn::PiecewiseTable {
                    interp: Interp::Step,
                    ..
                }
        );
        let eval = if closed {
            RhoEval::Closed
        } else {
            let (lo, hi) = h.support().expect("square-integrable table or bump has compact support");
            let span = hi - lo;
            let step = span / T::lit(RHO_GRID_INTERVALS as f64);
            let mut values: Vec<T> = (0..=RHO_GRID_INTERVALS)
                .map(|i| compute_rho(&h, step * T::lit(i as f64), tol))
                .collect();
            values[0] = rho0;
            RhoEval::Table { step, values }
        };
        Self { h, rho0, eval }
    }

    pub fn h(&self) -> &CoefficientFn<T> {
        &self.h
    }

    /// `ρ(0) = ∫ h²`.
    pub fn rho0(&self) -> T {
        self.rho0
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.eval, RhoEval::Zero)
    }

    /// Distance beyond which ρ vanishes identically, if any.
    pub fn range(&self) -> Option<T> {
        match &self.eval {
            RhoEval::Zero => Some(T::zero()),
            RhoEval::Table { step, values } => Some(*step * T::lit((values.len() - 1) as f64)),
            RhoEval::Closed => self.h.support().map(|(lo, hi)| hi - lo),
        }
    }

    /// Grid spacing of the ρ table, when tabulated.
    pub fn grid_step(&self) -> Option<T> {
        match &self.eval {
            RhoEval::Table { step, .. } => Some(*step),
            _ => None,
        }
    }

    pub fn rho(&self, x: T) -> T {
        let x = x.abs();
        match &self.eval {
            RhoEval::Zero => T::zero(),
            RhoEval::Closed => {
                if x == T::zero() {
                    self.rho0
                } else {
                    compute_rho(&self.h, x, 1e-10)
                }
            }
            RhoEval::Table { step, values } => interpolate(values, *step, x),
        }
    }
}

/// Four-point cubic Lagrange interpolation on a uniform grid starting at 0,
/// mirrored at the origin and zero past the end.
fn interpolate<T: Real>(values: &[T], step: T, x: T) -> T {
    let n = values.len() - 1;
    let pos = x / step;
    if pos >= T::lit(n as f64) {
        return T::zero();
    }
    let i = pos.floor().to_usize().unwrap_or(0).min(n - 1);
    let t = pos - T::lit(i as f64);
    let at = |k: isize| -> T {
        let idx = (i as isize + k).unsigned_abs();
        if idx > n {
            T::zero()
        } else {
            values[idx]
        }
    };
    let (ym1, y0, y1, y2) = (at(-1), at(0), at(1), at(2));
    let one = T::one();
    let two = T::lit(2.0);
    let six = T::lit(6.0);
    -t * (t - one) * (t - two) / six * ym1 + (t + one) * (t - one) * (t - two) / two * y0
        - (t + one) * t * (t - two) / two * y1
        + (t + one) * t * (t - one) / six * y2
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_kernel() {
        let k = InteractionKernel::new(CoefficientFn::<f64>::zero(), 1e-10);
        assert_eq!(k.rho(3.0), 0.0);
        assert_eq!(k.rho0(), 0.0);
    }

    #[test]
    fn indicator_has_triangular_profile() {
        // quadrature oracle on the convolution, independent of the closed form
        let h = CoefficientFn::indicator(0.0, 1.0, 1.0);
        for (x, want) in [(0.0, 1.0), (0.5, 0.5), (1.0, 0.0), (-0.25, 0.75)] {
            let oracle: f64 = quad::integrate_with_breaks(
                |y| h.eval(y - x) * h.eval(y),
                -2.0,
                3.0,
                &[0.0, 1.0, x, 1.0 + x],
                1e-12,
            );
            assert!((oracle - want).abs() < 1e-10);
            assert!((compute_rho(&h, x, 1e-10) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_rho_at_zero() {
        let h = CoefficientFn::gaussian(1.0, 0.0, 1.0);
        let want = (std::f64::consts::PI / 2.0).sqrt();
        let oracle: f64 = quad::integrate(|y: f64| (-2.0 * y * y).exp(), -20.0, 20.0, 1e-13);
        assert!((oracle - want).abs() < 1e-11);
        assert!((compute_rho(&h, 0.0, 1e-10) - want).abs() < 1e-14);
        let shifted = CoefficientFn::gaussian(1.0, 3.0, 1.0);
        assert!((compute_rho(&shifted, 0.7, 1e-10) - compute_rho(&h, 0.7, 1e-10)).abs() < 1e-14);
    }

    #[test]
    fn tabulated_rho_matches_direct_quadrature() {
        let h = CoefficientFn::CompactlySupportedSmooth {
            amplitude: 1.0f64,
            center: 0.0,
            radius: 1.0,
        };
        let k = InteractionKernel::new(h.clone(), 1e-10);
        assert!(k.grid_step().is_some());
        for x in [0.0, 0.1234, 0.77, 1.5, 1.99] {
            let direct = compute_rho(&h, x, 1e-12);
            assert!((k.rho(x) - direct).abs() < 1e-9, "x={x}");
        }
        assert_eq!(k.rho(2.5), 0.0);
    }

    #[test]
    fn linear_table_rho_is_exact_by_gauss_legendre() {
        // hat function on [-1,1]: ρ(0) = 2/3
        let h = CoefficientFn::linear_table(vec![-1.0f64, 0.0, 1.0], vec![0.0, 1.0, 0.0]);
        assert!((compute_rho(&h, 0.0, 1e-10) - 2.0 / 3.0).abs() < 1e-13);
    }

    proptest! {
        #[test]
        fn rho_symmetric_and_bounded(x in -6.0f64..6.0, which in 0usize..3) {
            let h = match which {
                0 => CoefficientFn::gaussian(1.3, 0.4, 0.8),
                1 => CoefficientFn::indicator(-0.5, 1.0, 2.0),
                _ => CoefficientFn::CompactlySupportedSmooth { amplitude: 1.0, center: 0.2, radius: 1.5 },
            };
            let k = InteractionKernel::new(h, 1e-10);
            prop_assert!((k.rho(x) - k.rho(-x)).abs() < 1e-9);
            prop_assert!(k.rho(x).abs() <= k.rho0() + 1e-9);
        }
    }
}
