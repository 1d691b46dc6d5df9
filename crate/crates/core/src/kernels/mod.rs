//! Model coefficients `c, h, ρ, a, σ, γ, b` and the branching mechanisms
//! built from them.

mod coefficient;
mod interaction;
mod levy;
mod model;

pub use coefficient::{CoefficientFn, Interp};
pub use interaction::{compute_rho, InteractionKernel};
pub use levy::{JumpRange, LevyAtom, LevyDensity, LevyKernel};
pub use model::{Atom, AtomicMeasure, Mode, ModelConfig, ModelSpec, Numerics};

use crate::error::{Error, Result};
use crate::real::Real;

/// Upper limit of a ξ-integral against γ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upper {
    /// `(0, l)`
    L,
    /// `[l, ∞)`
    Infinity,
}

impl From<Upper> for JumpRange {
    fn from(u: Upper) -> Self {
        match u {
            Upper::L => JumpRange::Small,
            Upper::Infinity => JumpRange::Tail,
        }
    }
}

/// `a(x) = c(x)² + ρ(0)`.
pub fn a_of<T: Real>(spec: &ModelSpec<T>, x: T) -> T {
    spec.a(x)
}

/// `∫ ξ^j e^{-uξ} γ(x, dξ)` over `(0, l)` or `[l, ∞)`.
pub fn levy_exp_moment<T: Real>(levy: &LevyKernel<T>, x: T, j: u32, u: T, upper: Upper, j_cap: u32) -> Result<T> {
    if j > j_cap {
        return Err(Error::Domain(format!("moment order {j} exceeds cap {j_cap}")));
    }
    if u < T::zero() {
        return Err(Error::Domain("exponential damping u must be nonnegative".into()));
    }
    levy.exp_moment(x, j, u, upper.into())
}

/// `b(x) = Σ_i ∫_l^∞ ξ γ(x_i, dξ)` for a particle configuration.
pub fn killing_rate_b<T: Real>(levy: &LevyKernel<T>, xs: &[T]) -> Result<T> {
    xs.iter().map(|&x| levy.tail_mean(x)).sum()
}

/// Small-jump mechanism `Ψ₁(x,z) = ½σ(x)z² + ∫_0^l (e^{-zξ} - 1 + zξ) γ(x,dξ)`.
pub fn psi_small<T: Real>(spec: &ModelSpec<T>, x: T, z: T) -> T {
    T::lit(0.5) * spec.sigma().eval(x) * z * z + spec.levy().compensated_integral(x, z, JumpRange::Small)
}

/// `∂_z Ψ₁(x, z) = σ(x) z + ∫_0^l ξ (1 - e^{-zξ}) γ(x, dξ)`.
pub fn psi_small_dz<T: Real>(spec: &ModelSpec<T>, x: T, z: T) -> T {
    spec.sigma().eval(x) * z + spec.levy().damped_first_moment(x, z, JumpRange::Small)
}

/// Full mechanism `Ψ(x,z) = ½σ(x)z² + ∫_0^∞ (e^{-zξ} - 1 + zξ) γ(x,dξ)`.
pub fn psi_full<T: Real>(spec: &ModelSpec<T>, x: T, z: T) -> Result<T> {
    check_z(z)?;
    Ok(T::lit(0.5) * spec.sigma().eval(x) * z * z + spec.levy().compensated_integral(x, z, JumpRange::All))
}

/// Killed mechanism `Ψ₀(x,z) = Ψ₁(x,z) + b(x) z`.
pub fn psi_killed<T: Real>(spec: &ModelSpec<T>, x: T, z: T) -> Result<T> {
    check_z(z)?;
    Ok(psi_small(spec, x, z) + spec.levy().tail_mean(x)? * z)
}

fn check_z<T: Real>(z: T) -> Result<()> {
    if z >= T::zero() {
        Ok(())
    } else {
        Err(Error::Domain(format!("branching mechanism needs z >= 0, got {z}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec_with(edit: impl FnOnce(&mut ModelConfig<f64>)) -> ModelSpec<f64> {
        let mut cfg = ModelConfig::baseline();
        edit(&mut cfg);
        ModelSpec::new(cfg).unwrap()
    }

    #[test]
    fn a_of_examples() {
        let s = spec_with(|_| {});
        assert_eq!(a_of(&s, 3.0), 1.0);
        let s = spec_with(|c| c.h = CoefficientFn::indicator(0.0, 1.0, 1.0));
        assert!((a_of(&s, -7.0) - 2.0).abs() < 1e-12);
        let s = spec_with(|c| {
            c.c = CoefficientFn::zero();
            c.h = CoefficientFn::gaussian(1.0, 0.0, 1.0);
        });
        assert!((a_of(&s, 0.4) - (std::f64::consts::PI / 2.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn killing_rate_examples() {
        let below = LevyKernel::empty(2.0).with_atom(0.5, CoefficientFn::constant(1.0));
        assert_eq!(killing_rate_b(&below, &[0.0, 1.0]).unwrap(), 0.0);
        let tail = LevyKernel::empty(2.0).with_atom(3.0, CoefficientFn::constant(1.0));
        assert_eq!(killing_rate_b(&tail, &[0.0, 5.0]).unwrap(), 6.0);
        // w(x) = x² clipped to [0, 1], tabulated on a fine grid
        let knots: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let values: Vec<f64> = knots.iter().map(|x| x * x).collect();
        let w = CoefficientFn::linear_table(knots, values);
        let clipped = LevyKernel::empty(2.0).with_atom(3.0, w);
        assert_eq!(killing_rate_b(&clipped, &[1.0]).unwrap(), 3.0);
    }

    #[test]
    fn exp_moment_cap_and_domain() {
        let k = LevyKernel::<f64>::empty(2.0);
        assert!(levy_exp_moment(&k, 0.0, 65, 0.0, Upper::L, 64).is_err());
        assert!(levy_exp_moment(&k, 0.0, 1, -1.0, Upper::L, 64).is_err());
        assert_eq!(levy_exp_moment(&k, 0.0, 3, 0.0, Upper::Infinity, 64).unwrap(), 0.0);
    }

    #[test]
    fn psi_examples() {
        let s = spec_with(|_| {});
        assert_eq!(psi_full(&s, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(psi_killed(&s, 0.0, 0.0).unwrap(), 0.0);
        let s = spec_with(|c| c.sigma = CoefficientFn::constant(1.0));
        assert_eq!(psi_full(&s, 0.0, 2.0).unwrap(), 2.0);
        assert_eq!(psi_killed(&s, 0.0, 2.0).unwrap(), 2.0);
        let s = spec_with(|c| c.levy = LevyKernel::empty(2.0).with_atom(1.0, CoefficientFn::constant(1.0)));
        let want = (-1.0f64).exp();
        assert!((psi_full(&s, 0.0, 1.0).unwrap() - want).abs() < 1e-15);
        assert!((psi_killed(&s, 0.0, 1.0).unwrap() - want).abs() < 1e-15);
        assert!(psi_full(&s, 0.0, -1.0).is_err());
    }

    #[test]
    fn validation_rejects_bad_models() {
        let mut cfg = ModelConfig::<f64>::baseline();
        cfg.levy.l = 1.0;
        cfg.sigma = CoefficientFn::linear_table(vec![0.0, 1.0], vec![-1.0, 1.0]);
        cfg.h = CoefficientFn::constant(1.0);
        let err = ModelSpec::new(cfg).unwrap_err();
        let Error::Validation(issues) = err else { panic!() };
        let fields: Vec<_> = issues.iter().map(|i| i.field.as_str()).collect();
        assert!(fields.contains(&"levy.l"));
        assert!(fields.contains(&"sigma"));
        assert!(fields.contains(&"h"));
    }

    #[test]
    fn uniform_ellipticity_check() {
        let mut cfg = ModelConfig::<f64>::baseline();
        cfg.uniformly_elliptic = true;
        cfg.c = CoefficientFn::gaussian(1.0, 0.0, 1.0);
        assert!(ModelSpec::new(cfg.clone()).is_err());
        cfg.c = CoefficientFn::constant(-0.5);
        assert!(ModelSpec::new(cfg).is_ok());
    }

    #[test]
    fn single_precision_model_evaluates() {
        let mut cfg = ModelConfig::<f32>::baseline();
        cfg.sigma = CoefficientFn::constant(1.0);
        let s = ModelSpec::new(cfg).unwrap();
        assert_eq!(psi_full(&s, 0.0f32, 2.0).unwrap(), 2.0f32);
    }

    fn mixed_spec() -> ModelSpec<f64> {
        spec_with(|c| {
            c.sigma = CoefficientFn::gaussian(0.7, 0.5, 1.0);
            c.levy = LevyKernel::empty(2.0)
                .with_atom(0.5, CoefficientFn::constant(1.0))
                .with_atom(1.5, CoefficientFn::gaussian(0.3, -1.0, 2.0))
                .with_atom(3.0, CoefficientFn::constant(0.4));
        })
    }

    proptest! {
        #[test]
        fn psi_is_convex_in_z(x in -3.0f64..3.0, z in 0.0f64..20.0) {
            let s = mixed_spec();
            let h = 1e-3;
            let f = |z: f64| psi_full(&s, x, z).unwrap();
            let second = (f(z + 2.0 * h) - 2.0 * f(z + h) + f(z)) / (h * h);
            prop_assert!(second >= -1e-5 * (1.0 + f(z).abs()));
        }

        #[test]
        fn psi_splits_into_small_and_tail(x in -3.0f64..3.0, z in 0.0f64..20.0) {
            let s = mixed_spec();
            let small = 0.5 * s.sigma().eval(x) * z * z + s.levy().compensated_integral(x, z, JumpRange::Small);
            let tail = s.levy().compensated_integral(x, z, JumpRange::Tail);
            let total = psi_full(&s, x, z).unwrap();
            prop_assert!((total - small - tail).abs() < 1e-10);
            // the tail part equals Σ w (e^{-zξ} - 1 + zξ) built from the moment primitives
            let by_moments = s.levy().exp_moment(x, 0, z, JumpRange::Tail).unwrap()
                - s.levy().exp_moment(x, 0, 0.0, JumpRange::Tail).unwrap()
                + z * s.levy().exp_moment(x, 1, 0.0, JumpRange::Tail).unwrap();
            prop_assert!((tail - by_moments).abs() < 1e-10);
            prop_assert!(psi_killed(&s, x, z).unwrap() >= small - 1e-12);
        }

        #[test]
        fn moments_decrease_for_small_atoms(x in -2.0f64..2.0, u in 0.0f64..5.0, du in 0.0f64..5.0, j in 0u32..10) {
            let k = LevyKernel::empty(2.0)
                .with_atom(0.4, CoefficientFn::constant(1.0))
                .with_atom(0.9, CoefficientFn::gaussian(2.0, 0.0, 1.0));
            let m = |j, u| k.exp_moment(x, j, u, JumpRange::Small).unwrap();
            prop_assert!(m(j, u + du) <= m(j, u) + 1e-15);
            prop_assert!(m(j + 1, u) <= m(j, u) + 1e-15);
        }
    }
}
