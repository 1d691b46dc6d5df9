use serde::{Deserialize, Serialize};

use crate::error::ValidationIssue;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Interp {
    /// Piecewise constant; `values` has one more entry than `knots`.
    Step,
    /// Piecewise linear, constant beyond the end knots; `values` matches `knots`.
    #[default]
    Linear,
}

/// A bounded coefficient on the real line with finite limits at ±∞.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
#[serde(bound(deserialize = "T: Real + serde::de::DeserializeOwned"))]
pub enum CoefficientFn<T: Real> {
    Constant {
        value: T,
    },
    /// `amplitude · exp(-((x - center) / scale)^2)`
    GaussianBump {
        amplitude: T,
        center: T,
        scale: T,
    },
    /// Step: `f(x) = values[i]` where `i` counts the knots `<= x`.
    PiecewiseTable {
        knots: Vec<T>,
        values: Vec<T>,
        #[serde(default)]
        interp: Interp,
    },
    /// `amplitude · exp(1 - 1 / (1 - r^2))` for `r = |x - center| / radius < 1`, zero outside.
    CompactlySupportedSmooth {
        amplitude: T,
        center: T,
        radius: T,
    },
}

impl<T: Real> Default for CoefficientFn<T> {
    fn default() -> Self {
        Self::zero()
    }
}

impl<T: Real> CoefficientFn<T> {
    pub fn zero() -> Self {
        Self::Constant { value: T::zero() }
    }

    pub fn constant(value: T) -> Self {
        Self::Constant { value }
    }

    pub fn gaussian(amplitude: T, center: T, scale: T) -> Self {
        Self::GaussianBump {
            amplitude,
            center,
            scale,
        }
    }

    /// Indicator of `[lo, hi)` scaled by `height`.
    pub fn indicator(lo: T, hi: T, height: T) -> Self {
        Self::PiecewiseTable {
            knots: vec![lo, hi],
            values: vec![T::zero(), height, T::zero()],
            interp: Interp::Step,
        }
    }

    pub fn linear_table(knots: Vec<T>, values: Vec<T>) -> Self {
        Self::PiecewiseTable {
            knots,
            values,
            interp: Interp::Linear,
        }
    }

    pub fn eval(&self, x: T) -> T {
        match self {
            Self::Constant { value } => *value,
            Self::GaussianBump {
                amplitude,
                center,
                scale,
            } => {
                let r = (x - *center) / *scale;
                *amplitude * (-r * r).exp()
            }
            Self::PiecewiseTable {
                knots,
                values,
                interp,
            } => {
                let i = knots.partition_point(|&k| k <= x);
                match interp {
                    Interp::Step => values[i],
                    Interp::Linear => {
                        if i == 0 {
                            values[0]
                        } else if i == knots.len() {
                            values[knots.len() - 1]
                        } else {
                            let (x0, x1) = (knots[i - 1], knots[i]);
                            let (y0, y1) = (values[i - 1], values[i]);
                            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
                        }
                    }
                }
            }
            Self::CompactlySupportedSmooth {
                amplitude,
                center,
                radius,
            } => {
                let r = (x - *center) / *radius;
                let r2 = r * r;
                if r2 >= T::one() {
                    T::zero()
                } else {
                    *amplitude * (T::one() - T::one() / (T::one() - r2)).exp()
                }
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Self::Constant { value } => *value == T::zero(),
            Self::GaussianBump { amplitude, .. } | Self::CompactlySupportedSmooth { amplitude, .. } => {
                *amplitude == T::zero()
            }
            Self::PiecewiseTable { values, .. } => values.iter().all(|v| *v == T::zero()),
        }
    }

    /// True when the function does not depend on `x`.
    pub fn is_constant(&self) -> bool {
        match self {
            Self::Constant { .. } => true,
            Self::PiecewiseTable { values, .. } => values.windows(2).all(|w| w[0] == w[1]),
            _ => self.is_zero(),
        }
    }

    /// Limits at `-∞` and `+∞`.
    pub fn limits(&self) -> (T, T) {
        match self {
            Self::Constant { value } => (*value, *value),
            Self::GaussianBump { .. } | Self::CompactlySupportedSmooth { .. } => (T::zero(), T::zero()),
            Self::PiecewiseTable { values, .. } => (values[0], values[values.len() - 1]),
        }
    }

    /// Exact lower and upper bounds of the function over the real line.
    pub fn bounds(&self) -> (T, T) {
        match self {
            Self::Constant { value } => (*value, *value),
            Self::GaussianBump { amplitude, .. } | Self::CompactlySupportedSmooth { amplitude, .. } => {
                (amplitude.min(T::zero()), amplitude.max(T::zero()))
            }
            Self::PiecewiseTable { values, .. } => values.iter().fold(
                (T::infinity(), T::neg_infinity()),
                |(lo, hi), &v| (lo.min(v), hi.max(v)),
            ),
        }
    }

    /// `sup |f|`.
    pub fn sup_norm(&self) -> T {
        let (lo, hi) = self.bounds();
        lo.abs().max(hi.abs())
    }

    /// Smallest closed interval outside which the function vanishes, if bounded.
    pub fn support(&self) -> Option<(T, T)> {
        match self {
            Self::Constant { value } if *value == T::zero() => Some((T::zero(), T::zero())),
            Self::Constant { .. } | Self::GaussianBump { .. } => None,
            Self::CompactlySupportedSmooth { center, radius, .. } => {
                Some((*center - *radius, *center + *radius))
            }
            Self::PiecewiseTable { knots, .. } => {
                let (l, r) = self.limits();
                if l == T::zero() && r == T::zero() {
                    Some((knots[0], knots[knots.len() - 1]))
                } else {
                    None
                }
            }
        }
    }

    /// Points where the function or its derivative may jump.
    pub fn breakpoints(&self) -> Vec<T> {
        match self {
            Self::PiecewiseTable { knots, .. } => knots.clone(),
            Self::CompactlySupportedSmooth { center, radius, .. } => {
                vec![*center - *radius, *center, *center + *radius]
            }
            Self::GaussianBump { center, .. } => vec![*center],
            Self::Constant { .. } => Vec::new(),
        }
    }

    /// Characteristic width used to size evaluation grids.
    pub fn length_scale(&self) -> T {
        match self {
            Self::Constant { .. } => T::one(),
            Self::GaussianBump { scale, .. } => scale.abs(),
            Self::CompactlySupportedSmooth { radius, .. } => radius.abs(),
            Self::PiecewiseTable { knots, .. } => {
                let span = knots[knots.len() - 1] - knots[0];
                if span > T::zero() {
                    span
                } else {
                    T::one()
                }
            }
        }
    }

    pub fn square_integrable(&self) -> bool {
        match self {
            Self::Constant { value } => *value == T::zero(),
            Self::GaussianBump { .. } | Self::CompactlySupportedSmooth { .. } => true,
            Self::PiecewiseTable { .. } => {
                let (l, r) = self.limits();
                l == T::zero() && r == T::zero()
            }
        }
    }

    pub fn validate(&self, field: &str) -> Vec<ValidationIssue> {
        let mut issues = Vec::new();
        let finite = |v: &T| v.is_finite();
        match self {
            Self::Constant { value } => {
                if !finite(value) {
                    issues.push(ValidationIssue::new(field, "constant value must be finite"));
                }
            }
            Self::GaussianBump {
                amplitude,
                center,
                scale,
            } => {
                if ![amplitude, center, scale].into_iter().all(finite) {
                    issues.push(ValidationIssue::new(field, "parameters must be finite"));
                }
                if !(*scale > T::zero()) {
                    issues.push(ValidationIssue::new(field, "scale must be positive"));
                }
            }
            Self::CompactlySupportedSmooth {
                amplitude,
                center,
                radius,
            } => {
                if ![amplitude, center, radius].into_iter().all(finite) {
                    issues.push(ValidationIssue::new(field, "parameters must be finite"));
                }
                if !(*radius > T::zero()) {
                    issues.push(ValidationIssue::new(field, "radius must be positive"));
                }
            }
            Self::PiecewiseTable {
                knots,
                values,
                interp,
            } => {
                if knots.is_empty() {
                    issues.push(ValidationIssue::new(field, "table needs at least one knot"));
                }
                let expected = match interp {
                    Interp::Step => knots.len() + 1,
                    Interp::Linear => knots.len(),
                };
                if values.len() != expected {
                    issues.push(ValidationIssue::new(
                        field,
                        format!("expected {expected} values for {} knots, got {}", knots.len(), values.len()),
                    ));
                }
                if !knots.windows(2).all(|w| w[0] < w[1]) {
                    issues.push(ValidationIssue::new(field, "knots must be strictly increasing"));
                }
                if !knots.iter().chain(values.iter()).all(finite) {
                    issues.push(ValidationIssue::new(field, "table entries must be finite"));
                }
            }
        }
        issues
    }

    pub fn cast<U: Real>(&self) -> CoefficientFn<U> {
        let c = |v: &T| U::lit(v.f64());
        match self {
            Self::Constant { value } => CoefficientFn::Constant { value: c(value) },
            Self::GaussianBump {
                amplitude,
                center,
                scale,
            } => CoefficientFn::GaussianBump {
                amplitude: c(amplitude),
                center: c(center),
                scale: c(scale),
            },
            Self::PiecewiseTable {
                knots,
                values,
                interp,
            } => CoefficientFn::PiecewiseTable {
                knots: knots.iter().map(c).collect(),
                values: values.iter().map(c).collect(),
                interp: *interp,
            },
            Self::CompactlySupportedSmooth {
                amplitude,
                center,
                radius,
            } => CoefficientFn::CompactlySupportedSmooth {
                amplitude: c(amplitude),
                center: c(center),
                radius: c(radius),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indicator_is_half_open() {
        let h = CoefficientFn::indicator(0.0, 1.0, 1.0);
        assert_eq!(h.eval(-1e-9), 0.0);
        assert_eq!(h.eval(0.0), 1.0);
        assert_eq!(h.eval(0.999), 1.0);
        assert_eq!(h.eval(1.0), 0.0);
        assert_eq!(h.support(), Some((0.0, 1.0)));
        assert!(h.square_integrable());
    }

    #[test]
    fn linear_table_interpolates_and_extends() {
        let f = CoefficientFn::linear_table(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 3.0]);
        assert_eq!(f.eval(-5.0), 0.0);
        assert_eq!(f.eval(0.5), 0.5);
        assert_eq!(f.eval(1.5), 2.0);
        assert_eq!(f.eval(9.0), 3.0);
        assert_eq!(f.limits(), (0.0, 3.0));
        assert!(!f.square_integrable());
        assert_eq!(f.bounds(), (0.0, 3.0));
    }

    #[test]
    fn smooth_bump_vanishes_outside_radius() {
        let f = CoefficientFn::CompactlySupportedSmooth {
            amplitude: 2.0,
            center: 1.0,
            radius: 0.5,
        };
        assert_eq!(f.eval(1.0), 2.0);
        assert_eq!(f.eval(1.5), 0.0);
        assert_eq!(f.eval(0.4), 0.0);
        assert!(f.eval(1.2) > 0.0 && f.eval(1.2) < 2.0);
    }

    #[test]
    fn validation_flags_bad_tables() {
        let f = CoefficientFn::PiecewiseTable {
            knots: vec![1.0, 0.0],
            values: vec![0.0],
            interp: Interp::Step,
        };
        let issues = f.validate("sigma");
        assert_eq!(issues.len(), 2);
    }

    #[test]
    fn toml_round_trip() {
        let f: CoefficientFn<f64> =
            toml::from_str("kind = \"gaussian-bump\"\namplitude = 1.0\ncenter = 0.0\nscale = 2.0\n").unwrap();
        assert_eq!(f, CoefficientFn::gaussian(1.0, 0.0, 2.0));
    }
}
