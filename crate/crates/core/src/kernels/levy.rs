use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationIssue};
use crate::kernels::coefficient::CoefficientFn;
use crate::quad;
use crate::real::{effective_tol, Real};

/// Which part of `(0, ∞)` an integral against γ runs over. The threshold
/// convention is `(0, l)` for small jumps and `[l, ∞)` for the tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JumpRange {
    Small,
    Tail,
    All,
}

/// A point mass of size `size` carrying weight `w(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real + serde::de::DeserializeOwned"))]
pub struct LevyAtom<T: Real> {
    pub size: T,
    pub weight: CoefficientFn<T>,
}

/// Tempered-stable density `w(x) ξ^{-1-α} e^{-rate ξ}` on `(0, ∞)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real + serde::de::DeserializeOwned"))]
pub struct LevyDensity<T: Real> {
    pub weight: CoefficientFn<T>,
    pub alpha: T,
    #[serde(default)]
    pub rate: T,
}

/// Jump kernel `γ(x, dξ)`: a finite mixture of atoms plus an optional density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real + serde::de::DeserializeOwned"))]
pub struct LevyKernel<T: Real> {
    pub l: T,
    #[serde(default)]
    pub atoms: Vec<LevyAtom<T>>,
    #[serde(default)]
    pub density: Option<LevyDensity<T>>,
    #[serde(skip, default = "default_tol")]
    pub tol: f64,
}

fn default_tol() -> f64 {
    1e-10
}

fn in_range<T: Real>(xi: T, l: T, range: JumpRange) -> bool {
    match range {
        JumpRange::Small => xi < l,
        JumpRange::Tail => xi >= l,
        JumpRange::All => true,
    }
}

/// `(e^{-y} - 1 + y) / y²`, accurate near zero.
fn compensated_ratio<T: Real>(y: T) -> T {
    if y.abs() < T::lit(1e-3) {
        T::lit(0.5) - y / T::lit(6.0) + y * y / T::lit(24.0) - y * y * y / T::lit(120.0)
    } else {
        ((-y).exp_m1() + y) / (y * y)
    }
}

/// `(1 - e^{-y}) / y`, accurate near zero.
fn one_minus_exp_ratio<T: Real>(y: T) -> T {
    if y.abs() < T::lit(1e-8) {
        T::one() - y / T::lit(2.0)
    } else {
        -(-y).exp_m1() / y
    }
}

fn ln_factorial<T: Real>(j: u32) -> T {
    (2..=j).map(|i| T::lit(i as f64).ln()).sum()
}

impl<T: Real> LevyKernel<T> {
    pub fn empty(l: T) -> Self {
        Self {
            l,
            atoms: Vec::new(),
            density: None,
            tol: default_tol(),
        }
    }

    pub fn with_atom(mut self, size: T, weight: CoefficientFn<T>) -> Self {
        self.atoms.push(LevyAtom { size, weight });
        self
    }

    pub fn with_density(mut self, density: LevyDensity<T>) -> Self {
        self.density = Some(density);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.iter().all(|a| a.weight.is_zero())
            && self.density.as_ref().is_none_or(|d| d.weight.is_zero())
    }

    /// True when no part of γ charges the requested range.
    pub fn vanishes_on(&self, range: JumpRange) -> bool {
        let atoms = self
            .atoms
            .iter()
            .filter(|a| in_range(a.size, self.l, range))
            .all(|a| a.weight.is_zero());
        atoms && self.density.as_ref().is_none_or(|d| d.weight.is_zero())
    }

    /// True when every weight function is constant in `x`.
    pub fn is_homogeneous(&self) -> bool {
        self.atoms.iter().all(|a| a.weight.is_constant())
            && self.density.as_ref().is_none_or(|d| d.weight.is_constant())
    }

    pub fn weight_functions(&self) -> impl Iterator<Item = &CoefficientFn<T>> {
        self.atoms
            .iter()
            .map(|a| &a.weight)
            .chain(self.density.iter().map(|d| &d.weight))
    }

    pub fn validate(&self) -> Vec<ValidationIssue> {
        let mut issues = Vec::new();
        if !(self.l > T::one()) {
            issues.push(ValidationIssue::new("levy.l", "threshold l must exceed 1"));
        }
        for (i, atom) in self.atoms.iter().enumerate() {
            let field = format!("levy.atoms[{i}]");
            if !(atom.size > T::zero()) || !atom.size.is_finite() {
                issues.push(ValidationIssue::new(&field, "atom size must be positive and finite"));
            }
            issues.extend(atom.weight.validate(&format!("{field}.weight")));
            if atom.weight.bounds().0 < T::zero() {
                issues.push(ValidationIssue::new(&field, "atom weight must be nonnegative"));
            }
        }
        if let Some(d) = &self.density {
            issues.extend(d.weight.validate("levy.density.weight"));
            if d.weight.bounds().0 < T::zero() {
                issues.push(ValidationIssue::new("levy.density", "density weight must be nonnegative"));
            }
            if !(d.alpha < T::lit(2.0)) {
                issues.push(ValidationIssue::new(
                    "levy.density.alpha",
                    "alpha must be below 2 for ∫ ξ∧ξ² γ to be finite",
                ));
            }
            if d.rate < T::zero() {
                issues.push(ValidationIssue::new("levy.density.rate", "rate must be nonnegative"));
            }
            if d.rate == T::zero() && !(d.alpha > T::one()) {
                issues.push(ValidationIssue::new(
                    "levy.density",
                    "untempered density needs alpha > 1 for a finite first tail moment",
                ));
            }
        }
        issues
    }

    /// `∫ ξ^j e^{-uξ} γ(x, dξ)` over `range`.
    pub fn exp_moment(&self, x: T, j: u32, u: T, range: JumpRange) -> Result<T> {
        let jt = T::lit(j as f64);
        let mut acc = T::zero();
        for atom in &self.atoms {
            if in_range(atom.size, self.l, range) {
                let w = atom.weight.eval(x);
                if w != T::zero() {
                    acc = acc + w * atom.size.powi(j as i32) * (-u * atom.size).exp();
                }
            }
        }
        if let Some(d) = &self.density {
            let w = d.weight.eval(x);
            if w != T::zero() {
                let power = jt - T::one() - d.alpha;
                let beta = d.rate + u;
                if matches!(range, JumpRange::Small | JumpRange::All) && !(power > -T::one()) {
                    return Err(Error::Config(format!(
                        "∫_0^l ξ^{j} γ(x,dξ) diverges at the origin for alpha = {}",
                        d.alpha
                    )));
                }
                if matches!(range, JumpRange::Tail | JumpRange::All) && beta == T::zero() && !(power < -T::one()) {
                    return Err(Error::Config(format!(
                        "∫_l^∞ ξ^{j} γ(x,dξ) diverges for alpha = {} without tempering",
                        d.alpha
                    )));
                }
                acc = acc + w * self.density_integral(d, range, power, beta, T::zero(), |_| T::one());
            }
        }
        Ok(acc)
    }

    /// `∫ ξ (1 - e^{-kξ}) γ(x, dξ)` over `range`.
    pub fn damped_first_moment(&self, x: T, k: T, range: JumpRange) -> T {
        let mut acc = T::zero();
        for atom in &self.atoms {
            if in_range(atom.size, self.l, range) {
                let w = atom.weight.eval(x);
                acc = acc + w * atom.size * (-(-k * atom.size).exp_m1());
            }
        }
        if let Some(d) = &self.density {
            let w = d.weight.eval(x);
            if w != T::zero() {
                // ξ(1-e^{-kξ}) ξ^{-1-α} = [(1-e^{-kξ})/ξ] k ... factor one ξ back in
                let power = T::one() - d.alpha;
                acc = acc
                    + w * k * self.density_integral(d, range, power, d.rate, T::zero(), |xi| {
                        one_minus_exp_ratio(k * xi)
                    });
            }
        }
        acc
    }

    /// `∫ (e^{-zξ} - 1 + zξ) γ(x, dξ)` over `range`.
    pub fn compensated_integral(&self, x: T, z: T, range: JumpRange) -> T {
        if z == T::zero() {
            return T::zero();
        }
        let mut acc = T::zero();
        for atom in &self.atoms {
            if in_range(atom.size, self.l, range) {
                let w = atom.weight.eval(x);
                let y = z * atom.size;
                acc = acc + w * ((-y).exp_m1() + y);
            }
        }
        if let Some(d) = &self.density {
            let w = d.weight.eval(x);
            if w != T::zero() {
                let power = T::one() - d.alpha;
                acc = acc
                    + w * z * z * self.density_integral(d, range, power, d.rate, T::zero(), |xi| {
                        compensated_ratio(z * xi)
                    });
            }
        }
        acc
    }

    /// `∫ e^{-kξ} (kξ)^j / j! γ(x, dξ)` over `range`, evaluated in log space so
    /// large `j` and `k` do not overflow.
    pub fn poisson_moment(&self, x: T, j: u32, k: T, range: JumpRange) -> T {
        let lnf: T = ln_factorial(j);
        let jt = T::lit(j as f64);
        let mut acc = T::zero();
        for atom in &self.atoms {
            if in_range(atom.size, self.l, range) {
                let w = atom.weight.eval(x);
                if w != T::zero() {
                    let y = k * atom.size;
                    let log_term = if j == 0 { -y } else { jt * y.ln() - y - lnf };
                    acc = acc + w * log_term.exp();
                }
            }
        }
        if let Some(d) = &self.density {
            let w = d.weight.eval(x);
            if w != T::zero() && jt > d.alpha {
                let power = jt - T::one() - d.alpha;
                let log_scale = jt * k.ln() - lnf;
                acc = acc + w * self.density_integral(d, range, power, d.rate + k, log_scale, |_| T::one());
            }
        }
        acc
    }

    /// `exp(log_scale) ∫ ξ^power e^{-beta ξ} g(ξ) dξ` over `range` for the density part,
    /// where `g` is smooth and bounded. The origin singularity is removed by
    /// `ξ = l s^{1/(power+1)}`.
    fn density_integral(
        &self,
        _d: &LevyDensity<T>,
        range: JumpRange,
        power: T,
        beta: T,
        log_scale: T,
        g: impl Fn(T) -> T,
    ) -> T {
        let tol = effective_tol::<T>(self.tol);
        let l = self.l;
        let mut total = T::zero();
        if matches!(range, JumpRange::Small | JumpRange::All) {
            let q = power + T::one();
            let inv_q = T::one() / q;
            let prefactor = log_scale + q * l.ln() - q.ln();
            total = total
                + quad::integrate(
                    |s: T| {
                        if s <= T::zero() {
                            return T::zero();
                        }
                        let xi = l * s.powf(inv_q);
                        (prefactor - beta * xi).exp() * g(xi)
                    },
                    T::zero(),
                    T::one(),
                    tol,
                );
        }
        if matches!(range, JumpRange::Tail | JumpRange::All) {
            total = total
                + quad::integrate_to_infinity(
                    |xi: T| (log_scale + power * xi.ln() - beta * xi).exp() * g(xi),
                    l,
                    tol,
                );
        }
        total
    }

    /// `∫_l^∞ γ(x, dξ)`: total big-jump intensity per unit mass at `x`.
    pub fn tail_mass(&self, x: T) -> Result<T> {
        self.exp_moment(x, 0, T::zero(), JumpRange::Tail)
    }

    /// `∫_l^∞ ξ γ(x, dξ)`.
    pub fn tail_mean(&self, x: T) -> Result<T> {
        self.exp_moment(x, 1, T::zero(), JumpRange::Tail)
    }

    /// Upper bound on `tail_mass` over all sites.
    pub fn tail_mass_bound(&self) -> Result<T> {
        let mut acc = T::zero();
        for atom in &self.atoms {
            if atom.size >= self.l {
                acc = acc + atom.weight.sup_norm();
            }
        }
        if let Some(d) = &self.density {
            let sup = d.weight.sup_norm();
            if sup > T::zero() {
                let unit = LevyKernel {
                    l: self.l,
                    atoms: Vec::new(),
                    density: Some(LevyDensity {
                        weight: CoefficientFn::constant(T::one()),
                        alpha: d.alpha,
                        rate: d.rate,
                    }),
                    tol: self.tol,
                };
                acc = acc + sup * unit.tail_mass(T::zero())?;
            }
        }
        Ok(acc)
    }

    /// Draws a jump size from `γ(x, ·)` restricted to `[l, ∞)` and normalised.
    pub fn sample_tail_size<R: Rng + ?Sized>(&self, x: T, rng: &mut R) -> Result<Option<T>> {
        let mut weights: Vec<(Option<T>, T)> = self
            .atoms
            .iter()
            .filter(|a| a.size >= self.l)
            .map(|a| (Some(a.size), a.weight.eval(x)))
            .collect();
        if let Some(d) = &self.density {
            let w = d.weight.eval(x);
            if w > T::zero() {
                let unit = LevyKernel {
                    l: self.l,
                    atoms: Vec::new(),
                    density: Some(LevyDensity {
                        weight: CoefficientFn::constant(T::one()),
                        alpha: d.alpha,
                        rate: d.rate,
                    }),
                    tol: self.tol,
                };
                weights.push((None, w * unit.tail_mass(T::zero())?));
            }
        }
        let total: T = weights.iter().map(|(_, w)| *w).sum();
        if !(total > T::zero()) {
            return Ok(None);
        }
        let target = T::uniform(rng) * total;
        let mut acc = T::zero();
        let mut chosen = weights.len() - 1;
        for (i, (_, w)) in weights.iter().enumerate() {
            acc = acc + *w;
            if target < acc {
                chosen = i;
                break;
            }
        }
        match weights[chosen].0 {
            Some(size) => Ok(Some(size)),
            None => {
                let d = self.density.as_ref().expect("density entry present");
                Ok(Some(sample_tempered_tail(d.alpha, d.rate, self.l, rng)))
            }
        }
    }
}

/// Exact rejection sampler for `ξ^{-1-α} e^{-rate ξ}` on `[l, ∞)`.
fn sample_tempered_tail<T: Real, R: Rng + ?Sized>(alpha: T, rate: T, l: T, rng: &mut R) -> T {
    let one = T::one();
    let p = one + alpha;
    loop {
        if rate > T::zero() && p >= T::zero() {
            // proposal l + Exp(rate); ξ^{-p} ≤ l^{-p}
            let u = one - T::uniform(rng);
            let xi = l - u.ln() / rate;
            if T::uniform(rng) < (xi / l).powf(-p) {
                return xi;
            }
        } else {
            // Pareto(alpha) proposal; accept with e^{-rate (ξ - l)}
            let u = one - T::uniform(rng);
            let xi = l * u.powf(-one / alpha);
            if T::uniform(rng) < (-rate * (xi - l)).exp() {
                return xi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn atom(size: f64, w: f64) -> LevyAtom<f64> {
        LevyAtom {
            size,
            weight: CoefficientFn::constant(w),
        }
    }

    #[test]
    fn empty_kernel_moments_vanish() {
        let k = LevyKernel::<f64>::empty(2.0);
        assert_eq!(k.exp_moment(0.3, 2, 0.0, JumpRange::Small).unwrap(), 0.0);
        assert_eq!(k.exp_moment(0.3, 0, 0.0, JumpRange::Tail).unwrap(), 0.0);
    }

    #[test]
    fn atomic_moments_by_hand() {
        let k = LevyKernel::empty(2.0).with_atom(0.5f64, CoefficientFn::constant(2.0));
        assert!((k.exp_moment(0.0, 2, 0.0, JumpRange::Small).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(k.exp_moment(0.0, 2, 0.0, JumpRange::Tail).unwrap(), 0.0);
        let k = LevyKernel::empty(2.0).with_atom(3.0, CoefficientFn::constant(1.0));
        assert_eq!(k.exp_moment(0.0, 1, 0.0, JumpRange::Tail).unwrap(), 3.0);
    }

    #[test]
    fn atom_at_threshold_counts_as_tail() {
        let k = LevyKernel { l: 2.0, atoms: vec![atom(2.0, 1.0)], density: None, tol: 1e-10 };
        assert_eq!(k.tail_mass(0.0).unwrap(), 1.0);
        assert_eq!(k.exp_moment(0.0, 1, 0.0, JumpRange::Small).unwrap(), 0.0);
    }

    #[test]
    fn density_moments_against_incomplete_gamma_by_quadrature() {
        // α = 0.5, rate 1: ∫_0^2 ξ^{2-1.5} e^{-ξ} dξ, checked by brute-force quadrature
        let d = LevyDensity { weight: CoefficientFn::constant(1.5), alpha: 0.5, rate: 1.0 };
        let k = LevyKernel::empty(2.0).with_density(d);
        let got = k.exp_moment(0.0, 2, 0.3, JumpRange::Small).unwrap();
        let oracle: f64 =
            1.5 * quad::integrate(|xi: f64| xi.powf(0.5) * (-1.3 * xi).exp(), 0.0, 2.0, 1e-13);
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
        let tail = k.exp_moment(0.0, 1, 0.0, JumpRange::Tail).unwrap();
        let oracle: f64 =
            1.5 * quad::integrate(|xi: f64| xi.powf(-0.5) * (-xi).exp(), 2.0, 60.0, 1e-13);
        assert!((tail - oracle).abs() < 1e-9);
    }

    #[test]
    fn divergent_tail_is_config_error() {
        let d = LevyDensity { weight: CoefficientFn::constant(1.0), alpha: 0.5, rate: 0.0 };
        let k = LevyKernel::empty(2.0).with_density(d);
        assert!(k.exp_moment(0.0, 0, 0.0, JumpRange::Tail).is_ok());
        assert!(matches!(k.exp_moment(0.0, 1, 0.0, JumpRange::Tail), Err(Error::Config(_))));
    }

    #[test]
    fn compensated_integral_matches_moment_split() {
        let k = LevyKernel::empty(2.0f64)
            .with_atom(0.5, CoefficientFn::constant(1.0))
            .with_atom(3.0, CoefficientFn::constant(0.25));
        let z = 1.7;
        let total = k.compensated_integral(0.0, z, JumpRange::All);
        let parts = k.compensated_integral(0.0, z, JumpRange::Small) + k.compensated_integral(0.0, z, JumpRange::Tail);
        assert!((total - parts).abs() < 1e-15);
        let by_hand = ((-z * 0.5f64).exp() - 1.0 + z * 0.5) + 0.25 * ((-z * 3.0f64).exp() - 1.0 + z * 3.0);
        assert!((total - by_hand).abs() < 1e-14);
    }

    #[test]
    fn poisson_moment_matches_direct_formula() {
        let k = LevyKernel::empty(2.0).with_atom(0.5, CoefficientFn::constant(1.0));
        for j in 0..8u32 {
            let kk = 4.0f64;
            let direct = (-kk * 0.5).exp() * (kk * 0.5).powi(j as i32) / (1..=j).map(f64::from).product::<f64>();
            assert!((k.poisson_moment(0.0, j, kk, JumpRange::Small) - direct).abs() < 1e-14);
        }
        // deep in the Poisson tail with large k does not overflow
        let v = k.poisson_moment(0.0, 500, 1000.0, JumpRange::Small);
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn tail_sampler_respects_threshold_and_weights() {
        let k = LevyKernel::empty(2.0)
            .with_atom(3.0, CoefficientFn::constant(1.0))
            .with_atom(5.0, CoefficientFn::constant(3.0))
            .with_atom(1.0, CoefficientFn::constant(10.0));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 40_000;
        let fives = (0..n)
            .filter(|_| k.sample_tail_size(0.0, &mut rng).unwrap().unwrap() == 5.0)
            .count();
        let p = fives as f64 / n as f64;
        let se = (0.75f64 * 0.25 / n as f64).sqrt();
        assert!((p - 0.75).abs() < 4.0 * se);
    }

    #[test]
    fn tempered_tail_sampler_mean() {
        let d = LevyDensity { weight: CoefficientFn::constant(1.0), alpha: 0.5, rate: 1.0 };
        let k = LevyKernel::empty(2.0).with_density(d);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 50_000;
        let xs: Vec<f64> = (0..n).map(|_| k.sample_tail_size(0.0, &mut rng).unwrap().unwrap()).collect();
        assert!(xs.iter().all(|&x| x >= 2.0));
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let want = k.tail_mean(0.0).unwrap() / k.tail_mass(0.0).unwrap();
        assert!((mean - want).abs() < 4.0 * (var / n as f64).sqrt());
    }
}
