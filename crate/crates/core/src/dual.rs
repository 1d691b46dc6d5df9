//! Function-valued dual `(M_t, Y_t)` and nested Monte Carlo for
//! `E⟨f, X_t^m⟩`.
//!
//! `M` jumps from `i` to `i - a + 1` (`2 ≤ a ≤ i`); each jump merges
//! coordinates through a `Ψ_ij` or `Φ_{i₁…i_a}` operator. Between jumps
//! `Y` moves under the `M`-particle semigroup, killed at rate `b` in killed
//! mode and free in full mode.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{AtomicMeasure, JumpRange, Mode, ModelSpec};
use crate::motion::{Stepper, StepperConfig};
use crate::real::Real;
use crate::rng::StreamKey;
use crate::stats::Estimate;

pub const DEFAULT_MAX_M: usize = 4;

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Jump intensities out of state `i`: `i → i-1` at rate `i(i-1)` and
/// `i → j` at rate `C(i, j-1)` for `1 ≤ j ≤ i-2`.
pub fn jump_chain_rates(i: usize) -> BTreeMap<usize, f64> {
    let mut out = BTreeMap::new();
    if i >= 2 {
        out.insert(i - 1, (i * (i - 1)) as f64);
    }
    for j in 1..i.saturating_sub(1) {
        out.insert(j, binomial(i, j - 1));
    }
    out
}

/// `2^m + m(m-1)/2 - m - 1`, which is also the total rate out of `m`.
pub fn exponent_rate(m: usize) -> f64 {
    2f64.powi(m as i32) + (m * (m.saturating_sub(1))) as f64 / 2.0 - m as f64 - 1.0
}

/// Merge operator chosen at a jump. Indices are 1-based slots of the
/// pre-jump arity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum OperatorTag {
    Psi { i: usize, j: usize },
    Phi { slots: Vec<usize> },
}

impl OperatorTag {
    /// Number of coordinates merged into one.
    pub fn merged(&self) -> usize {
        match self {
            OperatorTag::Psi { .. } => 2,
            OperatorTag::Phi { slots } => slots.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualPath<T: Real> {
    pub m0: usize,
    pub horizon: T,
    pub jump_times: Vec<T>,
    /// Arity after each jump.
    pub m_values: Vec<usize>,
    pub operators: Vec<OperatorTag>,
}

impl<T: Real> DualPath<T> {
    /// `M_t` at the horizon.
    pub fn final_m(&self) -> usize {
        self.m_values.last().copied().unwrap_or(self.m0)
    }

    /// `(start, end, arity)` for each constant stretch of `M`.
    pub fn segments(&self) -> Vec<(T, T, usize)> {
        let mut out = Vec::with_capacity(self.jump_times.len() + 1);
        let mut start = T::zero();
        let mut m = self.m0;
        for (k, &tau) in self.jump_times.iter().enumerate() {
            out.push((start, tau, m));
            start = tau;
            m = self.m_values[k];
        }
        out.push((start, self.horizon, m));
        out
    }

    /// `∫_0^T (2^{M_s} + M_s(M_s-1)/2 - M_s - 1) ds`, summed piecewise.
    pub fn exponent_integral(&self) -> T {
        self.segments().iter().map(|&(a, b, m)| (b - a) * T::lit(exponent_rate(m))).sum()
    }
}

pub fn sample_dual_path<T: Real, R: Rng + ?Sized>(m0: usize, horizon: T, rng: &mut R) -> Result<DualPath<T>> {
    if m0 == 0 {
        return Err(Error::Domain("dual arity must be at least 1".into()));
    }
    let mut path = DualPath { m0, horizon, jump_times: Vec::new(), m_values: Vec::new(), operators: Vec::new() };
    let mut t = T::zero();
    let mut m = m0;
    while m > 1 {
        let rates = jump_chain_rates(m);
        let total: f64 = rates.values().sum();
        let u = T::one() - T::uniform(rng);
        t = t - u.ln() / T::lit(total);
        if t >= horizon {
            break;
        }
        let mut pick = T::uniform(rng).f64() * total;
        let mut target = m - 1;
        // descending so the most likely target (i-1) is tried first
        for (&j, &r) in rates.iter().rev() {
            if pick < r {
                target = j;
                break;
            }
            pick -= r;
        }
        let a = m - target + 1;
        let tag = if a == 2 {
            if rng.random_bool(0.5) {
                let i = rng.random_range(1..=m);
                let mut j = rng.random_range(1..m);
                if j >= i {
                    j += 1;
                }
                OperatorTag::Psi { i, j }
            } else {
                OperatorTag::Phi { slots: random_subset(m, 2, rng) }
            }
        } else {
            OperatorTag::Phi { slots: random_subset(m, a, rng) }
        };
        path.jump_times.push(t);
        path.m_values.push(target);
        path.operators.push(tag);
        m = target;
    }
    Ok(path)
}

/// Uniform `a`-subset of `1..=m`, sorted.
fn random_subset<R: Rng + ?Sized>(m: usize, a: usize, rng: &mut R) -> Vec<usize> {
    let mut all: Vec<usize> = (1..=m).collect();
    for i in 0..a {
        let j = rng.random_range(i..m);
        all.swap(i, j);
    }
    let mut out = all[..a].to_vec();
    out.sort_unstable();
    out
}

/// Expands a merged point `y ∈ ℝ^{m-a+1}` to `ℝ^m`: the last coordinate
/// fills the tagged slots and the others fill the remaining slots in order.
/// The factor is `σ(y_last)` for `Ψ` and `∫ ξ^a γ(y_last, dξ)` for `Φ`, over
/// `(0, l)` in killed mode and `(0, ∞)` in full mode.
pub fn apply_operator_to_point<T: Real>(
    tag: &OperatorTag,
    m: usize,
    y: &[T],
    spec: &ModelSpec<T>,
    mode: Mode,
) -> Result<(Vec<T>, T)> {
    let a = tag.merged();
    let slots: Vec<usize> = match tag {
        OperatorTag::Psi { i, j } => {
            if i == j {
                return Err(Error::Internal("Ψ_ij needs i ≠ j".into()));
            }
            vec![*i.min(j), *i.max(j)]
        }
        OperatorTag::Phi { slots } => slots.clone(),
    };
    if a < 2 || a > m || y.len() != m - a + 1 || slots.iter().any(|&s| s == 0 || s > m) {
        return Err(Error::Internal(format!("operator {tag:?} does not fit arity {m} with a {}-point", y.len())));
    }
    let last = y[y.len() - 1];
    let mut out = Vec::with_capacity(m);
    let mut rest = y[..y.len() - 1].iter();
    for slot in 1..=m {
        if slots.contains(&slot) {
            out.push(last);
        } else {
            out.push(*rest.next().ok_or_else(|| Error::Internal("slot bookkeeping".into()))?);
        }
    }
    let factor = match tag {
        OperatorTag::Psi { .. } => spec.sigma().eval(last),
        OperatorTag::Phi { .. } => {
            let range = if mode == Mode::Full { JumpRange::All } else { JumpRange::Small };
            spec.levy().exp_moment(last, a as u32, T::zero(), range)?
        }
    };
    Ok((out, factor))
}

/// Composed function evaluated at a point of arity `M_T`, outermost
/// segment first: diffuse, expand through the operator, repeat, then `f`.
fn evaluate_at_point<T: Real, R: Rng + ?Sized>(
    path: &DualPath<T>,
    f: &(dyn Fn(&[T]) -> T + Sync),
    spec: &ModelSpec<T>,
    mode: Mode,
    point: &[T],
    stepper: &mut Stepper<T>,
    rng: &mut R,
) -> Result<T> {
    let segments = path.segments();
    let mut x = point.to_vec();
    let mut weight = T::one();
    let mut log_kill = T::zero();
    for (idx, &(start, end, _m)) in segments.iter().enumerate().rev() {
        stepper.advance(spec, &mut x, end - start, rng, (mode == Mode::Killed).then_some(&mut log_kill))?;
        if idx > 0 {
            let tag = &path.operators[idx - 1];
            let m_before = if idx >= 2 { path.m_values[idx - 2] } else { path.m0 };
            let (expanded, factor) = apply_operator_to_point(tag, m_before, &x, spec, mode)?;
            weight = weight * factor;
            if weight == T::zero() {
                return Ok(T::zero());
            }
            x = expanded;
        }
    }
    Ok(weight * log_kill.exp() * f(&x))
}

/// One-sample estimator of `⟨Y_T, μ^{M_T}⟩ exp{∫ ...}` for a given dual
/// path: a point from `μ^{⊗M_T}` normalised, scaled by `⟨1,μ⟩^{M_T}`,
/// averaged over `inner_paths` diffusions.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_dual_functional<T: Real, R: Rng + ?Sized>(
    path: &DualPath<T>,
    f: &(dyn Fn(&[T]) -> T + Sync),
    mu: &AtomicMeasure<T>,
    spec: &ModelSpec<T>,
    mode: Mode,
    inner_paths: usize,
    stepper: &mut Stepper<T>,
    rng: &mut R,
) -> Result<T> {
    let m = path.final_m();
    let mass = mu.mass();
    if mass == T::zero() {
        return Ok(T::zero());
    }
    let point: Vec<T> = (0..m).map(|_| sample_atom(mu, mass, rng)).collect();
    let mut acc = T::zero();
    for _ in 0..inner_paths.max(1) {
        acc = acc + evaluate_at_point(path, f, spec, mode, &point, stepper, rng)?;
    }
    let scale = mass.powi(m as i32) * path.exponent_integral().exp();
    Ok(scale * acc / T::lit(inner_paths.max(1) as f64))
}

fn sample_atom<T: Real, R: Rng + ?Sized>(mu: &AtomicMeasure<T>, mass: T, rng: &mut R) -> T {
    let target = T::uniform(rng) * mass;
    let mut acc = T::zero();
    for atom in &mu.atoms {
        acc = acc + atom.weight;
        if target < acc {
            return atom.position;
        }
    }
    mu.atoms[mu.atoms.len() - 1].position
}

/// Same as [`evaluate_dual_functional`] but integrating the outer point
/// exactly over every tuple of atoms.
#[allow(clippy::too_many_arguments)]
fn evaluate_enumerated<T: Real, R: Rng + ?Sized>(
    path: &DualPath<T>,
    f: &(dyn Fn(&[T]) -> T + Sync),
    mu: &AtomicMeasure<T>,
    spec: &ModelSpec<T>,
    mode: Mode,
    inner_paths: usize,
    stepper: &mut Stepper<T>,
    rng: &mut R,
) -> Result<T> {
    let m = path.final_m();
    let mut total = T::zero();
    for tuple in atom_tuples(mu.atoms.len(), m) {
        let point: Vec<T> = tuple.iter().map(|&i| mu.atoms[i].position).collect();
        let w: T = tuple.iter().fold(T::one(), |w, &i| w * mu.atoms[i].weight);
        let mut acc = T::zero();
        for _ in 0..inner_paths.max(1) {
            acc = acc + evaluate_at_point(path, f, spec, mode, &point, stepper, rng)?;
        }
        total = total + w * acc / T::lit(inner_paths.max(1) as f64);
    }
    Ok(total * path.exponent_integral().exp())
}

fn atom_tuples(n: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..m {
        out = out
            .into_iter()
            .flat_map(|t| {
                (0..n).map(move |i| {
                    let mut t = t.clone();
                    t.push(i);
                    t
                })
            })
            .collect();
    }
    out
}

/// `⟨f, μ^m⟩` by enumeration.
pub fn product_integral<T: Real>(f: &(dyn Fn(&[T]) -> T + Sync), mu: &AtomicMeasure<T>, m: usize) -> T {
    atom_tuples(mu.atoms.len(), m)
        .iter()
        .map(|tuple| {
            let point: Vec<T> = tuple.iter().map(|&i| mu.atoms[i].position).collect();
            let w = tuple.iter().fold(T::one(), |w, &i| w * mu.atoms[i].weight);
            w * f(&point)
        })
        .sum()
}

#[derive(Debug, Clone, Copy)]
pub struct DualOptions<T: Real> {
    pub outer_paths: usize,
    pub inner_paths: usize,
    pub mode: Mode,
    pub stepper: StepperConfig<T>,
    /// Integrate the outer point exactly over atoms (at most 3 atoms, m ≤ 3).
    pub enumerate_atoms: bool,
    pub max_m: usize,
}

impl<T: Real> DualOptions<T> {
    pub fn new(outer_paths: usize, mode: Mode) -> Self {
        DualOptions {
            outer_paths,
            inner_paths: 1,
            mode,
            stepper: StepperConfig::default(),
            enumerate_atoms: false,
            max_m: DEFAULT_MAX_M,
        }
    }
}

/// `E⟨f, X_t^m⟩` via the duality identity; outer path `i` uses
/// `key.index(i)`.
pub fn dual_moment<T: Real>(
    spec: &ModelSpec<T>,
    m: usize,
    f: &(dyn Fn(&[T]) -> T + Sync),
    mu: &AtomicMeasure<T>,
    t: T,
    options: &DualOptions<T>,
    key: &StreamKey,
) -> Result<Estimate> {
    if m == 0 || m > options.max_m {
        return Err(Error::Config(format!("dual arity {m} outside 1..={}", options.max_m)));
    }
    if options.mode == Mode::Full && m >= 2 && !spec.moment_condition_holds(m as u32) {
        return Err(Error::Config(format!("sup_x ∫ ξ^{m} γ(x,dξ) is infinite; the order-{m} moment is undefined")));
    }
    if t < T::zero() {
        return Err(Error::Domain("t must be nonnegative".into()));
    }
    if t == T::zero() {
        return Ok(Estimate::exact(product_integral(f, mu, m).f64()));
    }
    let enumerate = options.enumerate_atoms && mu.atoms.len() <= 3 && m <= 3;
    let samples: Vec<Result<f64>> = (0..options.outer_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = key.index(i as u64).rng();
            let mut stepper = Stepper::new(options.stepper);
            let path = sample_dual_path(m, t, &mut rng)?;
            let v = if enumerate {
                evaluate_enumerated(&path, f, mu, spec, options.mode, options.inner_paths, &mut stepper, &mut rng)?
            } else {
                evaluate_dual_functional(&path, f, mu, spec, options.mode, options.inner_paths, &mut stepper, &mut rng)?
            };
            Ok(v.f64())
        })
        .collect();
    let samples = samples.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(Estimate::from_samples(&samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{CoefficientFn, LevyKernel, ModelConfig};
    use crate::motion::semigroup_mc;
    use crate::stats::welch_z;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec_with(edit: impl FnOnce(&mut ModelConfig<f64>)) -> ModelSpec<f64> {
        let mut cfg = ModelConfig::baseline();
        edit(&mut cfg);
        ModelSpec::new(cfg).unwrap()
    }

    #[test]
    fn rate_table_examples() {
        assert!(jump_chain_rates(1).is_empty());
        assert_eq!(jump_chain_rates(2), BTreeMap::from([(1, 2.0)]));
        assert_eq!(jump_chain_rates(3), BTreeMap::from([(2, 6.0), (1, 1.0)]));
        // the table's two forms agree: C(i, j-1) = C(i, i-j+1)
        for i in 2..12 {
            for (&j, &r) in &jump_chain_rates(i) {
                if j + 1 < i {
                    assert_eq!(r, binomial(i, i - j + 1));
                }
            }
            let total: f64 = jump_chain_rates(i).values().sum();
            assert!((total - exponent_rate(i)).abs() < 1e-9);
        }
        assert_eq!(exponent_rate(1), 0.0);
    }

    #[test]
    fn single_coordinate_never_jumps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_dual_path(1, 5.0, &mut rng).unwrap();
        assert!(p.jump_times.is_empty());
        assert_eq!(p.exponent_integral(), 0.0);
    }

    #[test]
    fn two_state_holding_time_and_operator_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let t = 0.4f64;
        let mut survived = 0usize;
        let mut psi = 0usize;
        let mut jumps = 0usize;
        for _ in 0..n {
            let p = sample_dual_path(2, t, &mut rng).unwrap();
            if p.jump_times.is_empty() {
                survived += 1;
            } else {
                jumps += 1;
                if matches!(p.operators[0], OperatorTag::Psi { .. }) {
                    psi += 1;
                }
            }
        }
        let p0 = (-2.0 * t).exp();
        let sd = (n as f64 * p0 * (1.0 - p0)).sqrt();
        assert!((survived as f64 - n as f64 * p0).abs() < 4.0 * sd);
        let sd = (jumps as f64 * 0.25).sqrt();
        assert!((psi as f64 - jumps as f64 / 2.0).abs() < 4.0 * sd);
    }

    #[test]
    fn paths_are_monotone_and_absorbed_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let p = sample_dual_path(5, 3.0, &mut rng).unwrap();
            let mut prev = p.m0;
            for (m, op) in p.m_values.iter().zip(&p.operators) {
                assert!(*m < prev && *m >= 1);
                assert_eq!(prev - m + 1, op.merged());
                prev = *m;
            }
            let segs = p.segments();
            let direct: f64 = segs.iter().map(|(a, b, m)| (b - a) * exponent_rate(*m)).sum();
            assert_eq!(direct, p.exponent_integral());
        }
    }

    #[test]
    fn operator_examples() {
        let s = spec_with(|c| {
            c.sigma = CoefficientFn::constant(0.7);
            c.levy = LevyKernel::empty(2.0).with_atom(0.5, CoefficientFn::constant(2.0)).with_atom(3.0, CoefficientFn::constant(1.0));
        });
        let (p, f) = apply_operator_to_point(&OperatorTag::Psi { i: 1, j: 2 }, 2, &[0.3], &s, Mode::Killed).unwrap();
        assert_eq!((p, f), (vec![0.3, 0.3], 0.7));
        let (p, f) = apply_operator_to_point(&OperatorTag::Phi { slots: vec![1, 3] }, 3, &[1.0, 2.0], &s, Mode::Killed).unwrap();
        assert_eq!(p, vec![2.0, 1.0, 2.0]);
        assert_eq!(f, 2.0 * 0.25);
        let (_, f) = apply_operator_to_point(&OperatorTag::Phi { slots: vec![1, 3] }, 3, &[1.0, 2.0], &s, Mode::Full).unwrap();
        assert_eq!(f, 2.0 * 0.25 + 9.0);
        let no_sigma = spec_with(|_| {});
        let (_, f) = apply_operator_to_point(&OperatorTag::Psi { i: 2, j: 1 }, 3, &[1.0, 2.0], &no_sigma, Mode::Killed).unwrap();
        assert_eq!(f, 0.0);
        assert!(apply_operator_to_point(&OperatorTag::Psi { i: 1, j: 2 }, 3, &[1.0], &s, Mode::Killed).is_err());
    }

    #[test]
    fn psi_slot_swap_is_invisible_to_symmetric_functions() {
        let s = spec_with(|c| c.sigma = CoefficientFn::constant(1.0));
        let sym = |x: &[f64]| x.iter().map(|v| v.sin()).sum::<f64>() * x.iter().product::<f64>();
        let y = [0.2, -1.1, 0.9];
        for (i, j) in [(1, 3), (2, 4), (1, 4)] {
            let (a, fa) = apply_operator_to_point(&OperatorTag::Psi { i, j }, 4, &y, &s, Mode::Killed).unwrap();
            let (b, fb) = apply_operator_to_point(&OperatorTag::Psi { i: j, j: i }, 4, &y, &s, Mode::Killed).unwrap();
            assert_eq!(fa * sym(&a), fb * sym(&b));
        }
    }

    #[test]
    fn zero_time_is_exact() {
        let s = spec_with(|_| {});
        let mu = AtomicMeasure::new([(0.0, 0.5), (1.0, 1.5)]);
        let f = |x: &[f64]| x[0] + 2.0 * x[1];
        let e = dual_moment(&s, 2, &f, &mu, 0.0, &DualOptions::new(10, Mode::Killed), &StreamKey::root(1)).unwrap();
        // ⟨x, μ⟩⟨1, μ⟩ + 2⟨1, μ⟩⟨x, μ⟩ = 3 · 1.5 · 2
        assert_eq!((e.value, e.se), (9.0, 0.0));
    }

    #[test]
    fn second_moment_closed_form_sigma() {
        let s = spec_with(|c| {
            c.sigma = CoefficientFn::constant(0.8);
            c.h = CoefficientFn::gaussian(0.5, 0.0, 1.0);
        });
        let mu = AtomicMeasure::new([(0.0, 0.6), (1.0, 0.6)]);
        let t = 1.0;
        let mut opts = DualOptions::new(40_000, Mode::Killed);
        opts.stepper = StepperConfig::with_dt(5e-2);
        let e = dual_moment(&s, 2, &|_| 1.0, &mu, t, &opts, &StreamKey::root(2)).unwrap();
        let exact = 1.2 * 1.2 + 0.8 * t * 1.2;
        assert!((e.value - exact).abs() < 3.0 * e.se, "{e:?} vs {exact}");
    }

    #[test]
    fn second_moment_closed_form_jump_term() {
        let s = spec_with(|c| c.levy = LevyKernel::empty(2.0).with_atom(0.5, CoefficientFn::constant(2.0)));
        let mu = AtomicMeasure::dirac(0.0, 1.0);
        let mut opts = DualOptions::new(40_000, Mode::Killed);
        opts.stepper = StepperConfig::with_dt(0.1);
        let e = dual_moment(&s, 2, &|_| 1.0, &mu, 1.0, &opts, &StreamKey::root(3)).unwrap();
        let exact = 1.0 + 2.0 * 0.25;
        assert!((e.value - exact).abs() < 3.0 * e.se, "{e:?} vs {exact}");
    }

    #[test]
    fn first_moment_matches_semigroup() {
        let s = spec_with(|c| c.h = CoefficientFn::gaussian(1.0, 0.0, 1.0));
        let mu = AtomicMeasure::new([(0.0, 0.5), (1.0, 0.5)]);
        let phi = |x: &[f64]| (-x[0] * x[0]).exp();
        let cfg = StepperConfig::with_dt(1e-2);
        let mut opts = DualOptions::new(8000, Mode::Killed);
        opts.stepper = cfg;
        let d = dual_moment(&s, 1, &phi, &mu, 0.5, &opts, &StreamKey::root(4)).unwrap();
        let mut sg = Estimate::exact(0.0);
        for atom in &mu.atoms {
            let (e, _) = semigroup_mc(&s, &phi, 0.5, &[atom.position], 8000, false, cfg, &StreamKey::root(5)).unwrap();
            sg = sg.add(e.scale(atom.weight));
        }
        assert!(welch_z(&d, &sg).abs() < 3.0, "{d:?} {sg:?}");
    }

    #[test]
    fn killed_and_full_agree_without_tail() {
        let s = spec_with(|c| {
            c.sigma = CoefficientFn::constant(0.5);
            c.levy = LevyKernel::empty(2.0).with_atom(1.0, CoefficientFn::constant(0.5));
        });
        let mu = AtomicMeasure::dirac(0.0, 1.0);
        let f = |x: &[f64]| (x[0] - x[1]).cos();
        let mut opts = DualOptions::new(5000, Mode::Killed);
        opts.stepper = StepperConfig::with_dt(1e-2);
        let a = dual_moment(&s, 2, &f, &mu, 0.5, &opts, &StreamKey::root(6)).unwrap();
        opts.mode = Mode::Full;
        let b = dual_moment(&s, 2, &f, &mu, 0.5, &opts, &StreamKey::root(6)).unwrap();
        // common random numbers make the two estimators identical path by path
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn enumeration_removes_outer_noise() {
        let s = spec_with(|c| c.sigma = CoefficientFn::constant(1.0));
        let mu = AtomicMeasure::new([(0.0, 0.3), (2.0, 0.7)]);
        let mut opts = DualOptions::new(2000, Mode::Killed);
        opts.enumerate_atoms = true;
        opts.stepper = StepperConfig::with_dt(0.05);
        let e = dual_moment(&s, 2, &|_| 1.0, &mu, 0.5, &opts, &StreamKey::root(7)).unwrap();
        assert!((e.value - (1.0 + 0.5)).abs() < 3.0 * e.se);
    }

    #[test]
    fn moment_condition_and_cap() {
        use crate::kernels::LevyDensity;
        let s = spec_with(|c| {
            c.levy = LevyKernel::empty(2.0).with_density(LevyDensity { weight: CoefficientFn::constant(1.0), alpha: 1.5, rate: 0.0 })
        });
        let mu = AtomicMeasure::dirac(0.0, 1.0);
        let opts = DualOptions::new(10, Mode::Full);
        assert!(matches!(dual_moment(&s, 2, &|_| 1.0, &mu, 1.0, &opts, &StreamKey::root(8)), Err(Error::Config(_))));
        assert!(dual_moment(&s, 1, &|_| 1.0, &mu, 1.0, &opts, &StreamKey::root(8)).is_ok());
        assert!(dual_moment(&s, 5, &|_| 1.0, &mu, 1.0, &DualOptions::new(10, Mode::Killed), &StreamKey::root(8)).is_err());
    }
}
