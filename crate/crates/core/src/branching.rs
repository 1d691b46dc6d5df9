//! Offspring laws of the approximating particle systems and the scaling
//! check `ψ_k → Ψ₀`.
//!
//! With `Ψ₁` the small-jump mechanism and `b` the killing rate,
//!
//! ```text
//! λ₁ = 1 + k‖σ‖ + sup_x ∫_0^l ξ(1 - e^{-kξ}) γ(x,dξ)
//! g₁(x,z) = z + Ψ₁(x, k(1-z)) / (kλ₁)
//! g₂(x,z) = z + b(x)/‖b‖ (1 - z),           λ₂ = ‖b‖
//! g_k = (λ₁g₁ + λ₂g₂) / λ_k,                 λ_k = λ₁ + λ₂
//! ψ_k(x,z) = kλ_k [g_k(x, 1 - z/k) - (1 - z/k)]
//! ```

use std::borrow::Cow;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{psi_killed, psi_small, psi_small_dz, JumpRange, ModelSpec};
use crate::real::Real;

pub const DEFAULT_J_MAX: usize = 40;
const AUTO_REMAINDER: f64 = 1e-12;
const AUTO_J_LIMIT: usize = 1 << 14;

#[derive(Debug, Clone, Serialize)]
pub struct OffspringLaw<T: Real> {
    pub site: T,
    pub k: u32,
    pub lambda_k: T,
    pub probs: Vec<T>,
    pub truncation_remainder: T,
    /// `(λ₁, λ₂)`.
    pub components: (T, T),
    #[serde(skip)]
    cdf: Vec<T>,
}

impl<T: Real> OffspringLaw<T> {
    /// A law from explicit probabilities, mainly for tests and tools.
    pub fn from_probs(site: T, k: u32, lambda_k: T, probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(*p >= T::zero())) {
            return Err(Error::Domain("offspring probabilities must be nonnegative".into()));
        }
        let total: T = probs.iter().copied().sum();
        if (total - T::one()).abs() > T::lit(1e-9) {
            return Err(Error::Domain(format!("offspring probabilities sum to {total}")));
        }
        Ok(Self::finish(site, k, lambda_k, probs, T::zero(), (lambda_k, T::zero())))
    }

    fn finish(site: T, k: u32, lambda_k: T, mut probs: Vec<T>, remainder: T, components: (T, T)) -> Self {
        let total: T = probs.iter().copied().sum();
        for p in probs.iter_mut() {
            *p = *p / total;
        }
        let mut cdf = Vec::with_capacity(probs.len());
        let mut acc = T::zero();
        for p in &probs {
            acc = acc + *p;
            cdf.push(acc);
        }
        *cdf.last_mut().unwrap() = T::one();
        OffspringLaw { site, k, lambda_k, probs, truncation_remainder: remainder, components, cdf }
    }

    pub fn j_max(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn mean(&self) -> T {
        self.probs.iter().enumerate().map(|(j, p)| T::lit(j as f64) * *p).sum()
    }

    /// `Σ_j p_j z^j`.
    pub fn generating_function(&self, z: T) -> T {
        self.probs.iter().rev().fold(T::zero(), |acc, p| acc * z + *p)
    }

    /// True when every branch event leaves the population unchanged.
    pub fn is_identity(&self) -> bool {
        self.probs.len() > 1 && self.probs[1] == T::one()
    }
}

/// `λ_{1,k}`.
pub fn lambda1_of_k<T: Real>(spec: &ModelSpec<T>, k: u32) -> T {
    let kt = T::lit(k as f64);
    let levy = spec.levy();
    let small_sup = if levy.vanishes_on(JumpRange::Small) {
        T::zero()
    } else {
        spec.sup_over_sites(|x| levy.damped_first_moment(x, kt, JumpRange::Small))
    };
    T::one() + kt * spec.sigma_norm() + small_sup
}

/// `(λ₁, λ₂, λ_k)` for mass scale `k`.
pub fn rates_of_k<T: Real>(spec: &ModelSpec<T>, k: u32) -> (T, T, T) {
    let l1 = lambda1_of_k(spec, k);
    let l2 = spec.killing_norm();
    (l1, l2, l1 + l2)
}

/// `g_{1,k}(x, z)` for `z ∈ [0, 1]`.
pub fn g1_eval<T: Real>(spec: &ModelSpec<T>, k: u32, x: T, z: T) -> Result<T> {
    check_unit(z)?;
    Ok(g1_raw(spec, k, lambda1_of_k(spec, k), x, z))
}

fn g1_raw<T: Real>(spec: &ModelSpec<T>, k: u32, l1: T, x: T, z: T) -> T {
    let kt = T::lit(k as f64);
    z + psi_small(spec, x, kt * (T::one() - z)) / (kt * l1)
}

fn g2_raw<T: Real>(spec: &ModelSpec<T>, b_norm: T, x: T, z: T) -> T {
    if b_norm == T::zero() {
        z
    } else {
        z + spec.killing_rate(x) / b_norm * (T::one() - z)
    }
}

/// `g_k(x, z)` for `z ∈ [0, 1]`.
pub fn gk_eval<T: Real>(spec: &ModelSpec<T>, k: u32, x: T, z: T) -> Result<T> {
    check_unit(z)?;
    let (l1, l2, lk) = rates_of_k(spec, k);
    Ok((l1 * g1_raw(spec, k, l1, x, z) + l2 * g2_raw(spec, l2, x, z)) / lk)
}

fn check_unit<T: Real>(z: T) -> Result<()> {
    if z >= T::zero() && z <= T::one() {
        Ok(())
    } else {
        Err(Error::Domain(format!("generating function argument {z} outside [0, 1]")))
    }
}

/// Offspring law at site `x` truncated at `j_max`.
pub fn build_offspring_law<T: Real>(spec: &ModelSpec<T>, k: u32, x: T, j_max: usize) -> Result<OffspringLaw<T>> {
    let rates = rates_of_k(spec, k);
    build_with_rates(spec, k, x, j_max, rates)
}

/// Like [`build_offspring_law`] but grows `j_max` past `min_j_max` until the
/// folded tail is below 1e-12.
pub fn build_offspring_law_auto<T: Real>(spec: &ModelSpec<T>, k: u32, x: T, min_j_max: usize) -> Result<OffspringLaw<T>> {
    let rates = rates_of_k(spec, k);
    build_auto_with_rates(spec, k, x, min_j_max, rates)
}

fn build_auto_with_rates<T: Real>(
    spec: &ModelSpec<T>,
    k: u32,
    x: T,
    min_j_max: usize,
    rates: (T, T, T),
) -> Result<OffspringLaw<T>> {
    let mut j_max = min_j_max.max(2);
    // the small-jump part is a Poisson(kξ) mixture, so its bulk sits near k·l
    let reach = (T::lit(k as f64) * spec.levy().l).to_f64().unwrap_or(0.0);
    if !spec.levy().vanishes_on(JumpRange::Small) {
        j_max = j_max.max((reach + 10.0 * reach.sqrt() + 20.0) as usize);
    }
    loop {
        match build_with_rates(spec, k, x, j_max, rates) {
            Ok(law) if law.truncation_remainder.f64() <= AUTO_REMAINDER || j_max >= AUTO_J_LIMIT => return Ok(law),
            Ok(_) | Err(Error::JmaxTooSmall { .. }) if j_max < AUTO_J_LIMIT => j_max = (2 * j_max).min(AUTO_J_LIMIT),
            other => return other,
        }
    }
}

fn build_with_rates<T: Real>(
    spec: &ModelSpec<T>,
    k: u32,
    x: T,
    j_max: usize,
    (l1, l2, lk): (T, T, T),
) -> Result<OffspringLaw<T>> {
    if j_max < 2 {
        return Err(Error::Domain("J_max must be at least 2".into()));
    }
    if k == 0 {
        return Err(Error::Domain("mass scale k must be at least 1".into()));
    }
    let kt = T::lit(k as f64);
    let levy = spec.levy();
    let sigma = spec.sigma().eval(x);

    let mut p1 = vec![T::zero(); j_max + 1];
    p1[0] = psi_small(spec, x, kt) / (kt * l1);
    p1[1] = T::one() - psi_small_dz(spec, x, kt) / l1;
    let small = !levy.vanishes_on(JumpRange::Small);
    for (j, p) in p1.iter_mut().enumerate().skip(2) {
        let mut v = if small { levy.poisson_moment(x, j as u32, kt, JumpRange::Small) / (kt * l1) } else { T::zero() };
        if j == 2 {
            v = v + kt * sigma / (T::lit(2.0) * l1);
        }
        *p = v;
    }
    let kept: T = p1.iter().copied().sum();
    let remainder1 = (T::one() - kept).max(T::zero());

    let mut probs: Vec<T> = p1.iter().map(|p| l1 * *p / lk).collect();
    if l2 > T::zero() {
        let ratio = spec.killing_rate(x) / l2;
        probs[0] = probs[0] + l2 * ratio / lk;
        probs[1] = probs[1] + l2 * (T::one() - ratio) / lk;
    }
    let remainder = l1 * remainder1 / lk;

    for (j, p) in probs.iter().enumerate() {
        if *p < T::lit(-1e-12) {
            return Err(Error::NegativeCoefficient { index: j, value: p.f64(), site: x.f64() });
        }
    }
    if remainder.f64() > 1e-6 {
        return Err(Error::JmaxTooSmall { j_max, remainder: remainder.f64() });
    }
    for p in probs.iter_mut() {
        *p = p.max(T::zero());
    }
    probs[j_max] = probs[j_max] + remainder;
    Ok(OffspringLaw::finish(x, k, lk, probs, remainder, (l1, l2)))
}

/// `ψ_k(x, z)` for `z ∈ [0, k]`, evaluated from `g_k` as written.
pub fn psi_k_eval<T: Real>(spec: &ModelSpec<T>, k: u32, x: T, z: T) -> Result<T> {
    let kt = T::lit(k as f64);
    if !(z >= T::zero() && z <= kt) {
        return Err(Error::Domain(format!("ψ_k needs z in [0, {k}], got {z}")));
    }
    let rates = rates_of_k(spec, k);
    Ok(psi_k_with_rates(spec, k, x, z, rates))
}

fn psi_k_with_rates<T: Real>(spec: &ModelSpec<T>, k: u32, x: T, z: T, (l1, l2, lk): (T, T, T)) -> T {
    let kt = T::lit(k as f64);
    let s = T::one() - z / kt;
    let g = (l1 * g1_raw(spec, k, l1, x, s) + l2 * g2_raw(spec, l2, x, s)) / lk;
    kt * lk * (g - s)
}

/// `∂_z ψ_k(x, 0+) = λ_k [1 - ∂_z g_k(x, 1)]`.
pub fn psi_k_slope_at_zero<T: Real>(spec: &ModelSpec<T>, k: u32, x: T) -> T {
    let (l1, l2, lk) = rates_of_k(spec, k);
    slope_with_rates(spec, x, (l1, l2, lk))
}

fn slope_with_rates<T: Real>(spec: &ModelSpec<T>, x: T, (l1, l2, lk): (T, T, T)) -> T {
    // ∂_z g₁(x,1) = 1 - ∂_zΨ₁(x,0)/λ₁ and ∂_z g₂(x,1) = 1 - b(x)/‖b‖
    let dg1 = T::one() - psi_small_dz(spec, x, T::zero()) / l1;
    let dg2 = if l2 > T::zero() { T::one() - spec.killing_rate(x) / l2 } else { T::one() };
    lk * (T::one() - (l1 * dg1 + l2 * dg2) / lk)
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub k_values: Vec<u32>,
    /// `sup |ψ_k - Ψ₀|` over the `(x, z)` grid.
    pub sup_errors: Vec<f64>,
    /// `sup_x |∂_zψ_k(x,0+) - ∂_zΨ₀(x,0)|` from the analytic slope.
    pub derivative_errors: Vec<f64>,
    /// The same quantity from one-sided differences with step 1e-6.
    pub fd_derivative_errors: Vec<f64>,
}

/// Sweeps `x ∈ xs` and `z_points` equally spaced values of `z ∈ [0, min(z_max, k)]`.
pub fn convergence_report<T: Real>(
    spec: &ModelSpec<T>,
    k_values: &[u32],
    z_max: T,
    xs: &[T],
    z_points: usize,
) -> Result<ScalingReport> {
    if xs.is_empty() || z_points < 2 {
        return Err(Error::Domain("convergence grid needs at least one site and two z values".into()));
    }
    let mut report = ScalingReport {
        k_values: k_values.to_vec(),
        sup_errors: Vec::new(),
        derivative_errors: Vec::new(),
        fd_derivative_errors: Vec::new(),
    };
    let step = T::lit(1e-6);
    for &k in k_values {
        let rates = rates_of_k(spec, k);
        let top = z_max.min(T::lit(k as f64));
        let mut sup = 0.0f64;
        let mut dsup = 0.0f64;
        let mut fdsup = 0.0f64;
        for &x in xs {
            for i in 0..z_points {
                let z = top * T::lit(i as f64 / (z_points - 1) as f64);
                let err = psi_k_with_rates(spec, k, x, z, rates) - psi_killed(spec, x, z)?;
                sup = sup.max(err.f64().abs());
            }
            let target = spec.killing_rate(x);
            dsup = dsup.max((slope_with_rates(spec, x, rates) - target).f64().abs());
            let fd_k = (psi_k_with_rates(spec, k, x, step, rates) - psi_k_with_rates(spec, k, x, T::zero(), rates)) / step;
            let fd_0 = (psi_killed(spec, x, step)? - psi_killed(spec, x, T::zero())?) / step;
            fdsup = fdsup.max((fd_k - fd_0).f64().abs());
        }
        report.sup_errors.push(sup);
        report.derivative_errors.push(dsup);
        report.fd_derivative_errors.push(fdsup);
    }
    Ok(report)
}

/// Inverse-CDF draw from `law`.
pub fn sample_offspring<T: Real, R: Rng + ?Sized>(law: &OffspringLaw<T>, rng: &mut R) -> usize {
    let u = T::uniform(rng);
    law.cdf.partition_point(|&c| c <= u).min(law.probs.len() - 1)
}

/// Offspring laws for one mass scale, precomputed before a simulation.
#[derive(Debug, Clone)]
pub struct LawTable<T: Real> {
    k: u32,
    rates: (T, T, T),
    min_j_max: usize,
    kind: TableKind<T>,
}

#[derive(Debug, Clone)]
enum TableKind<T: Real> {
    Homogeneous(OffspringLaw<T>),
    Buckets { origin: T, width: T, laws: Vec<OffspringLaw<T>>, spec: Box<ModelSpec<T>> },
    Exact(Box<ModelSpec<T>>),
}

const MAX_BUCKETS: usize = 4096;

impl<T: Real> LawTable<T> {
    /// Site-bucketed table; buckets follow the ρ-grid step when there is one.
    /// Sites outside the model's x-grid are built exactly on demand.
    pub fn build(spec: &ModelSpec<T>, k: u32) -> Result<Self> {
        let rates = rates_of_k(spec, k);
        let min_j_max = DEFAULT_J_MAX;
        if spec.branching_is_homogeneous() {
            let law = build_auto_with_rates(spec, k, T::zero(), min_j_max, rates)?;
            return Ok(LawTable { k, rates, min_j_max, kind: TableKind::Homogeneous(law) });
        }
        let grid = spec.x_grid();
        let (lo, hi) = (grid[0], grid[grid.len() - 1]);
        let span = (hi - lo).max(T::lit(1e-9));
        let mut width = spec.interaction().grid_step().unwrap_or(span / T::lit(1024.0));
        if span / width > T::lit(MAX_BUCKETS as f64) {
            width = span / T::lit(MAX_BUCKETS as f64);
        }
        let n = (span / width).ceil().to_usize().unwrap_or(1).max(1);
        let laws = (0..n)
            .map(|i| {
                let mid = lo + width * (T::lit(i as f64) + T::lit(0.5));
                build_auto_with_rates(spec, k, mid, min_j_max, rates)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LawTable { k, rates, min_j_max, kind: TableKind::Buckets { origin: lo, width, laws, spec: Box::new(spec.clone()) } })
    }

    /// One fixed law at every site, with `λ_k` taken from the law.
    pub fn constant(k: u32, law: OffspringLaw<T>) -> Self {
        let lk = law.lambda_k;
        LawTable { k, rates: (lk, T::zero(), lk), min_j_max: DEFAULT_J_MAX, kind: TableKind::Homogeneous(law) }
    }

    /// Builds every law exactly at the requested site.
    pub fn exact(spec: &ModelSpec<T>, k: u32) -> Self {
        LawTable { k, rates: rates_of_k(spec, k), min_j_max: DEFAULT_J_MAX, kind: TableKind::Exact(Box::new(spec.clone())) }
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    /// `λ_k` shared by every site.
    pub fn lambda_k(&self) -> T {
        self.rates.2
    }

    pub fn homogeneous_law(&self) -> Option<&OffspringLaw<T>> {
        match &self.kind {
            TableKind::Homogeneous(law) => Some(law),
            _ => None,
        }
    }

    pub fn law_at(&self, x: T) -> Result<Cow<'_, OffspringLaw<T>>> {
        match &self.kind {
            TableKind::Homogeneous(law) => Ok(Cow::Borrowed(law)),
            TableKind::Buckets { origin, width, laws, spec } => {
                let pos = (x - *origin) / *width;
                if pos >= T::zero() && pos < T::lit(laws.len() as f64) {
                    Ok(Cow::Borrowed(&laws[pos.to_usize().unwrap_or(0).min(laws.len() - 1)]))
                } else {
                    build_auto_with_rates(spec, self.k, x, self.min_j_max, self.rates).map(Cow::Owned)
                }
            }
            TableKind::Exact(spec) => build_auto_with_rates(spec, self.k, x, self.min_j_max, self.rates).map(Cow::Owned),
        }
    }
}
