//! First and second moments of `X_t`, the covariance density, and a
//! cross-check of every available estimator.
//!
//! With `p_t` the one-particle transition density and `p_t²` the two-particle
//! one,
//!
//! ```text
//! E⟨f,X_t⟩       = ∫∫ f(y) p_t(x,y) dy μ(dx)
//! E⟨f,X_s⟩⟨g,X_t⟩ = ⟨P_s²(f ⊗ P_{t-s}g), μ⊗μ⟩
//!                 + ∫_0^s du ∫μ(dx) ∫ p_{s-u}(x,y) (σ(y) + ∫ξ²γ(y,dξ)) P_u²(f ⊗ P_{t-s}g)(y,y) dy
//! ```
//!
//! In killed mode every semigroup carries the weight `e^{-∫b}` and the jump
//! moment runs over `(0, l)`; in full mode over `(0, ∞)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual::{dual_moment, DualOptions};
use crate::error::{Error, Result};
use crate::harness::{compare, ComparisonVerdict, MethodEstimate, Reference};
use crate::kernels::{AtomicMeasure, JumpRange, Mode, ModelSpec};
use crate::motion::{semigroup_mc, Stepper, StepperConfig};
use crate::particles::{run_ensemble, RunConfig};
use crate::quad::{fixed, gauss_legendre, gaussian_expectation};
use crate::real::Real;
use crate::rng::{StreamKey, StreamRng};
use crate::stats::{Estimate, Welford};

pub const DEFAULT_U_NODES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ClosedGaussian,
    SemigroupMc,
    DualMc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::ClosedGaussian => "closed-gaussian",
            Method::SemigroupMc => "semigroup-mc",
            Method::DualMc => "dual-mc",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed-gaussian" => Ok(Method::ClosedGaussian),
            "semigroup-mc" => Ok(Method::SemigroupMc),
            "dual-mc" => Ok(Method::DualMc),
            _ => Err(Error::Config(format!("unknown method {s:?}"))),
        }
    }
}

/// Named bounded test functions for queries and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TestFunction {
    Constant { value: f64 },
    /// `exp(-((x - center) / width)²)`
    GaussianBump { center: f64, width: f64 },
    Indicator { lo: f64, hi: f64 },
    /// `cos(freq · x)`
    Cosine { freq: f64 },
    /// `x`; unbounded, used only with Gaussian laws.
    Identity,
    /// `x²`; unbounded, used only with Gaussian laws.
    Square,
}

impl TestFunction {
    pub fn eval<T: Real>(&self, x: T) -> T {
        match *self {
            TestFunction::Constant { value } => T::lit(value),
            TestFunction::GaussianBump { center, width } => {
                let r = (x - T::lit(center)) / T::lit(width);
                (-r * r).exp()
            }
            TestFunction::Indicator { lo, hi } => {
                if x >= T::lit(lo) && x < T::lit(hi) {
                    T::one()
                } else {
                    T::zero()
                }
            }
            TestFunction::Cosine { freq } => (T::lit(freq) * x).cos(),
            TestFunction::Identity => x,
            TestFunction::Square => x * x,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, TestFunction::Constant { .. })
    }
}

impl std::str::FromStr for TestFunction {
    type Err = Error;

    /// `one`, `constant:V`, `bump:C:W`, `indicator:LO:HI`, `cos:F`, `x`, `x2`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| -> Result<f64> {
            parts
                .get(i)
                .ok_or_else(|| Error::Config(format!("test function {s:?} is missing a parameter")))?
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("test function {s:?}: {e}")))
        };
        let f = match parts[0] {
            "one" => TestFunction::Constant { value: 1.0 },
            "constant" => TestFunction::Constant { value: num(1)? },
            "bump" => TestFunction::GaussianBump { center: num(1)?, width: num(2)? },
            "indicator" => TestFunction::Indicator { lo: num(1)?, hi: num(2)? },
            "cos" => TestFunction::Cosine { freq: num(1)? },
            "x" => TestFunction::Identity,
            "x2" => TestFunction::Square,
            _ => return Err(Error::Config(format!("unknown test function {s:?}"))),
        };
        let arity = match f {
            TestFunction::Constant { .. } if parts[0] == "one" => 1,
            TestFunction::Constant { .. } | TestFunction::Cosine { .. } => 2,
            TestFunction::GaussianBump { .. } | TestFunction::Indicator { .. } => 3,
            TestFunction::Identity | TestFunction::Square => 1,
        };
        if parts.len() != arity {
            return Err(Error::Config(format!("test function {s:?} takes {} parameters", arity - 1)));
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MomentOptions<T: Real> {
    pub n_paths: usize,
    pub stepper: StepperConfig<T>,
    pub u_nodes: usize,
    pub mode: Mode,
    /// Inner diffusion replicas per outer dual path.
    pub dual_inner: usize,
}

impl<T: Real> MomentOptions<T> {
    pub fn new(n_paths: usize, mode: Mode) -> Self {
        MomentOptions { n_paths, stepper: StepperConfig::default(), u_nodes: DEFAULT_U_NODES, mode, dual_inner: 1 }
    }
}

fn killed(mode: Mode) -> bool {
    mode == Mode::Killed
}

fn jump_range(mode: Mode) -> JumpRange {
    if mode == Mode::Full {
        JumpRange::All
    } else {
        JumpRange::Small
    }
}

/// `σ(y) + ∫ ξ² γ(y, dξ)` split into its two parts.
fn split_factors<T: Real>(spec: &ModelSpec<T>, y: T, mode: Mode) -> Result<(T, T)> {
    Ok((spec.sigma().eval(y), spec.levy().exp_moment(y, 2, T::zero(), jump_range(mode))?))
}

/// Constant killing rate, when there is one.
fn constant_killing<T: Real>(spec: &ModelSpec<T>, mode: Mode) -> Option<T> {
    if !killed(mode) {
        return Some(T::zero());
    }
    spec.levy().is_homogeneous().then(|| spec.killing_rate(T::zero()))
}

fn closed_first_check<T: Real>(spec: &ModelSpec<T>, mode: Mode) -> Result<T> {
    if !spec.a_is_constant() {
        return Err(Error::Method { method: "closed-gaussian".into(), reason: "a(x) is not constant".into() });
    }
    constant_killing(spec, mode)
        .ok_or_else(|| Error::Method { method: "closed-gaussian".into(), reason: "killing rate b(x) is not constant".into() })
}

/// `(P_t f)(x)` (or `(T_t f)(x)` in killed mode) when `a` and `b` are constant.
fn heat<T: Real>(f: &(dyn Fn(T) -> T + Sync), a: T, b: T, t: T, x: T) -> T {
    gaussian_expectation(f, x, (a * t).sqrt()) * (-b * t).exp()
}

pub fn first_moment<T: Real>(
    spec: &ModelSpec<T>,
    f: &(dyn Fn(T) -> T + Sync),
    t: T,
    mu: &AtomicMeasure<T>,
    method: Method,
    options: &MomentOptions<T>,
    key: &StreamKey,
) -> Result<Estimate> {
    if t < T::zero() {
        return Err(Error::Domain("t must be nonnegative".into()));
    }
    match method {
        Method::ClosedGaussian => {
            let b = closed_first_check(spec, options.mode)?;
            let a = spec.a(T::zero());
            let v: T = mu.atoms.iter().map(|at| at.weight * heat(f, a, b, t, at.position)).sum();
            Ok(Estimate::exact(v.f64()))
        }
        Method::SemigroupMc => {
            let mut total = Estimate::exact(0.0);
            for (i, at) in mu.atoms.iter().enumerate() {
                let (e, _) = semigroup_mc(
                    spec,
                    &|x: &[T]| f(x[0]),
                    t,
                    &[at.position],
                    options.n_paths,
                    killed(options.mode),
                    options.stepper,
                    &key.index(i as u64),
                )?;
                total = total.add(e.scale(at.weight.f64()));
            }
            Ok(total)
        }
        Method::DualMc => {
            let mut opts = DualOptions::new(options.n_paths, options.mode);
            opts.inner_paths = options.dual_inner;
            opts.stepper = options.stepper;
            dual_moment(spec, 1, &|x: &[T]| f(x[0]), mu, t, &opts, key)
        }
    }
}

/// The second moment and its three terms: two independent ancestors, the
/// `σ` split and the jump split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SecondMoment {
    pub total: Estimate,
    pub pair_term: Estimate,
    pub sigma_term: Estimate,
    pub jump_term: Estimate,
}

/// `E⟨f, X_s⟩⟨g, X_t⟩` for `s ≤ t`.
#[allow(clippy::too_many_arguments)]
pub fn second_moment<T: Real>(
    spec: &ModelSpec<T>,
    f: &(dyn Fn(T) -> T + Sync),
    g: &(dyn Fn(T) -> T + Sync),
    s: T,
    t: T,
    mu: &AtomicMeasure<T>,
    method: Method,
    options: &MomentOptions<T>,
    key: &StreamKey,
) -> Result<SecondMoment> {
    if s < T::zero() || s > t {
        return Err(Error::Domain("second moment needs 0 ≤ s ≤ t".into()));
    }
    if options.mode == Mode::Full && !spec.moment_condition_holds(2) {
        return Err(Error::Config("sup_x ∫ ξ² γ(x,dξ) is infinite".into()));
    }
    if s == T::zero() && t == T::zero() {
        let v = (mu.integrate(f) * mu.integrate(g)).f64();
        let zero = Estimate::exact(0.0);
        return Ok(SecondMoment { total: Estimate::exact(v), pair_term: Estimate::exact(v), sigma_term: zero, jump_term: zero });
    }
    match method {
        Method::ClosedGaussian => second_moment_closed(spec, f, g, s, t, mu, options),
        Method::SemigroupMc => second_moment_mc(spec, f, g, s, t, mu, options, key),
        Method::DualMc => {
            if s != t {
                return Err(Error::Method { method: "dual-mc".into(), reason: "only equal times s = t".into() });
            }
            let mut opts = DualOptions::new(options.n_paths, options.mode);
            opts.inner_paths = options.dual_inner;
            opts.stepper = options.stepper;
            let e = dual_moment(spec, 2, &|x: &[T]| f(x[0]) * g(x[1]), mu, t, &opts, key)?;
            let nan = Estimate { value: f64::NAN, se: f64::NAN, n: 0 };
            Ok(SecondMoment { total: e, pair_term: nan, sigma_term: nan, jump_term: nan })
        }
    }
}

fn second_moment_closed<T: Real>(
    spec: &ModelSpec<T>,
    f: &(dyn Fn(T) -> T + Sync),
    g: &(dyn Fn(T) -> T + Sync),
    s: T,
    t: T,
    mu: &AtomicMeasure<T>,
    options: &MomentOptions<T>,
) -> Result<SecondMoment> {
    let reject = |reason: &str| Error::Method { method: "closed-gaussian".into(), reason: reason.into() };
    if !spec.interaction().is_zero() {
        return Err(reject("needs h ≡ 0"));
    }
    if !spec.c().is_constant() || !spec.sigma().is_constant() || !spec.levy().is_homogeneous() {
        return Err(reject("needs constant coefficients"));
    }
    let b = closed_first_check(spec, options.mode)?;
    let a = spec.a(T::zero());
    let (sig, jump) = split_factors(spec, T::zero(), options.mode)?;
    let mut pair = T::zero();
    for x in &mu.atoms {
        for y in &mu.atoms {
            pair = pair + x.weight * y.weight * heat(f, a, b, s, x.position) * heat(g, a, b, t, y.position);
        }
    }
    // u ↦ ∫ p_{s-u}(x,y) (P_u f)(y) (P_{t-s+u} g)(y) dy is smooth on (0, s)
    let rule = gauss_legendre(24);
    let split: T = mu
        .atoms
        .iter()
        .map(|x| {
            let inner = |u: T| {
                let fg = |y: T| heat(f, a, b, u, y) * heat(g, a, b, t - s + u, y);
                heat(&fg, a, b, s - u, x.position)
            };
            x.weight * fixed(inner, T::zero(), s, &rule)
        })
        .sum();
    let pair_term = Estimate::exact(pair.f64());
    let sigma_term = Estimate::exact((sig * split).f64());
    let jump_term = Estimate::exact((jump * split).f64());
    let total = Estimate::exact((pair + (sig + jump) * split).f64());
    Ok(SecondMoment { total, pair_term, sigma_term, jump_term })
}

/// `u`-nodes of the midpoint rule on `(0, s)`.
fn midpoints<T: Real>(s: T, n: usize) -> Vec<T> {
    let h = s / T::lit(n as f64);
    (0..n).map(|k| h * (T::lit(k as f64) + T::lit(0.5))).collect()
}

#[allow(clippy::too_many_arguments)]
fn second_moment_mc<T: Real>(
    spec: &ModelSpec<T>,
    f: &(dyn Fn(T) -> T + Sync),
    g: &(dyn Fn(T) -> T + Sync),
    s: T,
    t: T,
    mu: &AtomicMeasure<T>,
    options: &MomentOptions<T>,
    key: &StreamKey,
) -> Result<SecondMoment> {
    let mode = options.mode;
    let kill = killed(mode);
    let n = options.n_paths;
    let cfg = options.stepper;

    // two ancestors: joint motion on [0, s], then the g-particle alone on [s, t]
    let mut pair_term = Estimate::exact(0.0);
    let pair_key = key.child("pair");
    for (i, x) in mu.atoms.iter().enumerate() {
        for (j, y) in mu.atoms.iter().enumerate() {
            let k = pair_key.index((i * mu.atoms.len() + j) as u64);
            let samples: Vec<Result<f64>> = (0..n)
                .into_par_iter()
                .map(|p| {
                    let mut rng = k.index(p as u64).rng();
                    let mut st = Stepper::new(cfg);
                    let mut lw = T::zero();
                    let mut pos = [x.position, y.position];
                    st.advance(spec, &mut pos, s, &mut rng, kill.then_some(&mut lw))?;
                    let mut tail = [pos[1]];
                    st.advance(spec, &mut tail, t - s, &mut rng, kill.then_some(&mut lw))?;
                    Ok((f(pos[0]) * g(tail[0]) * lw.exp()).f64())
                })
                .collect();
            let samples = samples.into_iter().collect::<Result<Vec<_>>>()?;
            pair_term = pair_term.add(Estimate::from_samples(&samples).scale((x.weight * y.weight).f64()));
        }
    }

    let skip_sigma = spec.sigma().is_zero();
    let skip_jump = spec.levy().vanishes_on(jump_range(mode));
    let zero = Estimate::exact(0.0);
    if (skip_sigma && skip_jump) || s == T::zero() {
        return Ok(SecondMoment { total: pair_term, pair_term, sigma_term: zero, jump_term: zero });
    }

    let nodes = midpoints(s, options.u_nodes.max(1));
    let du = s.f64() / nodes.len() as f64;
    let split_key = key.child("split");
    let mut sigma_term = zero;
    let mut jump_term = zero;
    let mut combined = zero;
    for (i, x) in mu.atoms.iter().enumerate() {
        for (q, &u) in nodes.iter().enumerate() {
            let k = split_key.index((i * nodes.len() + q) as u64);
            let samples: Vec<Result<(f64, f64)>> = (0..n)
                .into_par_iter()
                .map(|p| {
                    let mut rng = k.index(p as u64).rng();
                    split_sample(spec, f, g, x.position, s, t, u, mode, cfg, &mut rng)
                })
                .collect();
            let samples = samples.into_iter().collect::<Result<Vec<_>>>()?;
            let (mut ws, mut wj, mut wc) = (Welford::default(), Welford::default(), Welford::default());
            for &(a, b) in &samples {
                ws.push(a);
                wj.push(b);
                wc.push(a + b);
            }
            let c = du * x.weight.f64();
            sigma_term = sigma_term.add(ws.estimate().scale(c));
            jump_term = jump_term.add(wj.estimate().scale(c));
            combined = combined.add(wc.estimate().scale(c));
        }
    }
    if skip_sigma {
        sigma_term = zero;
    }
    if skip_jump {
        jump_term = zero;
    }
    Ok(SecondMoment { total: pair_term.add(combined), pair_term, sigma_term, jump_term })
}

/// One ancestor from `x` on `[0, s-u]`, split at `y` into two coincident
/// particles on `[s-u, s]`, then the `g`-particle alone on `[s, t]`.
/// Returns the `σ` and jump contributions.
#[allow(clippy::too_many_arguments)]
fn split_sample<T: Real>(
    spec: &ModelSpec<T>,
    f: &(dyn Fn(T) -> T + Sync),
    g: &(dyn Fn(T) -> T + Sync),
    x: T,
    s: T,
    t: T,
    u: T,
    mode: Mode,
    cfg: StepperConfig<T>,
    rng: &mut StreamRng,
) -> Result<(f64, f64)> {
    let kill = killed(mode);
    let mut st = Stepper::new(cfg);
    let mut lw = T::zero();
    let mut one = [x];
    st.advance(spec, &mut one, s - u, rng, kill.then_some(&mut lw))?;
    let y = one[0];
    let (sig, jump) = split_factors(spec, y, mode)?;
    let mut pair = [y, y];
    st.advance(spec, &mut pair, u, rng, kill.then_some(&mut lw))?;
    let mut tail = [pair[1]];
    st.advance(spec, &mut tail, t - s, rng, kill.then_some(&mut lw))?;
    let v = f(pair[0]) * g(tail[0]) * lw.exp();
    Ok(((sig * v).f64(), (jump * v).f64()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DensityEstimate {
    /// Kernel estimator; `se` combines Monte Carlo error and the estimated
    /// smoothing bias.
    pub estimate: Estimate,
    pub bandwidth: f64,
    pub smoothing_bias: f64,
}

fn kernel(v: f64, h: f64) -> (f64, f64) {
    let z = v / h;
    let k = (-0.5 * z * z).exp() / (h * (2.0 * std::f64::consts::PI).sqrt());
    (k, k * (z * z - 1.0) / (h * h))
}

/// Density `s(t; y1, y2)` of `E X_t(dy1) X_t(dy2)` by product Gaussian
/// kernel smoothing of two-particle endpoints. The bandwidth is Silverman's
/// two-dimensional rule on the pair-term displacements.
#[allow(clippy::too_many_arguments)]
pub fn covariance_density<T: Real>(
    spec: &ModelSpec<T>,
    t: T,
    y1: T,
    y2: T,
    mu: &AtomicMeasure<T>,
    options: &MomentOptions<T>,
    key: &StreamKey,
) -> Result<DensityEstimate> {
    if mu.is_null() || mu.atoms.is_empty() {
        return Ok(DensityEstimate { estimate: Estimate::exact(0.0), bandwidth: 0.0, smoothing_bias: 0.0 });
    }
    if t <= T::zero() {
        return Err(Error::Domain("density needs t > 0".into()));
    }
    let mode = options.mode;
    let kill = killed(mode);
    let n = options.n_paths.max(2);
    let cfg = options.stepper;
    let (y1, y2) = (y1.f64(), y2.f64());

    // endpoints (Y1, Y2, weight) per sample
    type Ends = Vec<(f64, f64, f64)>;
    let mut pair_sets: Vec<(f64, Ends)> = Vec::new();
    let pair_key = key.child("pair");
    for (i, x) in mu.atoms.iter().enumerate() {
        for (j, z) in mu.atoms.iter().enumerate() {
            let k = pair_key.index((i * mu.atoms.len() + j) as u64);
            let ends: Vec<Result<(f64, f64, f64)>> = (0..n)
                .into_par_iter()
                .map(|p| {
                    let mut rng = k.index(p as u64).rng();
                    let mut st = Stepper::new(cfg);
                    let mut lw = T::zero();
                    let mut pos = [x.position, z.position];
                    st.advance(spec, &mut pos, t, &mut rng, kill.then_some(&mut lw))?;
                    Ok((pos[0].f64(), pos[1].f64(), lw.exp().f64()))
                })
                .collect();
            pair_sets.push(((x.weight * z.weight).f64(), ends.into_iter().collect::<Result<_>>()?));
        }
    }
    let mut disp = Welford::default();
    for (i, x) in mu.atoms.iter().enumerate() {
        for (j, z) in mu.atoms.iter().enumerate() {
            for &(a, b, _) in &pair_sets[i * mu.atoms.len() + j].1 {
                disp.push(a - x.position.f64());
                disp.push(b - z.position.f64());
            }
        }
    }
    let sd = disp.variance().sqrt().max(1e-12);
    let h = sd * (n as f64).powf(-1.0 / 6.0);

    let smooth = |ends: &Ends, scale: f64| -> (Estimate, f64) {
        let mut w = Welford::default();
        let mut lap = 0.0;
        for &(a, b, wt) in ends {
            let (k1, d1) = kernel(y1 - a, h);
            let (k2, d2) = kernel(y2 - b, h);
            w.push(scale * wt * k1 * k2);
            lap += scale * wt * (d1 * k2 + k1 * d2);
        }
        (w.estimate(), lap / ends.len() as f64)
    };

    let mut total = Estimate::exact(0.0);
    let mut laplacian = 0.0;
    for (w, ends) in &pair_sets {
        let (e, l) = smooth(ends, *w);
        total = total.add(e);
        laplacian += l;
    }

    let skip = spec.sigma().is_zero() && spec.levy().vanishes_on(jump_range(mode));
    if !skip {
        let nodes = midpoints(t, options.u_nodes.max(1));
        let du = t.f64() / nodes.len() as f64;
        let split_key = key.child("split");
        for (i, x) in mu.atoms.iter().enumerate() {
            for (q, &u) in nodes.iter().enumerate() {
                let k = split_key.index((i * nodes.len() + q) as u64);
                let ends: Vec<Result<(f64, f64, f64)>> = (0..n)
                    .into_par_iter()
                    .map(|p| {
                        let mut rng = k.index(p as u64).rng();
                        let mut st = Stepper::new(cfg);
                        let mut lw = T::zero();
                        let mut one = [x.position];
                        st.advance(spec, &mut one, t - u, &mut rng, kill.then_some(&mut lw))?;
                        let (sig, jump) = split_factors(spec, one[0], mode)?;
                        let mut pair = [one[0], one[0]];
                        st.advance(spec, &mut pair, u, &mut rng, kill.then_some(&mut lw))?;
                        Ok((pair[0].f64(), pair[1].f64(), ((sig + jump) * lw.exp()).f64()))
                    })
                    .collect();
                let ends: Ends = ends.into_iter().collect::<Result<_>>()?;
                let (e, l) = smooth(&ends, du * x.weight.f64());
                total = total.add(e);
                laplacian += l;
            }
        }
    }
    let bias = 0.5 * h * h * laplacian;
    let estimate = Estimate { value: total.value, se: total.se.hypot(bias), n: total.n };
    Ok(DensityEstimate { estimate, bandwidth: h, smoothing_bias: bias })
}

/// A moment to cross-check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentQuery {
    pub order: u32,
    pub f: TestFunction,
    /// Second factor for order 2.
    pub g: Option<TestFunction>,
    pub s: f64,
    pub t: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct CrossCheckOptions<T: Real> {
    pub moments: MomentOptions<T>,
    pub particle_paths: usize,
    pub k: u32,
}

/// Every applicable estimator of the query, compared pairwise and against
/// the closed form when one applies. The initial measure is the spec's.
pub fn crosscheck<T: Real>(
    spec: &ModelSpec<T>,
    query: &MomentQuery,
    options: &CrossCheckOptions<T>,
    key: &StreamKey,
) -> Result<ComparisonVerdict> {
    let mu = spec.initial();
    let mo = &options.moments;
    let f = |x: T| query.f.eval(x);
    let (s, t) = (T::lit(query.s), T::lit(query.t));
    let mut estimates = Vec::new();
    let mut reference = None;
    let particle_cfg = |times: Vec<T>| {
        let mut cfg = RunConfig::new(spec);
        cfg.k = options.k;
        cfg.mode = mo.mode;
        cfg.stepper = mo.stepper;
        cfg.snapshot_times = times;
        cfg
    };
    let quantity;
    match query.order {
        1 => {
            quantity = format!("E<f,X_t> t={}", query.t);
            if let Ok(e) = first_moment(spec, &f, t, mu, Method::ClosedGaussian, mo, key) {
                reference = Some(Reference { value: e.value, tag: "closed-gaussian".into() });
            }
            for m in [Method::SemigroupMc, Method::DualMc] {
                estimates.push(MethodEstimate::new(m.name(), first_moment(spec, &f, t, mu, m, mo, &key.child(m.name()))?));
            }
            let cfg = particle_cfg(vec![T::zero(), t]);
            let xs = run_ensemble(spec, &cfg, options.particle_paths, &key.child("particles"), |traj| {
                traj.into_result().and_then(|tr| Ok(tr.state_at(t)?.observe(f).f64()))
            })?;
            let xs = xs.into_iter().collect::<Result<Vec<_>>>()?;
            estimates.push(MethodEstimate::new("particles", Estimate::from_samples(&xs)));
        }
        2 => {
            let gf = query.g.unwrap_or(query.f);
            let g = |x: T| gf.eval(x);
            quantity = format!("E<f,X_s><g,X_t> s={} t={}", query.s, query.t);
            if let Ok(e) = second_moment(spec, &f, &g, s, t, mu, Method::ClosedGaussian, mo, key) {
                reference = Some(Reference { value: e.total.value, tag: "closed-gaussian".into() });
            }
            estimates.push(MethodEstimate::new(
                "semigroup-mc",
                second_moment(spec, &f, &g, s, t, mu, Method::SemigroupMc, mo, &key.child("semigroup-mc"))?.total,
            ));
            if s == t {
                estimates.push(MethodEstimate::new(
                    "dual-mc",
                    second_moment(spec, &f, &g, s, t, mu, Method::DualMc, mo, &key.child("dual-mc"))?.total,
                ));
            }
            let cfg = particle_cfg(if s == t { vec![T::zero(), t] } else { vec![T::zero(), s, t] });
            let xs = run_ensemble(spec, &cfg, options.particle_paths, &key.child("particles"), |traj| {
                traj.into_result().and_then(|tr| Ok((tr.state_at(s)?.observe(f) * tr.state_at(t)?.observe(g)).f64()))
            })?;
            let xs = xs.into_iter().collect::<Result<Vec<_>>>()?;
            estimates.push(MethodEstimate::new("particles", Estimate::from_samples(&xs)));
        }
        o => return Err(Error::Config(format!("crosscheck supports orders 1 and 2, got {o}"))),
    }
    compare(quantity, estimates, reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{CoefficientFn, LevyKernel, ModelConfig};
    use crate::stats::welch_z;
    use proptest::prelude::*;

    fn spec_with(edit: impl FnOnce(&mut ModelConfig<f64>)) -> ModelSpec<f64> {
        let mut cfg = ModelConfig::baseline();
        edit(&mut cfg);
        ModelSpec::new(cfg).unwrap()
    }

    fn opts(n: usize, mode: Mode, dt: f64) -> MomentOptions<f64> {
        let mut o = MomentOptions::new(n, mode);
        o.stepper = StepperConfig::with_dt(dt);
        o
    }

    #[test]
    fn first_moment_examples() {
        let key = StreamKey::root(1);
        let s = spec_with(|_| {});
        let mu = AtomicMeasure::new([(0.0, 0.4), (2.0, 0.6)]);
        let o = opts(100, Mode::Full, 0.1);
        let e = first_moment(&s, &|_| 1.0, 1.0, &mu, Method::ClosedGaussian, &o, &key).unwrap();
        assert!((e.value - 1.0).abs() < 1e-13 && e.se == 0.0);
        let e = first_moment(&s, &|_| 1.0, 1.0, &mu, Method::SemigroupMc, &o, &key).unwrap();
        assert!((e.value - 1.0).abs() < 1e-13 && e.se == 0.0);
        let d = AtomicMeasure::dirac(0.0, 1.0);
        let e = first_moment(&s, &|x| x, 1.0, &d, Method::ClosedGaussian, &o, &key).unwrap();
        assert!(e.value.abs() < 1e-13);
        // c ≡ 1 and h = indicator of [-1/2, 1/2] give a = 1 + 1 = 2
        let s2 = spec_with(|c| c.h = CoefficientFn::indicator(-0.5, 0.5, 1.0));
        assert!((s2.a(0.0) - 2.0).abs() < 1e-12);
        let e = first_moment(&s2, &|x| x * x, 1.0, &d, Method::ClosedGaussian, &o, &key).unwrap();
        assert!((e.value - 2.0).abs() < 1e-10, "{e:?}");
    }

    #[test]
    fn closed_method_rejects_variable_a() {
        let s = spec_with(|c| c.c = CoefficientFn::gaussian(1.0, 0.0, 1.0));
        let r = first_moment(&s, &|_| 1.0, 1.0, &AtomicMeasure::dirac(0.0, 1.0), Method::ClosedGaussian, &opts(1, Mode::Full, 0.1), &StreamKey::root(0));
        assert!(matches!(r, Err(Error::Method { .. })));
    }

    #[test]
    fn killed_first_moment_with_homogeneous_tail() {
        let s = spec_with(|c| c.levy = LevyKernel::empty(2.0).with_atom(4.0, CoefficientFn::constant(0.25)));
        let mu = AtomicMeasure::dirac(0.0, 2.0);
        let e = first_moment(&s, &|_| 1.0, 1.0, &mu, Method::ClosedGaussian, &opts(1, Mode::Killed, 0.1), &StreamKey::root(0)).unwrap();
        assert!((e.value - 2.0 * (-1.0f64).exp()).abs() < 1e-12);
        let m = first_moment(&s, &|_| 1.0, 1.0, &mu, Method::SemigroupMc, &opts(50, Mode::Killed, 1e-2), &StreamKey::root(0)).unwrap();
        assert!((m.value - e.value).abs() < 1e-9);
    }

    #[test]
    fn methods_agree_on_first_moment() {
        let s = spec_with(|c| c.h = CoefficientFn::gaussian(0.8, 0.0, 1.0));
        let mu = AtomicMeasure::new([(0.0, 0.5), (1.0, 1.0)]);
        let f = |x: f64| (-(x - 0.5) * (x - 0.5)).exp();
        let o = opts(6000, Mode::Full, 1e-2);
        let key = StreamKey::root(3);
        let c = first_moment(&s, &f, 0.7, &mu, Method::ClosedGaussian, &o, &key).unwrap();
        let m = first_moment(&s, &f, 0.7, &mu, Method::SemigroupMc, &o, &key.child("m")).unwrap();
        let d = first_moment(&s, &f, 0.7, &mu, Method::DualMc, &o, &key.child("d")).unwrap();
        assert!(welch_z(&m, &c).abs() < 3.0 && welch_z(&d, &c).abs() < 3.0, "{c:?} {m:?} {d:?}");
    }

    #[test]
    fn second_moment_sigma_example() {
        let s = spec_with(|c| c.sigma = CoefficientFn::constant(0.6));
        let mu = AtomicMeasure::new([(0.0, 0.5), (1.0, 0.5)]);
        let exact = 1.0 + 0.6 * 1.0;
        let o = opts(400, Mode::Full, 5e-2);
        let c = second_moment(&s, &|_| 1.0, &|_| 1.0, 1.0, 1.0, &mu, Method::ClosedGaussian, &o, &StreamKey::root(0)).unwrap();
        assert!((c.total.value - exact).abs() < 1e-10, "{c:?}");
        let m = second_moment(&s, &|_| 1.0, &|_| 1.0, 1.0, 1.0, &mu, Method::SemigroupMc, &o, &StreamKey::root(1)).unwrap();
        // f = g = 1 makes each sample deterministic, so only the midpoint rule is left
        assert!((m.total.value - exact).abs() < 1e-10, "{m:?}");
        assert_eq!(m.jump_term, Estimate::exact(0.0));
    }

    #[test]
    fn second_moment_jump_example() {
        let s = spec_with(|c| c.levy = LevyKernel::empty(2.0).with_atom(0.5, CoefficientFn::constant(2.0)));
        let mu = AtomicMeasure::dirac(0.0, 1.5);
        let exact = 1.5 * 1.5 + 2.0 * 0.25 * 0.8 * 1.5;
        let o = opts(50, Mode::Full, 0.1);
        let m = second_moment(&s, &|_| 1.0, &|_| 1.0, 0.8, 0.8, &mu, Method::SemigroupMc, &o, &StreamKey::root(1)).unwrap();
        assert!((m.total.value - exact).abs() < 1e-10);
        assert_eq!((m.sigma_term.value, m.sigma_term.se), (0.0, 0.0));
        let c = second_moment(&s, &|_| 1.0, &|_| 1.0, 0.8, 0.8, &mu, Method::ClosedGaussian, &o, &StreamKey::root(1)).unwrap();
        assert!((c.total.value - exact).abs() < 1e-10);
    }

    #[test]
    fn second_moment_at_time_zero() {
        let s = spec_with(|c| c.sigma = CoefficientFn::constant(1.0));
        let mu = AtomicMeasure::new([(0.0, 1.0), (1.0, 2.0)]);
        let m = second_moment(&s, &|x| x + 1.0, &|x| x * x, 0.0, 0.0, &mu, Method::SemigroupMc, &opts(10, Mode::Full, 0.1), &StreamKey::root(0)).unwrap();
        assert_eq!(m.total, Estimate::exact(5.0 * 2.0));
        assert!(second_moment(&s, &|x| x, &|x| x, 1.0, 0.5, &mu, Method::SemigroupMc, &opts(10, Mode::Full, 0.1), &StreamKey::root(0)).is_err());
    }

    #[test]
    fn second_moment_methods_agree_with_interaction() {
        let s = spec_with(|c| {
            c.sigma = CoefficientFn::constant(0.5);
            c.h = CoefficientFn::gaussian(0.7, 0.0, 1.0);
            c.levy = LevyKernel::empty(2.0).with_atom(1.0, CoefficientFn::constant(0.3));
        });
        let mu = AtomicMeasure::new([(0.0, 0.5), (1.0, 0.5)]);
        let f = |x: f64| (-x * x / 2.0).exp();
        let g = |x: f64| (0.5 * x).cos();
        let mut o = opts(1500, Mode::Full, 2e-2);
        o.u_nodes = 8;
        let m = second_moment(&s, &f, &g, 0.6, 0.6, &mu, Method::SemigroupMc, &o, &StreamKey::root(4)).unwrap();
        o.n_paths = 20_000;
        let d = second_moment(&s, &f, &g, 0.6, 0.6, &mu, Method::DualMc, &o, &StreamKey::root(5)).unwrap();
        assert!(welch_z(&m.total, &d.total).abs() < 3.0, "{m:?} {d:?}");
    }

    #[test]
    fn closed_second_moment_for_independent_motion() {
        // h ≡ 0, a = 1: E⟨f,X_t⟩⟨g,X_t⟩ with f = g = cos, δ_0, σ = 1
        let s = spec_with(|c| c.sigma = CoefficientFn::constant(1.0));
        let mu = AtomicMeasure::dirac(0.0, 1.0);
        let t = 0.5f64;
        let c = second_moment(&s, &|x: f64| x.cos(), &|x: f64| x.cos(), t, t, &mu, Method::ClosedGaussian, &opts(1, Mode::Full, 0.1), &StreamKey::root(0)).unwrap();
        // pair: e^{-t}; split: ∫_0^t E[cos²(W_{t-u} + ..)] ... = ∫_0^t e^{-u}·½(1 + e^{-2(t-u)}) du
        let split = crate::quad::integrate(|u: f64| (-u).exp() * 0.5 * (1.0 + (-2.0 * (t - u)).exp()), 0.0, t, 1e-14);
        assert!((c.total.value - ((-t).exp() + split)).abs() < 1e-11, "{c:?}");
    }

    #[test]
    fn density_examples() {
        let s = spec_with(|_| {});
        let o = opts(40_000, Mode::Full, 1.0);
        let null = covariance_density(&s, 1.0, 0.0, 0.0, &AtomicMeasure::new([]), &o, &StreamKey::root(0)).unwrap();
        assert_eq!(null.estimate, Estimate::exact(0.0));
        let heat = |y: f64| (-y * y / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let d = covariance_density(&s, 1.0, 0.3, -0.5, &AtomicMeasure::dirac(0.0, 1.0), &o, &StreamKey::root(1)).unwrap();
        let exact = heat(0.3) * heat(-0.5);
        assert!((d.estimate.value - exact).abs() < 3.0 * d.estimate.se, "{d:?} vs {exact}");
        assert!(d.bandwidth > 0.0);
    }

    #[test]
    fn density_is_symmetric() {
        let s = spec_with(|c| {
            c.sigma = CoefficientFn::constant(1.0);
            c.h = CoefficientFn::gaussian(0.6, 0.0, 1.0);
        });
        let mu = AtomicMeasure::new([(0.0, 1.0), (0.5, 0.5)]);
        let mut o = opts(4000, Mode::Full, 5e-2);
        o.u_nodes = 8;
        let a = covariance_density(&s, 0.5, 0.2, 0.9, &mu, &o, &StreamKey::root(2)).unwrap();
        let b = covariance_density(&s, 0.5, 0.9, 0.2, &mu, &o, &StreamKey::root(3)).unwrap();
        assert!(welch_z(&a.estimate, &b.estimate).abs() < 3.0, "{a:?} {b:?}");
    }

    #[test]
    fn crosscheck_first_and_second_order() {
        let s = spec_with(|c| {
            c.sigma = CoefficientFn::constant(1.0);
            c.initial = AtomicMeasure::dirac(0.0, 2.0);
            c.horizon = 0.5;
        });
        let mut mo = opts(3000, Mode::Full, 2e-2);
        mo.u_nodes = 8;
        let o = CrossCheckOptions { moments: mo, particle_paths: 1500, k: 50 };
        let q1 = MomentQuery { order: 1, f: TestFunction::GaussianBump { center: 0.0, width: 1.0 }, g: None, s: 0.5, t: 0.5 };
        let v = crosscheck(&s, &q1, &o, &StreamKey::root(6)).unwrap();
        assert!(v.pass, "{v:#?}");
        assert_eq!(v.estimates.len(), 3);
        let q2 = MomentQuery { order: 2, f: TestFunction::Constant { value: 1.0 }, g: None, s: 0.5, t: 0.5 };
        let v = crosscheck(&s, &q2, &o, &StreamKey::root(7)).unwrap();
        assert!((v.reference.as_ref().unwrap().value - (4.0 + 0.5 * 2.0)).abs() < 1e-10);
        assert!(v.pass, "{v:#?}");
    }

    #[test]
    fn test_function_parsing() {
        assert_eq!("one".parse::<TestFunction>().unwrap(), TestFunction::Constant { value: 1.0 });
        assert_eq!("bump:1:2".parse::<TestFunction>().unwrap(), TestFunction::GaussianBump { center: 1.0, width: 2.0 });
        assert!("bump:1".parse::<TestFunction>().is_err());
        assert!("x2:3".parse::<TestFunction>().is_err());
        assert!("nope".parse::<TestFunction>().is_err());
        assert_eq!(TestFunction::Indicator { lo: 0.0, hi: 1.0 }.eval(1.0f64), 0.0);
        assert_eq!("dual-mc".parse::<Method>().unwrap(), Method::DualMc);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]

        #[test]
        fn chapman_kolmogorov(s in 0.1f64..0.6, t in 0.1f64..0.6, center in -1.0f64..1.0, seed in 0u64..1000) {
            let spec = spec_with(|c| c.h = CoefficientFn::gaussian(0.5, 0.0, 1.0));
            let mu = AtomicMeasure::new([(0.0, 1.0), (0.7, 0.5)]);
            let f = move |x: f64| (-(x - center) * (x - center)).exp();
            let a = spec.a(0.0);
            let ptf = move |x: f64| gaussian_expectation(f, x, (a * t).sqrt());
            let o = opts(3000, Mode::Full, 2e-2);
            let key = StreamKey::root(seed);
            let lhs = first_moment(&spec, &f, s + t, &mu, Method::SemigroupMc, &o, &key.child("l")).unwrap();
            let rhs = first_moment(&spec, &ptf, s, &mu, Method::SemigroupMc, &o, &key.child("r")).unwrap();
            prop_assert!(welch_z(&lhs, &rhs).abs() < 3.0, "{:?} {:?}", lhs, rhs);
        }

        #[test]
        fn positivity_and_symmetry(sigma in 0.0f64..1.5, t in 0.1f64..0.8, seed in 0u64..1000) {
            let spec = spec_with(|c| {
                c.sigma = CoefficientFn::constant(sigma);
                c.h = CoefficientFn::gaussian(0.5, 0.0, 1.0);
            });
            let mu = AtomicMeasure::new([(0.0, 0.8), (0.5, 0.4)]);
            let f = |x: f64| (-x * x).exp();
            let g = |x: f64| 1.0 / (1.0 + x * x);
            let mut o = opts(600, Mode::Full, 5e-2);
            o.u_nodes = 6;
            let key = StreamKey::root(seed);
            let m2 = second_moment(&spec, &f, &f, t, t, &mu, Method::SemigroupMc, &o, &key.child("ff")).unwrap().total;
            let m1 = first_moment(&spec, &f, t, &mu, Method::ClosedGaussian, &o, &key).unwrap();
            prop_assert!(m2.value >= m1.value * m1.value - 3.0 * m2.se);
            let fg = second_moment(&spec, &f, &g, t, t, &mu, Method::SemigroupMc, &o, &key.child("fg")).unwrap().total;
            let gf = second_moment(&spec, &g, &f, t, t, &mu, Method::SemigroupMc, &o, &key.child("gf")).unwrap().total;
            prop_assert!(welch_z(&fg, &gf).abs() < 3.0, "{:?} {:?}", fg, gf);
        }
    }
}
