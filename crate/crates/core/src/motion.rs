//! Correlated motion of `m` particles with generator
//! `½ Σ a(x_i) ∂²_i + ½ Σ_{i≠j} ρ(x_i - x_j) ∂_i∂_j`, integrated by
//! Euler–Maruyama, and Monte Carlo for the free and killed semigroups.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::ModelSpec;
use crate::real::Real;
use crate::rng::StreamKey;
use crate::stats::Estimate;

pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-12, 1e-10, 1e-8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    EulerMaruyama,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct StepperConfig<T: Real> {
    pub dt: T,
    /// Largest diagonal jitter tried before giving up.
    pub jitter_eps: T,
    pub scheme: Scheme,
    /// Factor independent clusters separately when ρ has compact support.
    pub block_sparse: bool,
}

impl<T: Real> Default for StepperConfig<T> {
    fn default() -> Self {
        StepperConfig { dt: T::lit(1e-3), jitter_eps: T::lit(1e-8), scheme: Scheme::EulerMaruyama, block_sparse: true }
    }
}

impl<T: Real> StepperConfig<T> {
    pub fn with_dt(dt: T) -> Self {
        StepperConfig { dt, ..Self::default() }
    }

    pub fn validate(&self, horizon: T) -> Result<()> {
        if !(self.dt > T::zero()) || self.dt > horizon {
            return Err(Error::Config(format!("dt = {} must be positive and at most the horizon", self.dt)));
        }
        if !(self.jitter_eps >= T::zero()) {
            return Err(Error::Config("jitter_eps must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub n: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(n: usize) -> Self {
        Matrix { n, data: vec![T::zero(); n * n] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.n + j] = v;
    }
}

/// `Σ_ii = a(x_i)`, `Σ_ij = ρ(x_i - x_j)`.
pub fn covariance_matrix<T: Real>(spec: &ModelSpec<T>, pos: &[T]) -> Matrix<T> {
    let mut m = Matrix::zeros(pos.len());
    fill_covariance(spec, pos, &mut m);
    m
}

fn fill_covariance<T: Real>(spec: &ModelSpec<T>, pos: &[T], m: &mut Matrix<T>) {
    let n = pos.len();
    m.n = n;
    m.data.clear();
    m.data.resize(n * n, T::zero());
    let rho = spec.interaction();
    for i in 0..n {
        m.set(i, i, spec.a(pos[i]));
        if !rho.is_zero() {
            for j in 0..i {
                let r = rho.rho(pos[i] - pos[j]);
                m.set(i, j, r);
                m.set(j, i, r);
            }
        }
    }
}

/// Diagonally pivoted Cholesky factor `Σ = L Lᵀ` of a positive
/// semidefinite matrix. Column `c` of `l` belongs to pivot `piv[c]`; rows
/// stay in the original order. Factoring stops once every remaining Schur
/// diagonal is within `1024 ε` of zero relative to its own diagonal, so
/// rank-deficient matrices (coincident particles without individual noise)
/// factor without jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor<T: Real> {
    pub l: Matrix<T>,
    pub piv: Vec<usize>,
    pub rank: usize,
}

impl<T: Real> Factor<T> {
    pub fn new() -> Self {
        Factor { l: Matrix::zeros(0), piv: Vec::new(), rank: 0 }
    }

    /// `out[i] = Σ_c l[i][c] z(piv[c])`.
    pub fn apply(&self, mut z: impl FnMut(usize) -> T, out: &mut [T]) {
        let n = self.l.n;
        out[..n].iter_mut().for_each(|o| *o = T::zero());
        for c in 0..self.rank {
            let zc = z(self.piv[c]);
            for (i, o) in out[..n].iter_mut().enumerate() {
                *o = *o + self.l.get(i, c) * zc;
            }
        }
    }

    /// `L Lᵀ`.
    pub fn product(&self) -> Matrix<T> {
        let n = self.l.n;
        let mut m = Matrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let v = (0..self.rank).fold(T::zero(), |s, c| s + self.l.get(i, c) * self.l.get(j, c));
                m.set(i, j, v);
            }
        }
        m
    }
}

impl<T: Real> Default for Factor<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Returns `None` on a clearly negative Schur diagonal, i.e. an indefinite
/// matrix.
pub fn cholesky_psd<T: Real>(a: &Matrix<T>, jitter: T, out: &mut Factor<T>) -> Option<()> {
    let n = a.n;
    out.l.n = n;
    out.l.data.clear();
    out.l.data.resize(n * n, T::zero());
    out.piv.clear();
    out.rank = 0;
    let rel = T::lit(1024.0) * T::epsilon();
    let mut d: Vec<T> = (0..n).map(|i| a.get(i, i) + jitter).collect();
    let tol: Vec<T> = (0..n).map(|i| rel * (a.get(i, i).abs() + jitter)).collect();
    let mut used = vec![false; n];
    for c in 0..n {
        let mut best = None;
        let mut done = true;
        for i in (0..n).filter(|&i| !used[i]) {
            if d[i].is_nan() || d[i] < -tol[i] {
                return None;
            }
            if d[i] > tol[i] {
                done = false;
                if best.is_none_or(|b| d[i] > d[b]) {
                    best = Some(i);
                }
            }
        }
        if done {
            break;
        }
        let j = best?;
        used[j] = true;
        out.piv.push(j);
        out.rank = c + 1;
        let ljj = d[j].sqrt();
        out.l.set(j, c, ljj);
        for i in (0..n).filter(|&i| !used[i]) {
            let mut s = a.get(i, j);
            for p in 0..c {
                s = s - out.l.get(i, p) * out.l.get(j, p);
            }
            let lij = s / ljj;
            out.l.set(i, c, lij);
            d[i] = d[i] - lij * lij;
        }
    }
    Some(())
}

/// Factor with the jitter ladder; returns the jitter that succeeded.
pub fn cholesky_jittered<T: Real>(a: &Matrix<T>, max_jitter: T, out: &mut Factor<T>) -> Result<T> {
    let mut min_pivot = f64::NAN;
    for &j in JITTER_LADDER.iter() {
        let jitter = T::lit(j);
        if jitter > max_jitter {
            break;
        }
        if cholesky_psd(a, jitter, out).is_some() {
            return Ok(jitter);
        }
        min_pivot = (0..a.n).map(|i| a.get(i, i).f64()).fold(f64::INFINITY, f64::min);
    }
    Err(Error::NumericalDegeneracy { dim: a.n, jitter: max_jitter.f64(), min_pivot })
}

/// Counters surfaced in run metadata.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MotionStats {
    pub steps: u64,
    pub factorizations: u64,
    pub jitter_escalations: u64,
}

impl MotionStats {
    pub fn merge(&mut self, other: &MotionStats) {
        self.steps += other.steps;
        self.factorizations += other.factorizations;
        self.jitter_escalations += other.jitter_escalations;
    }
}

/// Reusable integrator with scratch buffers.
#[derive(Debug, Clone)]
pub struct Stepper<T: Real> {
    pub config: StepperConfig<T>,
    pub stats: MotionStats,
    sigma: Matrix<T>,
    chol: Factor<T>,
    z: Vec<T>,
    incr: Vec<T>,
    order: Vec<usize>,
    sub_pos: Vec<T>,
}

impl<T: Real> Stepper<T> {
    pub fn new(config: StepperConfig<T>) -> Self {
        Stepper {
            config,
            stats: MotionStats::default(),
            sigma: Matrix::zeros(0),
            chol: Factor::new(),
            z: Vec::new(),
            incr: Vec::new(),
            order: Vec::new(),
            sub_pos: Vec::new(),
        }
    }

    /// One step of length `dt`, drawing the normals from `rng` in
    /// coordinate order.
    pub fn step<R: Rng + ?Sized>(&mut self, spec: &ModelSpec<T>, pos: &mut [T], dt: T, rng: &mut R) -> Result<()> {
        self.step_with(spec, pos, dt, |_| T::standard_normal(rng))
    }

    /// One step where coordinate `i` takes its normal from `rngs[i]`.
    pub fn step_per_coordinate<R: Rng>(&mut self, spec: &ModelSpec<T>, pos: &mut [T], dt: T, rngs: &mut [R]) -> Result<()> {
        assert_eq!(pos.len(), rngs.len());
        self.step_with(spec, pos, dt, |i| T::standard_normal(&mut rngs[i]))
    }

    /// One step with normals supplied by `normal(i)`.
    pub fn step_with(&mut self, spec: &ModelSpec<T>, pos: &mut [T], dt: T, mut normal: impl FnMut(usize) -> T) -> Result<()> {
        let m = pos.len();
        if m == 0 {
            return Ok(());
        }
        self.stats.steps += 1;
        let sdt = dt.sqrt();
        self.z.clear();
        self.z.extend((0..m).map(&mut normal));
        if spec.interaction().is_zero() {
            for i in 0..m {
                pos[i] = pos[i] + spec.a(pos[i]).sqrt() * sdt * self.z[i];
            }
            return Ok(());
        }
        self.incr.clear();
        self.incr.resize(m, T::zero());
        match spec.interaction().range() {
            Some(range) if self.config.block_sparse && m > 1 => self.blocked_increments(spec, pos, range)?,
            _ => self.dense_increments(spec, pos)?,
        }
        for i in 0..m {
            pos[i] = pos[i] + sdt * self.incr[i];
        }
        Ok(())
    }

    fn factor(&mut self) -> Result<()> {
        self.stats.factorizations += 1;
        let jitter = cholesky_jittered(&self.sigma, self.config.jitter_eps, &mut self.chol)?;
        if jitter > T::zero() {
            self.stats.jitter_escalations += 1;
        }
        Ok(())
    }

    fn dense_increments(&mut self, spec: &ModelSpec<T>, pos: &[T]) -> Result<()> {
        fill_covariance(spec, pos, &mut self.sigma);
        self.factor()?;
        let z = &self.z;
        self.chol.apply(|i| z[i], &mut self.incr);
        Ok(())
    }

    /// Particles farther apart than the support of ρ are uncorrelated;
    /// clusters are factored separately, keeping the original relative
    /// order inside each cluster so the result equals the dense factor.
    fn blocked_increments(&mut self, spec: &ModelSpec<T>, pos: &[T], range: T) -> Result<()> {
        let m = pos.len();
        self.order.clear();
        self.order.extend(0..m);
        self.order.sort_by(|&i, &j| pos[i].partial_cmp(&pos[j]).unwrap_or(std::cmp::Ordering::Equal));
        let mut start = 0;
        let mut members: Vec<usize> = Vec::new();
        while start < m {
            let mut end = start + 1;
            while end < m && pos[self.order[end]] - pos[self.order[end - 1]] < range {
                end += 1;
            }
            members.clear();
            members.extend_from_slice(&self.order[start..end]);
            members.sort_unstable();
            if members.len() == 1 {
                let i = members[0];
                self.incr[i] = spec.a(pos[i]).sqrt() * self.z[i];
            } else {
                self.sub_pos.clear();
                self.sub_pos.extend(members.iter().map(|&i| pos[i]));
                let sub = std::mem::take(&mut self.sub_pos);
                fill_covariance(spec, &sub, &mut self.sigma);
                self.sub_pos = sub;
                self.factor()?;
                let mut local = std::mem::take(&mut self.sub_pos);
                local.resize(members.len(), T::zero());
                let z = &self.z;
                self.chol.apply(|b| z[members[b]], &mut local);
                for (a, &i) in members.iter().enumerate() {
                    self.incr[i] = local[a];
                }
                self.sub_pos = local;
            }
            start = end;
        }
        Ok(())
    }

    /// Advances `pos` by `duration` in steps of `dt` (last one shortened).
    /// When `log_weight` is given, adds `-Σ_i b(x_i) h` per step with the
    /// left-point rule.
    pub fn advance<R: Rng + ?Sized>(
        &mut self,
        spec: &ModelSpec<T>,
        pos: &mut [T],
        duration: T,
        rng: &mut R,
        mut log_weight: Option<&mut T>,
    ) -> Result<()> {
        let n = step_count(duration, self.config.dt);
        for s in 0..n {
            let h = if s + 1 == n { duration - self.config.dt * T::lit((n - 1) as f64) } else { self.config.dt };
            if let Some(w) = log_weight.as_deref_mut() {
                let b: T = pos.iter().map(|&x| spec.killing_rate(x)).sum();
                *w = *w - b * h;
            }
            self.step(spec, pos, h, rng)?;
        }
        Ok(())
    }
}

/// Number of Euler steps covering `duration` with step `dt`.
pub fn step_count<T: Real>(duration: T, dt: T) -> usize {
    if !(duration > T::zero()) {
        return 0;
    }
    let r = (duration / dt).f64();
    ((r - 1e-9).ceil() as usize).max(1)
}

/// One step from `pos`.
pub fn step<T: Real, R: Rng + ?Sized>(spec: &ModelSpec<T>, pos: &[T], dt: T, rng: &mut R) -> Result<Vec<T>> {
    if !(dt > T::zero()) {
        return Err(Error::Domain("dt must be positive".into()));
    }
    let mut out = pos.to_vec();
    Stepper::new(StepperConfig::with_dt(dt)).step(spec, &mut out, dt, rng)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathEnd<T> {
    pub pos: Vec<T>,
    /// `-∫ b` along the path; zero when killing is off.
    pub log_weight: T,
}

pub fn simulate_path<T: Real, R: Rng + ?Sized>(
    spec: &ModelSpec<T>,
    pos0: &[T],
    duration: T,
    stepper: &mut Stepper<T>,
    rng: &mut R,
    killed: bool,
) -> Result<PathEnd<T>> {
    if duration < T::zero() {
        return Err(Error::Domain("duration must be nonnegative".into()));
    }
    let mut pos = pos0.to_vec();
    let mut w = T::zero();
    stepper.advance(spec, &mut pos, duration, rng, killed.then_some(&mut w))?;
    Ok(PathEnd { pos, log_weight: w })
}

/// Estimate of `P_t^m f(x)` (or `T_t^m f(x)` when `killed`); path `i` uses
/// sub-stream `key.index(i)`.
#[allow(clippy::too_many_arguments)]
pub fn semigroup_mc<T: Real>(
    spec: &ModelSpec<T>,
    f: &(dyn Fn(&[T]) -> T + Sync),
    t: T,
    x: &[T],
    n_paths: usize,
    killed: bool,
    config: StepperConfig<T>,
    key: &StreamKey,
) -> Result<(Estimate, MotionStats)> {
    let results: Vec<Result<(f64, MotionStats)>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = key.index(i as u64).rng();
            let mut stepper = Stepper::new(config);
            let end = simulate_path(spec, x, t, &mut stepper, &mut rng, killed)?;
            Ok(((f(&end.pos) * end.log_weight.exp()).f64(), stepper.stats))
        })
        .collect();
    let mut samples = Vec::with_capacity(n_paths);
    let mut stats = MotionStats::default();
    for r in results {
        let (v, s) = r?;
        samples.push(v);
        stats.merge(&s);
    }
    Ok((Estimate::from_samples(&samples), stats))
}
