use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result, ValidationIssue};
use crate::kernels::coefficient::CoefficientFn;
use crate::kernels::interaction::InteractionKernel;
use crate::kernels::levy::{JumpRange, LevyKernel};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Big jumps removed and replaced by the linear killing term.
    #[default]
    Killed,
    /// Killed dynamics plus big-jump augmentation.
    Full,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Killed => "killed",
            Mode::Full => "full",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "killed" => Ok(Mode::Killed),
            "full" => Ok(Mode::Full),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real + serde::de::DeserializeOwned"))]
pub struct Atom<T: Real> {
    pub position: T,
    pub weight: T,
}

/// A finite atomic measure `Σ w_i δ_{x_i}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
#[serde(bound(deserialize = "T: Real + serde::de::DeserializeOwned"))]
pub struct AtomicMeasure<T: Real> {
    pub atoms: Vec<Atom<T>>,
}

impl<T: Real> AtomicMeasure<T> {
    pub fn new(atoms: impl IntoIterator<Item = (T, T)>) -> Self {
        Self {
            atoms: atoms
                .into_iter()
                .map(|(position, weight)| Atom { position, weight })
                .collect(),
        }
    }

    pub fn dirac(position: T, weight: T) -> Self {
        Self::new([(position, weight)])
    }

    pub fn mass(&self) -> T {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    pub fn is_null(&self) -> bool {
        self.atoms.is_empty() || self.mass() == T::zero()
    }

    /// `⟨f, μ⟩`.
    pub fn integrate(&self, f: impl Fn(T) -> T) -> T {
        self.atoms.iter().map(|a| a.weight * f(a.position)).sum()
    }

    pub fn span(&self) -> Option<(T, T)> {
        self.atoms.iter().fold(None, |acc, a| match acc {
            None => Some((a.position, a.position)),
            Some((lo, hi)) => Some((lo.min(a.position), hi.max(a.position))),
        })
    }
}

/// Numerical settings carried with a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Numerics {
    pub quad_tol: f64,
    /// Largest ξ-moment order that may be requested.
    pub j_cap: u32,
    /// Points in the x-grid used for suprema over sites.
    pub grid_points: usize,
    /// Grid half-width beyond the initial support, in coefficient length scales.
    pub grid_length_scales: f64,
    pub c_min: f64,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            quad_tol: 1e-10,
            j_cap: 64,
            grid_points: 513,
            grid_length_scales: 6.0,
            c_min: 1e-6,
        }
    }
}

/// On-disk form of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(bound(deserialize = "T: Real + serde::de::DeserializeOwned"))]
pub struct ModelConfig<T: Real> {
    pub c: CoefficientFn<T>,
    pub sigma: CoefficientFn<T>,
    #[serde(default)]
    pub h: CoefficientFn<T>,
    pub levy: LevyKernel<T>,
    #[serde(default = "one")]
    pub mass_unit: u32,
    #[serde(default)]
    pub initial: AtomicMeasure<T>,
    pub horizon: T,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub uniformly_elliptic: bool,
    #[serde(default)]
    pub numerics: Numerics,
}

fn one() -> u32 {
    1
}

impl<T: Real> ModelConfig<T> {
    /// A minimal model: `c ≡ 1`, `h ≡ 0`, `σ ≡ 0`, no jumps, `l = 2`, unit mass at the origin.
    pub fn baseline() -> Self {
        Self {
            c: CoefficientFn::constant(T::one()),
            sigma: CoefficientFn::zero(),
            h: CoefficientFn::zero(),
            levy: LevyKernel::empty(T::lit(2.0)),
            mass_unit: 1,
            initial: AtomicMeasure::dirac(T::zero(), T::one()),
            horizon: T::one(),
            mode: Mode::Killed,
            uniformly_elliptic: false,
            numerics: Numerics::default(),
        }
    }

    pub fn validate(&self) -> Vec<ValidationIssue> {
        let mut issues = Vec::new();
        issues.extend(self.c.validate("c"));
        issues.extend(self.sigma.validate("sigma"));
        issues.extend(self.h.validate("h"));
        if !issues.is_empty() {
            return issues;
        }
        if self.sigma.bounds().0 < T::zero() {
            issues.push(ValidationIssue::new("sigma", "sigma must be nonnegative"));
        }
        if !self.h.square_integrable() {
            issues.push(ValidationIssue::new("h", "h must be square-integrable"));
        }
        if self.uniformly_elliptic {
            let (lo, hi) = self.c.bounds();
            let floor = T::lit(self.numerics.c_min);
            let inf_abs = if lo > T::zero() {
                lo
            } else if hi < T::zero() {
                -hi
            } else {
                T::zero()
            };
            if !(inf_abs >= floor) {
                issues.push(ValidationIssue::new(
                    "c",
                    "uniformly_elliptic requires |c| bounded away from zero",
                ));
            }
        }
        issues.extend(self.levy.validate());
        if self.mass_unit < 1 {
            issues.push(ValidationIssue::new("mass_unit", "mass unit k must be at least 1"));
        }
        for (i, a) in self.initial.atoms.iter().enumerate() {
            if !(a.weight > T::zero()) || !a.weight.is_finite() {
                issues.push(ValidationIssue::new(format!("initial[{i}]"), "weights must be positive and finite"));
            }
            if !a.position.is_finite() {
                issues.push(ValidationIssue::new(format!("initial[{i}]"), "position must be finite"));
            }
        }
        if !(self.horizon > T::zero()) || !self.horizon.is_finite() {
            issues.push(ValidationIssue::new("horizon", "horizon must be positive and finite"));
        }
        let n = &self.numerics;
        if !(n.quad_tol > 0.0) {
            issues.push(ValidationIssue::new("numerics.quad_tol", "must be positive"));
        }
        if n.grid_points < 2 {
            issues.push(ValidationIssue::new("numerics.grid_points", "need at least 2 points"));
        }
        issues
    }
}

/// A validated model with derived quantities precomputed. Immutable and
/// shareable across workers.
#[derive(Debug, Clone)]
pub struct ModelSpec<T: Real> {
    config: ModelConfig<T>,
    interaction: InteractionKernel<T>,
    x_grid: Vec<T>,
    hash: String,
}

impl<T: Real> ModelSpec<T> {
    pub fn new(mut config: ModelConfig<T>) -> Result<Self> {
        let issues = config.validate();
        if !issues.is_empty() {
            return Err(Error::Validation(issues));
        }
        config.levy.tol = config.numerics.quad_tol;
        let interaction = InteractionKernel::new(config.h.clone(), config.numerics.quad_tol);
        let x_grid = build_grid(&config);
        let hash = {
            let json = serde_json::to_vec(&config)?;
            hex::encode(Sha256::digest(&json))
        };
        Ok(Self {
            config,
            interaction,
            x_grid,
            hash,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ModelConfig<T> = toml::from_str(text)?;
        Self::new(config)
    }

    pub fn config(&self) -> &ModelConfig<T> {
        &self.config
    }

    /// Copy of this model with a different configuration tweak applied.
    pub fn with(&self, edit: impl FnOnce(&mut ModelConfig<T>)) -> Result<Self> {
        let mut config = self.config.clone();
        edit(&mut config);
        Self::new(config)
    }

    pub fn c(&self) -> &CoefficientFn<T> {
        &self.config.c
    }

    pub fn sigma(&self) -> &CoefficientFn<T> {
        &self.config.sigma
    }

    pub fn interaction(&self) -> &InteractionKernel<T> {
        &self.interaction
    }

    pub fn levy(&self) -> &LevyKernel<T> {
        &self.config.levy
    }

    pub fn mass_unit(&self) -> u32 {
        self.config.mass_unit
    }

    pub fn initial(&self) -> &AtomicMeasure<T> {
        &self.config.initial
    }

    pub fn horizon(&self) -> T {
        self.config.horizon
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn numerics(&self) -> &Numerics {
        &self.config.numerics
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn x_grid(&self) -> &[T] {
        &self.x_grid
    }

    pub fn rho(&self, x: T) -> T {
        self.interaction.rho(x)
    }

    /// `a(x) = c(x)² + ρ(0)`.
    pub fn a(&self, x: T) -> T {
        let c = self.config.c.eval(x);
        c * c + self.interaction.rho0()
    }

    /// True when `a` does not depend on position.
    pub fn a_is_constant(&self) -> bool {
        self.config.c.is_constant()
    }

    /// Whether this model lies outside the uniformly elliptic regime where
    /// uniqueness of the martingale problem is proved.
    pub fn outside_uniqueness_regime(&self) -> bool {
        let (lo, hi) = self.config.c.bounds();
        !(lo > T::zero() || hi < T::zero())
    }

    /// Every coefficient that enters the branching mechanism is constant in `x`.
    pub fn branching_is_homogeneous(&self) -> bool {
        self.config.sigma.is_constant() && self.config.levy.is_homogeneous()
    }

    /// Supremum of `f` over the x-grid, the coefficient breakpoints and the
    /// limits at ±∞.
    pub fn sup_over_sites(&self, f: impl Fn(T) -> T) -> T {
        if self.branching_is_homogeneous() {
            return f(T::zero());
        }
        let mut best = T::neg_infinity();
        for &x in &self.x_grid {
            best = best.max(f(x));
        }
        let far = self.far_point();
        best.max(f(-far)).max(f(far))
    }

    fn far_point(&self) -> T {
        let reach = self
            .x_grid
            .iter()
            .fold(T::zero(), |m, x| m.max(x.abs()));
        let scale = std::iter::once(&self.config.sigma)
            .chain(self.config.levy.weight_functions())
            .chain(std::iter::once(&self.config.c))
            .map(|f| f.length_scale())
            .fold(T::one(), T::max);
        reach + T::lit(1e3) * scale
    }

    /// `‖σ‖ = sup σ`.
    pub fn sigma_norm(&self) -> T {
        self.config.sigma.sup_norm()
    }

    /// `b(x) = ∫_l^∞ ξ γ(x, dξ)` for a single site.
    pub fn killing_rate(&self, x: T) -> T {
        self.config.levy.tail_mean(x).unwrap_or_else(|_| T::infinity())
    }

    /// `‖b‖` over the site grid; values below 1e-14 are reported as zero.
    pub fn killing_norm(&self) -> T {
        if self.config.levy.vanishes_on(JumpRange::Tail) {
            return T::zero();
        }
        let b = self.sup_over_sites(|x| self.killing_rate(x));
        if b < T::lit(1e-14) {
            T::zero()
        } else {
            b
        }
    }

    /// Whether `sup_x ∫_0^∞ ξ^m γ(x, dξ)` is finite.
    pub fn moment_condition_holds(&self, m: u32) -> bool {
        match &self.config.levy.density {
            None => true,
            Some(d) => d.weight.is_zero() || d.rate > T::zero() || d.alpha > T::lit(m as f64),
        }
    }
}

fn build_grid<T: Real>(config: &ModelConfig<T>) -> Vec<T> {
    let scale = [&config.c, &config.sigma, &config.h]
        .into_iter()
        .chain(config.levy.weight_functions())
        .map(|f| f.length_scale())
        .fold(T::one(), T::max);
    let (lo, hi) = config.initial.span().unwrap_or((T::zero(), T::zero()));
    let pad = T::lit(config.numerics.grid_length_scales) * scale;
    let (a, b) = (lo - pad, hi + pad);
    let n = config.numerics.grid_points.max(2);
    let mut grid: Vec<T> = (0..n)
        .map(|i| a + (b - a) * T::lit(i as f64) / T::lit((n - 1) as f64))
        .collect();
    // make sure narrow features of the coefficients are seen
    let mut extra = Vec::new();
    for f in std::iter::once(&config.sigma).chain(config.levy.weight_functions()) {
        for p in f.breakpoints() {
            extra.push(p);
            let eps = T::lit(1e-9) * (T::one() + p.abs());
            extra.push(p - eps);
            extra.push(p + eps);
        }
    }
    grid.extend(extra);
    grid.sort_by(|x, y| x.partial_cmp(y).unwrap());
    grid.dedup();
    grid
}
