//! Interacting branching particle system with unit mass `1/k`, and its
//! big-jump augmentation.
//!
//! Branch events fire at total rate `λ k (k ∧ ⟨1,X⟩)`; the branching
//! particle is uniform and is replaced by `j ~ p(x)` copies. In full mode a
//! particle at `x` also emits big jumps at rate `k⁻¹ ∫_l^∞ γ(x,dξ)`, each
//! adding `round(kξ) ∨ 1` particles at `x`.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::branching::{sample_offspring, LawTable};
use crate::error::{Error, Result};
use crate::kernels::{JumpRange, LevyKernel, Mode, ModelSpec};
use crate::motion::{step_count, MotionStats, Stepper, StepperConfig};
use crate::real::Real;
use crate::rng::{StreamKey, StreamRng};

pub const DEFAULT_PARTICLE_CAP: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    /// Lazy per-particle clocks when ρ ≡ 0, joint diffusion otherwise.
    #[default]
    Auto,
    /// Always diffuse every particle jointly between events.
    Synchronous,
}

#[derive(Debug, Clone)]
pub struct RunConfig<T: Real> {
    pub k: u32,
    /// Per-particle branch rate; `None` uses `λ_k` of the law table.
    pub lambda: Option<T>,
    pub mode: Mode,
    pub stepper: StepperConfig<T>,
    pub snapshot_times: Vec<T>,
    pub particle_cap: usize,
    /// Build offspring laws at the exact site instead of per bucket.
    pub exact_laws: bool,
    pub record_events: bool,
    pub engine: Engine,
}

impl<T: Real> RunConfig<T> {
    /// Snapshots at 0 and the horizon, mass unit and mode from the spec.
    pub fn new(spec: &ModelSpec<T>) -> Self {
        RunConfig {
            k: spec.mass_unit(),
            lambda: None,
            mode: spec.mode(),
            stepper: StepperConfig::default(),
            snapshot_times: vec![T::zero(), spec.horizon()],
            particle_cap: DEFAULT_PARTICLE_CAP,
            exact_laws: false,
            record_events: false,
            engine: Engine::Auto,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("mass scale k must be at least 1".into()));
        }
        if self.snapshot_times.is_empty() {
            return Err(Error::Config("at least one snapshot time is required".into()));
        }
        let mut prev = T::neg_infinity();
        for &t in &self.snapshot_times {
            if !(t >= T::zero()) || !t.is_finite() || t <= prev {
                return Err(Error::Config("snapshot times must be finite, nonnegative and increasing".into()));
            }
            prev = t;
        }
        if let Some(l) = self.lambda {
            if !(l >= T::zero()) {
                return Err(Error::Config("λ must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Branch,
    BigJump,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event<T: Real> {
    pub time: T,
    pub kind: EventKind,
    pub site: T,
    pub delta_count: i64,
    /// Exact jump size for big jumps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub xi: Option<T>,
}

/// `k⁻¹ Σ δ_{x_i}` at one time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticleState<T: Real> {
    pub positions: Vec<T>,
    pub k: u32,
    pub time: T,
}

impl<T: Real> ParticleState<T> {
    pub fn new(positions: Vec<T>, k: u32, time: T) -> Self {
        ParticleState { positions, k, time }
    }

    /// `round(k w)` particles at each atom of `μ`.
    pub fn from_measure(spec: &ModelSpec<T>, k: u32) -> Self {
        let kt = T::lit(k as f64);
        let mut positions = Vec::new();
        for atom in &spec.initial().atoms {
            let n = (kt * atom.weight).round().to_usize().unwrap_or(0);
            positions.extend(std::iter::repeat_n(atom.position, n));
        }
        ParticleState { positions, k, time: T::zero() }
    }

    pub fn count(&self) -> usize {
        self.positions.len()
    }

    pub fn mass(&self) -> T {
        T::lit(self.positions.len() as f64) / T::lit(self.k as f64)
    }

    pub fn is_null(&self) -> bool {
        self.positions.is_empty()
    }

    /// `⟨φ, X⟩ = k⁻¹ Σ φ(x_i)`.
    pub fn observe(&self, phi: impl Fn(T) -> T) -> T {
        self.positions.iter().map(|&x| phi(x)).sum::<T>() / T::lit(self.k as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CapInfo {
    pub count: usize,
    pub cap: usize,
    pub time: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Trajectory<T: Real> {
    pub snapshot_times: Vec<T>,
    pub states: Vec<ParticleState<T>>,
    pub events: Vec<Event<T>>,
    pub master_seed: u64,
    pub stream: String,
    pub spec_hash: String,
    pub mode: Mode,
    pub k: u32,
    pub lambda: T,
    pub event_count: u64,
    /// Sizes of every big jump, logged even when events are not recorded.
    pub jump_sizes: Vec<T>,
    /// `∫ big_jump_rate dt` over the run (left-point rule when the tail
    /// depends on position).
    pub jump_rate_integral: T,
    /// `Σ (round(kξ) ∨ 1)/k - ξ` over big jumps.
    pub jump_mass_error: T,
    pub initial_mass_error: T,
    pub motion: MotionStats,
    pub aborted: Option<CapInfo>,
}

impl<T: Real> Trajectory<T> {
    pub fn state_at(&self, t: T) -> Result<&ParticleState<T>> {
        self.snapshot_times
            .iter()
            .position(|&s| s == t)
            .and_then(|i| self.states.get(i))
            .ok_or(Error::NotSnapshot(t.f64()))
    }

    /// Converts an aborted run into [`Error::ParticleCap`].
    pub fn into_result(self) -> Result<Self> {
        match self.aborted {
            Some(c) => Err(Error::ParticleCap { count: c.count, cap: c.cap, time: c.time }),
            None => Ok(self),
        }
    }
}

/// `λ k (k ∧ n/k)` for `n` particles.
pub fn branch_rate<T: Real>(count: usize, lambda: T, k: u32) -> T {
    let kt = T::lit(k as f64);
    let mass = T::lit(count as f64) / kt;
    lambda * kt * kt.min(mass)
}

/// `Σ_i k⁻¹ ∫_l^∞ γ(x_i, dξ)`.
pub fn big_jump_rate<T: Real>(state: &ParticleState<T>, levy: &LevyKernel<T>) -> Result<T> {
    if levy.vanishes_on(JumpRange::Tail) {
        return Ok(T::zero());
    }
    let total: T = state.positions.iter().map(|&x| levy.tail_mass(x)).sum::<Result<T>>()?;
    Ok(total / T::lit(state.k as f64))
}

/// Replaces a uniformly chosen particle by `j ~ p(x)` copies.
pub fn execute_branch<T: Real, R: Rng + ?Sized>(
    state: &mut ParticleState<T>,
    laws: &LawTable<T>,
    rng: &mut R,
) -> Result<Event<T>> {
    if state.is_null() {
        return Err(Error::Domain("cannot branch the null state".into()));
    }
    let i = rng.random_range(0..state.count());
    let x = state.positions[i];
    let law = laws.law_at(x)?;
    let j = sample_offspring(&law, rng);
    apply_offspring(&mut state.positions, i, j);
    Ok(Event { time: state.time, kind: EventKind::Branch, site: x, delta_count: j as i64 - 1, xi: None })
}

fn apply_offspring<T: Copy>(positions: &mut Vec<T>, i: usize, j: usize) {
    let x = positions[i];
    if j == 0 {
        positions.swap_remove(i);
    } else {
        positions.extend(std::iter::repeat_n(x, j - 1));
    }
}

/// Picks a particle with probability proportional to its tail intensity
/// and adds `round(kξ) ∨ 1` particles at its site. `None` when the tail
/// carries no mass at any particle.
pub fn execute_big_jump<T: Real, R: Rng + ?Sized>(
    state: &mut ParticleState<T>,
    levy: &LevyKernel<T>,
    rng: &mut R,
) -> Result<Option<Event<T>>> {
    let weights: Vec<T> = state.positions.iter().map(|&x| levy.tail_mass(x)).collect::<Result<_>>()?;
    let total: T = weights.iter().copied().sum();
    if !(total > T::zero()) {
        return Ok(None);
    }
    let target = T::uniform(rng) * total;
    let mut acc = T::zero();
    let mut chosen = weights.len() - 1;
    for (i, w) in weights.iter().enumerate() {
        acc = acc + *w;
        if target < acc {
            chosen = i;
            break;
        }
    }
    let x = state.positions[chosen];
    let Some(xi) = levy.sample_tail_size(x, rng)? else { return Ok(None) };
    let added = jump_copies(xi, state.k);
    state.positions.extend(std::iter::repeat_n(x, added));
    Ok(Some(Event { time: state.time, kind: EventKind::BigJump, site: x, delta_count: added as i64, xi: Some(xi) }))
}

fn jump_copies<T: Real>(xi: T, k: u32) -> usize {
    (xi * T::lit(k as f64)).round().to_usize().unwrap_or(usize::MAX).max(1)
}

/// One trajectory, drawing from sub-streams of `key`.
pub fn run<T: Real>(spec: &ModelSpec<T>, config: &RunConfig<T>, key: &StreamKey) -> Result<Trajectory<T>> {
    config.validate()?;
    let laws = if config.exact_laws { LawTable::exact(spec, config.k) } else { LawTable::build(spec, config.k)? };
    run_with_laws(spec, config, &laws, key)
}

/// Like [`run`] with a prebuilt law table.
pub fn run_with_laws<T: Real>(
    spec: &ModelSpec<T>,
    config: &RunConfig<T>,
    laws: &LawTable<T>,
    key: &StreamKey,
) -> Result<Trajectory<T>> {
    config.validate()?;
    if laws.k() != config.k {
        return Err(Error::Config(format!("law table built for k = {} but run uses k = {}", laws.k(), config.k)));
    }
    let lazy = spec.interaction().is_zero() && config.engine == Engine::Auto;
    let initial = ParticleState::from_measure(spec, config.k);
    let initial_mass_error = (initial.mass() - spec.initial().mass()).abs();
    let mut sim = Sim::new(spec, config, laws, key, initial, lazy)?;
    sim.traj.initial_mass_error = initial_mass_error;
    sim.run()?;
    Ok(sim.traj)
}

/// `n_paths` independent trajectories in parallel, path `i` on
/// `key.index(i)`; `map` reduces each trajectory before the next is kept.
pub fn run_ensemble<T: Real, U: Send>(
    spec: &ModelSpec<T>,
    config: &RunConfig<T>,
    n_paths: usize,
    key: &StreamKey,
    map: impl Fn(Trajectory<T>) -> U + Sync,
) -> Result<Vec<U>> {
    config.validate()?;
    let laws = if config.exact_laws { LawTable::exact(spec, config.k) } else { LawTable::build(spec, config.k)? };
    (0..n_paths)
        .into_par_iter()
        .map(|i| run_with_laws(spec, config, &laws, &key.index(i as u64)).map(&map))
        .collect()
}

/// `⟨φ, X_t⟩` at a snapshot time.
pub fn observe<T: Real>(traj: &Trajectory<T>, phi: impl Fn(T) -> T, t: T) -> Result<T> {
    Ok(traj.state_at(t)?.observe(phi))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JumpCensus<T: Real> {
    pub count: usize,
    pub sizes: Vec<T>,
    /// Time integral of the big-jump rate along the trajectory.
    pub compensator: T,
    /// Sizes below the threshold; always zero by construction.
    pub below_threshold: usize,
}

pub fn jump_census<T: Real>(traj: &Trajectory<T>, l: T) -> JumpCensus<T> {
    JumpCensus {
        count: traj.jump_sizes.len(),
        sizes: traj.jump_sizes.clone(),
        compensator: traj.jump_rate_integral,
        below_threshold: traj.jump_sizes.iter().filter(|&&x| x < l).count(),
    }
}

struct LazyParticle<T> {
    pos: T,
    time: T,
    rng: StreamRng,
}

enum Population<T: Real> {
    Lazy { particles: Vec<LazyParticle<T>>, streams: StreamKey, serial: u64 },
    Synchronous { positions: Vec<T>, stepper: Stepper<T>, rng: StreamRng },
}

struct Sim<'a, T: Real> {
    spec: &'a ModelSpec<T>,
    config: &'a RunConfig<T>,
    laws: &'a LawTable<T>,
    lambda: T,
    kt: T,
    full: bool,
    tail_homogeneous: bool,
    tail_bound: T,
    a_const: Option<T>,
    pop: Population<T>,
    events_rng: StreamRng,
    time: T,
    motion_steps: u64,
    traj: Trajectory<T>,
}

impl<'a, T: Real> Sim<'a, T> {
    fn new(
        spec: &'a ModelSpec<T>,
        config: &'a RunConfig<T>,
        laws: &'a LawTable<T>,
        key: &StreamKey,
        initial: ParticleState<T>,
        lazy: bool,
    ) -> Result<Self> {
        let levy = spec.levy();
        let full = config.mode == Mode::Full && !levy.vanishes_on(JumpRange::Tail);
        let tail_bound = if full { levy.tail_mass_bound()? } else { T::zero() };
        let tail_homogeneous = levy.is_homogeneous();
        let pop = if lazy {
            let streams = key.child("particles");
            let particles = initial
                .positions
                .iter()
                .enumerate()
                .map(|(i, &pos)| LazyParticle { pos, time: T::zero(), rng: streams.counter_rng(i as u64) })
                .collect::<Vec<_>>();
            let serial = particles.len() as u64;
            Population::Lazy { particles, streams, serial }
        } else {
            Population::Synchronous {
                positions: initial.positions.clone(),
                stepper: Stepper::new(config.stepper),
                rng: key.child("motion").rng(),
            }
        };
        let lambda = config.lambda.unwrap_or(laws.lambda_k());
        Ok(Sim {
            spec,
            config,
            laws,
            lambda,
            kt: T::lit(config.k as f64),
            full,
            tail_homogeneous,
            tail_bound,
            a_const: if spec.a_is_constant() { Some(spec.a(T::zero())) } else { None },
            pop,
            events_rng: key.child("events").rng(),
            time: T::zero(),
            motion_steps: 0,
            traj: Trajectory {
                snapshot_times: Vec::new(),
                states: Vec::new(),
                events: Vec::new(),
                master_seed: key.master_seed(),
                stream: key.path().to_string(),
                spec_hash: spec.hash().to_string(),
                mode: config.mode,
                k: config.k,
                lambda,
                event_count: 0,
                jump_sizes: Vec::new(),
                jump_rate_integral: T::zero(),
                jump_mass_error: T::zero(),
                initial_mass_error: T::zero(),
                motion: MotionStats::default(),
                aborted: None,
            },
        })
    }

    fn count(&self) -> usize {
        match &self.pop {
            Population::Lazy { particles, .. } => particles.len(),
            Population::Synchronous { positions, .. } => positions.len(),
        }
    }

    fn run(&mut self) -> Result<()> {
        let snaps = self.config.snapshot_times.clone();
        let mut next = 0;
        while next < snaps.len() {
            let n = self.count();
            let branch = if n > 0 { branch_rate(n, self.lambda, self.config.k) } else { T::zero() };
            let jump = if self.full && n > 0 { T::lit(n as f64) / self.kt * self.tail_bound } else { T::zero() };
            let total = branch + jump;
            let wait = if total > T::zero() {
                let u = T::one() - T::uniform(&mut self.events_rng);
                -u.ln() / total
            } else {
                T::infinity()
            };
            let snap = snaps[next];
            if self.time + wait >= snap {
                self.accumulate_jump_rate(snap - self.time)?;
                self.move_to(snap)?;
                self.record_snapshot();
                next += 1;
                continue;
            }
            let at = self.time + wait;
            self.accumulate_jump_rate(wait)?;
            self.move_to(at)?;
            if T::uniform(&mut self.events_rng) * total < branch {
                self.branch()?;
            } else {
                self.big_jump_proposal()?;
            }
            let n = self.count();
            if n > self.config.particle_cap {
                self.traj.aborted = Some(CapInfo { count: n, cap: self.config.particle_cap, time: self.time.f64() });
                break;
            }
        }
        if let Population::Synchronous { stepper, .. } = &self.pop {
            self.traj.motion.merge(&stepper.stats);
        }
        self.traj.motion.steps += self.motion_steps;
        Ok(())
    }

    /// Adds `rate · dt` to the compensator, with the rate at the start of
    /// the interval.
    fn accumulate_jump_rate(&mut self, dt: T) -> Result<()> {
        if !self.full || dt <= T::zero() {
            return Ok(());
        }
        let levy = self.spec.levy();
        let rate = if self.tail_homogeneous {
            T::lit(self.count() as f64) / self.kt * levy.tail_mass(T::zero())?
        } else {
            self.sync_all()?;
            let sum: T = match &self.pop {
                Population::Lazy { particles, .. } => particles.iter().map(|p| levy.tail_mass(p.pos)).sum::<Result<T>>()?,
                Population::Synchronous { positions, .. } => positions.iter().map(|&x| levy.tail_mass(x)).sum::<Result<T>>()?,
            };
            sum / self.kt
        };
        self.traj.jump_rate_integral = self.traj.jump_rate_integral + rate * dt;
        Ok(())
    }

    /// Sets the clock to `t`; the synchronous population is diffused there,
    /// lazy particles catch up when touched.
    fn move_to(&mut self, t: T) -> Result<()> {
        if let Population::Synchronous { positions, stepper, rng } = &mut self.pop {
            let dt = t - self.time;
            if dt > T::zero() && !positions.is_empty() {
                stepper.advance(self.spec, positions, dt, rng, None)?;
            }
        }
        self.time = t;
        Ok(())
    }

    fn sync_all(&mut self) -> Result<()> {
        if let Population::Lazy { particles, .. } = &mut self.pop {
            for p in particles.iter_mut() {
                self.motion_steps += advance_lazy(self.spec, self.a_const, self.config.stepper.dt, p, self.time);
            }
        }
        Ok(())
    }

    fn position(&mut self, i: usize) -> T {
        match &mut self.pop {
            Population::Lazy { particles, .. } => {
                let p = &mut particles[i];
                self.motion_steps += advance_lazy(self.spec, self.a_const, self.config.stepper.dt, p, self.time);
                p.pos
            }
            Population::Synchronous { positions, .. } => positions[i],
        }
    }

    fn record_snapshot(&mut self) {
        self.sync_all().expect("lazy motion does not fail");
        let positions = match &self.pop {
            Population::Lazy { particles, .. } => particles.iter().map(|p| p.pos).collect(),
            Population::Synchronous { positions, .. } => positions.clone(),
        };
        self.traj.snapshot_times.push(self.time);
        self.traj.states.push(ParticleState { positions, k: self.config.k, time: self.time });
    }

    fn add_copies(&mut self, x: T, extra: usize) {
        let now = self.time;
        match &mut self.pop {
            Population::Lazy { particles, streams, serial } => {
                for _ in 0..extra {
                    particles.push(LazyParticle { pos: x, time: now, rng: streams.counter_rng(*serial) });
                    *serial += 1;
                }
            }
            Population::Synchronous { positions, .. } => positions.extend(std::iter::repeat_n(x, extra)),
        }
    }

    fn remove(&mut self, i: usize) {
        match &mut self.pop {
            Population::Lazy { particles, .. } => {
                particles.swap_remove(i);
            }
            Population::Synchronous { positions, .. } => {
                positions.swap_remove(i);
            }
        }
    }

    fn log(&mut self, kind: EventKind, site: T, delta: i64, xi: Option<T>) {
        self.traj.event_count += 1;
        if self.config.record_events {
            self.traj.events.push(Event { time: self.time, kind, site, delta_count: delta, xi });
        }
    }

    fn branch(&mut self) -> Result<()> {
        let i = self.events_rng.random_range(0..self.count());
        let x = self.position(i);
        let j = {
            let law = self.laws.law_at(x)?;
            sample_offspring(&law, &mut self.events_rng)
        };
        if j == 0 {
            self.remove(i);
        } else if j > 1 {
            self.add_copies(x, j - 1);
        }
        self.log(EventKind::Branch, x, j as i64 - 1, None);
        Ok(())
    }

    /// Thinned big-jump proposal: uniform particle, accepted with
    /// probability `tail_mass(x) / bound`.
    fn big_jump_proposal(&mut self) -> Result<()> {
        let levy = self.spec.levy();
        let i = self.events_rng.random_range(0..self.count());
        let x = self.position(i);
        if !self.tail_homogeneous {
            let accept = levy.tail_mass(x)? / self.tail_bound;
            if T::uniform(&mut self.events_rng) >= accept {
                return Ok(());
            }
        }
        let Some(xi) = levy.sample_tail_size(x, &mut self.events_rng)? else { return Ok(()) };
        let added = jump_copies(xi, self.config.k);
        self.add_copies(x, added);
        self.traj.jump_sizes.push(xi);
        self.traj.jump_mass_error = self.traj.jump_mass_error + T::lit(added as f64) / self.kt - xi;
        self.log(EventKind::BigJump, x, added as i64, Some(xi));
        Ok(())
    }
}

/// Brings one independent particle from its own clock to `t`. With
/// constant `a` the Gaussian increment is exact in one draw. Returns the
/// number of steps taken.
fn advance_lazy<T: Real>(spec: &ModelSpec<T>, a_const: Option<T>, dt: T, p: &mut LazyParticle<T>, t: T) -> u64 {
    let duration = t - p.time;
    if duration <= T::zero() {
        return 0;
    }
    let steps = match a_const {
        Some(a) => {
            p.pos = p.pos + (a * duration).sqrt() * T::standard_normal(&mut p.rng);
            1
        }
        None => {
            let n = step_count(duration, dt);
            for s in 0..n {
                let h = if s + 1 == n { duration - dt * T::lit((n - 1) as f64) } else { dt };
                p.pos = p.pos + (spec.a(p.pos) * h).sqrt() * T::standard_normal(&mut p.rng);
            }
            n as u64
        }
    };
    p.time = t;
    steps
}
