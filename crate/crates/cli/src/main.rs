use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sdsm_core::acceptance;
use sdsm_core::branching::convergence_report;
use sdsm_core::dual::{dual_moment, DualOptions};
use sdsm_core::harness::{
    estimates_table, format_float, load_spec, positions_table, snapshot_table, verdict_table, write_events, CsvTable,
    MethodEstimate, RunManifest,
};
use sdsm_core::moments::{
    covariance_density, crosscheck, first_moment, second_moment, CrossCheckOptions, Method, MomentOptions, MomentQuery,
    TestFunction,
};
use sdsm_core::motion::StepperConfig;
use sdsm_core::particles::{run_ensemble, Engine, RunConfig, Trajectory};
use sdsm_core::rng::StreamKey;
use sdsm_core::{Mode, ModelSpec64};

#[derive(Parser)]
#[command(name = "sdsm", version, about = "Superprocesses with dependent spatial motion: simulation and moment checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the particle system and write snapshots, positions and events.
    Simulate(SimulateArgs),
    /// Estimate E<f, X_t^m> through the dual process.
    Dual(DualArgs),
    /// First or second moments, or the covariance density.
    Moments(MomentsArgs),
    /// Sup-grid error of the rescaled branching mechanism for several k.
    Converge(ConvergeArgs),
    /// Cross-check particle, dual and semigroup estimators of one moment.
    Compare(CompareArgs),
    /// Run the acceptance criteria.
    Acceptance(AcceptanceArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Killed,
    Full,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Killed => Mode::Killed,
            ModeArg::Full => Mode::Full,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Model file (TOML).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Overrides the mode in the model file.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Euler step.
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
}

impl Common {
    fn load(&self) -> Result<ModelSpec64> {
        load_spec(&self.spec).with_context(|| format!("loading {}", self.spec.display()))
    }

    fn mode(&self, spec: &ModelSpec64) -> Mode {
        self.mode.map(Mode::from).unwrap_or(spec.mode())
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 100)]
    paths: usize,
    /// Mass unit k; defaults to the model file's.
    #[arg(long)]
    k: Option<u32>,
    /// Per-particle branch rate; defaults to λ_k.
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated snapshot times; defaults to 0 and the horizon.
    #[arg(long, value_delimiter = ',')]
    snapshots: Vec<f64>,
    #[arg(long)]
    synchronous: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write every particle position.
    #[arg(long)]
    positions: bool,
}

#[derive(Args)]
struct DualArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 2)]
    m: usize,
    /// `constant`, `coordinate-sum` or `bump-product:CENTER:WIDTH`.
    #[arg(long, default_value = "constant")]
    f: String,
    #[arg(long)]
    t: f64,
    #[arg(long, default_value_t = 10_000)]
    outer: usize,
    #[arg(long, default_value_t = 1)]
    inner: usize,
    /// Integrate the outer point exactly over atoms of μ.
    #[arg(long)]
    enumerate: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MomentsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1)]
    order: u32,
    /// Test function: `one`, `constant:V`, `bump:C:W`, `indicator:LO:HI`, `cos:F`, `x`, `x2`.
    #[arg(long, default_value = "one")]
    f: String,
    #[arg(long)]
    g: Option<String>,
    /// Earlier time for order 2; defaults to `t`.
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    t: f64,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "semigroup-mc")]
    method: Vec<String>,
    #[arg(long, default_value_t = 10_000)]
    paths: usize,
    #[arg(long, default_value_t = 32)]
    u_nodes: usize,
    /// Estimate the covariance density at `Y1,Y2` instead.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    density: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvergeArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
    k: Vec<u32>,
    #[arg(long, default_value_t = 10.0)]
    z_max: f64,
    #[arg(long, default_value_t = 101)]
    z_points: usize,
    /// Sites: `LO,HI,N`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-5,5,101")]
    x: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1)]
    order: u32,
    #[arg(long, default_value = "one")]
    f: String,
    #[arg(long)]
    g: Option<String>,
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    t: f64,
    #[arg(long, default_value_t = 4000)]
    paths: usize,
    #[arg(long, default_value_t = 2000)]
    particle_paths: usize,
    #[arg(long, default_value_t = 100)]
    k: u32,
    #[arg(long, default_value_t = 32)]
    u_nodes: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AcceptanceArgs {
    #[arg(long, default_value_t = acceptance::DEFAULT_SEED)]
    seed: u64,
    /// Comma-separated criterion numbers; all by default.
    #[arg(long, value_delimiter = ',')]
    only: Vec<u32>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(table: &CsvTable, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => table.write(p)?,
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&table.to_bytes()?)?;
        }
    }
    Ok(())
}

type Functional = Box<dyn Fn(&[f64]) -> f64 + Sync>;

fn dual_function(name: &str) -> Result<Functional> {
    let parts: Vec<&str> = name.split(':').collect();
    Ok(match parts.as_slice() {
        ["constant"] => Box::new(|_| 1.0),
        ["coordinate-sum"] => Box::new(|x| x.iter().sum()),
        ["bump-product", c, w] => {
            let (c, w): (f64, f64) = (c.parse()?, w.parse()?);
            Box::new(move |x| x.iter().map(|&v| (-((v - c) / w).powi(2)).exp()).product())
        }
        _ => bail!("unknown dual test function {name:?}"),
    })
}

fn simulate(args: &SimulateArgs, argv: Vec<String>) -> Result<bool> {
    let spec = args.common.load()?;
    let mut cfg = RunConfig::new(&spec);
    cfg.mode = args.common.mode(&spec);
    cfg.stepper = StepperConfig::with_dt(args.common.dt);
    cfg.record_events = true;
    if let Some(k) = args.k {
        cfg.k = k;
    }
    cfg.lambda = args.lambda;
    if !args.snapshots.is_empty() {
        cfg.snapshot_times = args.snapshots.clone();
    }
    if args.synchronous {
        cfg.engine = Engine::Synchronous;
    }
    let start = Instant::now();
    let root = StreamKey::root(args.common.seed);
    let trajs: Vec<Trajectory<f64>> =
        run_ensemble(&spec, &cfg, args.paths, &root, |t| t.into_result())?.into_iter().collect::<Result<_, _>>()?;
    std::fs::create_dir_all(&args.out)?;
    let mut manifest = RunManifest::new(spec.hash(), argv, args.common.seed);
    manifest.outside_uniqueness_regime = spec.outside_uniqueness_regime();
    for p in [0, args.paths.saturating_sub(1)] {
        let key = root.index(p as u64);
        manifest.streams.insert(format!("path {p}"), key.stream_id());
    }
    snapshot_table(&trajs)?.write(args.out.join("snapshots.csv"))?;
    manifest.record_output(&args.out, "snapshots.csv")?;
    if args.positions {
        positions_table(&trajs)?.write(args.out.join("positions.csv"))?;
        manifest.record_output(&args.out, "positions.csv")?;
    }
    let mut events = Vec::new();
    write_events(&mut events, &trajs)?;
    std::fs::write(args.out.join("events.jsonl"), events)?;
    manifest.record_output(&args.out, "events.jsonl")?;
    manifest.wall_clock_ms = start.elapsed().as_secs_f64() * 1e3;
    manifest.write(args.out.join("manifest.json"))?;
    Ok(true)
}

fn dual(args: &DualArgs) -> Result<bool> {
    let spec = args.common.load()?;
    let f = dual_function(&args.f)?;
    let mut opts = DualOptions::new(args.outer, args.common.mode(&spec));
    opts.inner_paths = args.inner;
    opts.stepper = StepperConfig::with_dt(args.common.dt);
    opts.enumerate_atoms = args.enumerate;
    let start = Instant::now();
    let e = dual_moment(&spec, args.m, &*f, spec.initial(), args.t, &opts, &StreamKey::root(args.common.seed))?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    emit(&estimates_table(&[(MethodEstimate::new("dual-mc", e), ms)])?, args.out.as_deref())?;
    Ok(true)
}

fn moments(args: &MomentsArgs) -> Result<bool> {
    let spec = args.common.load()?;
    let mut opts = MomentOptions::new(args.paths, args.common.mode(&spec));
    opts.stepper = StepperConfig::with_dt(args.common.dt);
    opts.u_nodes = args.u_nodes;
    let key = StreamKey::root(args.common.seed);
    let mu = spec.initial();
    if let Some(y) = &args.density {
        if y.len() != 2 {
            bail!("--density takes Y1,Y2");
        }
        let start = Instant::now();
        let d = covariance_density(&spec, args.t, y[0], y[1], mu, &opts, &key)?;
        let mut table = CsvTable::new(&["method", "estimator_value", "se", "n", "bandwidth", "smoothing_bias", "runtime_ms"]);
        table.push(vec![
            "kde".into(),
            format_float(d.estimate.value),
            format_float(d.estimate.se),
            d.estimate.n.to_string(),
            format_float(d.bandwidth),
            format_float(d.smoothing_bias),
            format_float(start.elapsed().as_secs_f64() * 1e3),
        ])?;
        emit(&table, args.out.as_deref())?;
        return Ok(true);
    }
    let f: TestFunction = args.f.parse()?;
    let g: TestFunction = args.g.as_deref().unwrap_or(&args.f).parse()?;
    let (fe, ge) = (|x: f64| f.eval(x), |x: f64| g.eval(x));
    let mut rows = Vec::new();
    for name in &args.method {
        let method: Method = name.parse()?;
        let start = Instant::now();
        let e = match args.order {
            1 => first_moment(&spec, &fe, args.t, mu, method, &opts, &key.child(name))?,
            2 => second_moment(&spec, &fe, &ge, args.s.unwrap_or(args.t), args.t, mu, method, &opts, &key.child(name))?.total,
            o => bail!("order must be 1 or 2, got {o}"),
        };
        rows.push((MethodEstimate::new(method.name(), e), start.elapsed().as_secs_f64() * 1e3));
    }
    emit(&estimates_table(&rows)?, args.out.as_deref())?;
    Ok(true)
}

fn converge(args: &ConvergeArgs) -> Result<bool> {
    let spec: ModelSpec64 = load_spec(&args.spec).with_context(|| format!("loading {}", args.spec.display()))?;
    if args.x.len() != 3 {
        bail!("--x takes LO,HI,N");
    }
    let n = args.x[2] as usize;
    if n < 1 {
        bail!("need at least one site");
    }
    let xs: Vec<f64> = (0..n).map(|i| if n == 1 { args.x[0] } else { args.x[0] + (args.x[1] - args.x[0]) * i as f64 / (n - 1) as f64 }).collect();
    let report = convergence_report(&spec, &args.k, args.z_max, &xs, args.z_points)?;
    let mut table = CsvTable::new(&["k", "sup_error", "derivative_error", "fd_derivative_error"]);
    for (i, k) in report.k_values.iter().enumerate() {
        table.push(vec![
            k.to_string(),
            format_float(report.sup_errors[i]),
            format_float(report.derivative_errors[i]),
            format_float(report.fd_derivative_errors[i]),
        ])?;
    }
    emit(&table, args.out.as_deref())?;
    Ok(true)
}

fn compare(args: &CompareArgs) -> Result<bool> {
    let spec = args.common.load()?;
    let mut moments = MomentOptions::new(args.paths, args.common.mode(&spec));
    moments.stepper = StepperConfig::with_dt(args.common.dt);
    moments.u_nodes = args.u_nodes;
    let query = MomentQuery {
        order: args.order,
        f: args.f.parse()?,
        g: args.g.as_deref().map(str::parse).transpose()?,
        s: args.s.unwrap_or(args.t),
        t: args.t,
    };
    let opts = CrossCheckOptions { moments, particle_paths: args.particle_paths, k: args.k };
    let verdict = crosscheck(&spec, &query, &opts, &StreamKey::root(args.common.seed))?;
    emit(&verdict_table(std::slice::from_ref(&verdict))?, args.out.as_deref())?;
    Ok(verdict.pass)
}

fn run_acceptance(args: &AcceptanceArgs) -> Result<bool> {
    let ids = if args.only.is_empty() { acceptance::CRITERIA.to_vec() } else { args.only.clone() };
    let mut table = CsvTable::new(&["criterion", "name", "pass", "runtime_ms", "detail"]);
    let mut all = true;
    for id in ids {
        let o = acceptance::run(id, args.seed)?;
        println!("{}", o.line());
        all &= o.pass;
        table.push(vec![o.id.to_string(), o.name.to_string(), o.pass.to_string(), format_float(o.runtime_ms), o.detail])?;
    }
    if let Some(p) = &args.out {
        table.write(p)?;
    }
    Ok(all)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SDSM_THREADS") {
        let n: usize = v.parse().with_context(|| format!("SDSM_THREADS={v:?} is not a thread count"))?;
        if n == 0 {
            bail!("SDSM_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match &cli.command {
        Command::Simulate(a) => simulate(a, argv),
        Command::Dual(a) => dual(a),
        Command::Moments(a) => moments(a),
        Command::Converge(a) => converge(a),
        Command::Compare(a) => compare(a),
        Command::Acceptance(a) => run_acceptance(a),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
