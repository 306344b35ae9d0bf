//! Command-line surface tying the pipeline together: analyze
//! identifiability of a plant under a given or generated input, design
//! low-rank feedback, solve full LQR, simulate open or closed loops, run
//! the identification attacks, and drive Monte Carlo sweeps that emit
//! plot-ready CSV.
//!
//! Exit codes: 0 success, 1 domain error (typed message on stderr, JSON
//! with `--json-errors`), 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversary::{
    identify_graddesc, identify_markov, mc_rows_to_csv, monte_carlo, predict_markov,
    random_input, LearningRate, McFamily, McPlan, RankSweepParams, SampleSweepParams,
};
use crate::controller::{
    design_low_rank, lqr_infinite, simulate_closed_loop, unit_ball_sample, LowRankController,
    LqrCost, SnapshotConfig,
};
use crate::error::{Error, Result};
use crate::identifiability::{analyze, rank_constancy_probe, reparameterize, ProbeConfig};
use crate::numerics::Tolerances;
use crate::sensitivity::{build_bundle_fd, build_bundle_lti, g_ijk, LtiEvaluator};
use crate::system_model::{
    markov_params, matrix_to_rows, rows_to_matrix, simulate, LtiSystem, NoiseSpec, Trajectory,
};

#[derive(Parser)]
#[command(
    name = "unident",
    version,
    about = "Identifiability analysis and identifiability-breaking low-rank LQR design"
)]
struct Cli {
    /// Print domain errors as machine-readable JSON on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Decide per-parameter and dynamic identifiability from a system and an input.
    Analyze(AnalyzeArgs),
    /// Design a rank-limited feedback controller that hides the dynamics.
    Design(DesignArgs),
    /// Solve the full infinite-horizon LQR problem.
    Lqr(LqrArgs),
    /// Simulate an open- or closed-loop run and write the trajectory CSV.
    Simulate(SimulateArgs),
    /// Identify the plant from a logged trajectory.
    Attack(AttackArgs),
    /// Aggregate identification attacks over random plants and seeds.
    Montecarlo(MontecarloArgs),
    /// Run the built-in oracle checks and print one line per check.
    Selftest,
}

#[derive(Args)]
struct TolArgs {
    /// Relative singular-value cutoff for rank decisions.
    #[arg(long)]
    rank_eps: Option<f64>,
    /// Relative residual threshold for null-space and Hessian tests.
    #[arg(long)]
    residual_eps: Option<f64>,
}

impl TolArgs {
    fn build(&self) -> Result<Tolerances> {
        let mut tol = Tolerances::default();
        if let Some(e) = self.rank_eps {
            tol.rank_eps = e;
        }
        if let Some(e) = self.residual_eps {
            tol.residual_eps = e;
        }
        tol.validate()?;
        Ok(tol)
    }
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["input", "random_input"])))]
struct AnalyzeArgs {
    /// System description (JSON).
    #[arg(long)]
    system: PathBuf,
    /// Input CSV: either a full trajectory (t,u_*,y_*) or bare inputs (t,u_*).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Generate a random input instead of reading one.
    #[arg(long)]
    random_input: bool,
    /// Confine the random input to k independent channels; the remaining
    /// l-k channels are random linear combinations of the first k.
    #[arg(long, requires = "random_input", value_name = "K")]
    rank_input: Option<usize>,
    /// Number of steps for the generated input.
    #[arg(long, default_value_t = 50)]
    horizon: usize,
    #[arg(long, env = "UNIDENT_SEED", default_value_t = 0)]
    seed: u64,
    /// Re-test the Fisher-matrix rank at jittered parameters and report
    /// whether the constant-rank hypothesis held.
    #[arg(long)]
    probe: bool,
    /// Write the sensitivity matrices (W, F, H, Ja) as CSV plus a JSON
    /// sidecar describing the index conventions.
    #[arg(long, value_name = "DIR")]
    dump_sensitivity: Option<PathBuf>,
    /// Also report the orthogonal split of the parameter space into
    /// identifiable and unidentifiable coordinates.
    #[arg(long)]
    reparameterize: bool,
    #[command(flatten)]
    tol: TolArgs,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DesignArgs {
    #[arg(long)]
    system: PathBuf,
    /// Output weight: scalar (scaled identity) or path to a JSON matrix.
    #[arg(long, default_value = "1")]
    q: String,
    /// Input weight: scalar (scaled identity) or path to a JSON matrix.
    #[arg(long, default_value = "1")]
    r: String,
    /// Controller rank (default: min(l-1, p)).
    #[arg(long)]
    rank: Option<usize>,
    /// Number of snapshot runs for the POD basis (default: p).
    #[arg(long)]
    runs: Option<usize>,
    /// Snapshot window as start:end steps (default: 1:5p).
    #[arg(long, value_parser = parse_window)]
    window: Option<(usize, usize)>,
    #[arg(long, env = "UNIDENT_SEED", default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    tol: TolArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LqrArgs {
    #[arg(long)]
    system: PathBuf,
    #[arg(long, default_value = "1")]
    q: String,
    #[arg(long, default_value = "1")]
    r: String,
    #[command(flatten)]
    tol: TolArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum X0Mode {
    /// Start at the origin.
    Zero,
    /// Start at a seeded random point in the unit ball.
    Random,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    system: PathBuf,
    /// Controller JSON; when given the loop is closed with u = -Lr·V1ᵀ·x.
    #[arg(long)]
    controller: Option<PathBuf>,
    /// Open-loop input CSV (trajectory or bare inputs).
    #[arg(long, conflicts_with = "controller")]
    input: Option<PathBuf>,
    /// Generate a random open-loop input.
    #[arg(long, conflicts_with_all = ["controller", "input"])]
    random_input: bool,
    #[arg(long, requires = "random_input", value_name = "K")]
    rank_input: Option<usize>,
    /// Steps to simulate (generated input or closed loop).
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Initial state (closed-loop runs usually want `random`).
    #[arg(long, value_enum, default_value_t = X0Mode::Zero)]
    x0: X0Mode,
    /// Uniform output-noise amplitude (open loop only).
    #[arg(long, default_value_t = 0.0)]
    noise_v: f64,
    /// Uniform process-noise amplitude (open loop only).
    #[arg(long, default_value_t = 0.0)]
    noise_w: f64,
    #[arg(long, env = "UNIDENT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AttackMethod {
    /// Markov-parameter least squares.
    Markov,
    /// Gradient descent on the masked parameters (needs --system).
    Graddesc,
}

#[derive(Args)]
struct AttackArgs {
    /// Logged trajectory CSV.
    #[arg(long)]
    trajectory: PathBuf,
    #[arg(long, value_enum, default_value_t = AttackMethod::Markov)]
    method: AttackMethod,
    /// True system: template for graddesc, error reference for markov.
    #[arg(long)]
    system: Option<PathBuf>,
    /// Number of Markov parameters to estimate.
    #[arg(long, default_value_t = 20)]
    tm: usize,
    /// Ridge regularization (0 = exact minimum-norm solution).
    #[arg(long, default_value_t = 0.0)]
    ridge: f64,
    /// Fit only the first TRAIN steps.
    #[arg(long, requires = "test")]
    train: Option<usize>,
    /// Score predictions on the TEST steps after the training block.
    #[arg(long, requires = "train")]
    test: Option<usize>,
    /// Curvature-scaled learning-rate factor for graddesc.
    #[arg(long, default_value_t = 0.45)]
    lr_scale: f64,
    /// Fixed learning rate (overrides --lr-scale).
    #[arg(long)]
    lr_fixed: Option<f64>,
    /// Gradient-descent iterations.
    #[arg(long, default_value_t = 400)]
    iters: usize,
    #[arg(long, env = "UNIDENT_SEED", default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    tol: TolArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum McFamilyArg {
    /// Gradient-descent parameter error vs sample size, plus the
    /// Cramer-Rao noise floor.
    SampleSweep,
    /// Markov-LS held-out prediction error vs training-input rank.
    RankSweep,
}

#[derive(Args)]
struct MontecarloArgs {
    #[arg(long, value_enum)]
    family: McFamilyArg,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long, default_value_t = 4)]
    state_dim: usize,
    #[arg(long, default_value_t = 4)]
    input_dim: usize,
    #[arg(long, default_value_t = 4)]
    output_dim: usize,
    /// Spectral radius of the random plants (default 0.6 sample-sweep,
    /// 0.3 rank-sweep).
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, default_value_t = 0.02)]
    noise_v: f64,
    /// Sample sizes for the sample sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [10usize, 25, 50, 100])]
    sizes: Vec<usize>,
    /// Training-input ranks for the rank sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 4])]
    ranks: Vec<usize>,
    #[arg(long, default_value_t = 950)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    #[arg(long, default_value_t = 20)]
    tm: usize,
    #[arg(long, default_value_t = 0.45)]
    lr_scale: f64,
    #[arg(long)]
    lr_fixed: Option<f64>,
    #[arg(long, default_value_t = 400)]
    iters: usize,
    /// Worker threads (default: one per CPU; results do not depend on this).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, env = "UNIDENT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_window(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| "expected start:end".to_string())?;
    let start = a.trim().parse::<usize>().map_err(|e| e.to_string())?;
    let end = b.trim().parse::<usize>().map_err(|e| e.to_string())?;
    Ok((start, end))
}

/// Entry point: parse `argv`, dispatch, and map errors to exit codes.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let json_errors = cli.json_errors;
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            if json_errors {
                let payload =
                    serde_json::json!({ "error": e.code(), "detail": e.to_string() });
                eprintln!("{payload}");
            } else {
                eprintln!("error: {e}");
            }
            1
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Analyze(args) => cmd_analyze(args),
        Cmd::Design(args) => cmd_design(args),
        Cmd::Lqr(args) => cmd_lqr(args),
        Cmd::Simulate(args) => cmd_simulate(args),
        Cmd::Attack(args) => cmd_attack(args),
        Cmd::Montecarlo(args) => cmd_montecarlo(args),
        Cmd::Selftest => selftest(),
    }
}

fn emit_text(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            fs::write(path, format!("{text}\n")).map_err(|e| Error::io_at(path, e))?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

/// Scalar → scaled identity of the given size; anything else is read as a
/// JSON matrix file.
fn parse_weight(arg: &str, dim: usize, what: &str) -> Result<DMatrix<f64>> {
    if let Ok(v) = arg.trim().parse::<f64>() {
        return Ok(DMatrix::identity(dim, dim) * v);
    }
    let text = fs::read_to_string(arg)
        .map_err(|e| Error::Parse(format!("{what} weight {arg}: not a number and {e}")))?;
    let rows: Vec<Vec<f64>> = serde_json::from_str(&text)?;
    let m = rows_to_matrix(&rows, what)?;
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::Shape(format!(
            "{what} weight must be {dim} x {dim}, got {} x {}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m)
}

/// Read inputs from either a full trajectory CSV or a bare `t,u_1..u_l`
/// table.
fn load_inputs(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    let header = text.lines().next().unwrap_or("");
    if header.split(',').any(|h| h.trim() == "y_1") {
        return Ok(Trajectory::read_csv(text.as_bytes())?.u);
    }
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let head = rdr.headers()?.clone();
    if head.len() < 2 || head.get(0) != Some("t") {
        return Err(Error::Parse(format!(
            "{}: expected a header starting with t,u_1,...",
            path.display()
        )));
    }
    for (i, name) in head.iter().enumerate().skip(1) {
        if name != format!("u_{i}") {
            return Err(Error::Parse(format!(
                "{}: unexpected column {name} (want u_{i})",
                path.display()
            )));
        }
    }
    let l = head.len() - 1;
    let mut data: Vec<f64> = Vec::new();
    let mut t = 0usize;
    for rec in rdr.records() {
        let rec = rec?;
        let step: usize = rec
            .get(0)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::Parse(format!("row {t}: bad step index")))?;
        if step != t {
            return Err(Error::Parse(format!("row {t}: non-contiguous step {step}")));
        }
        for cu in 0..l {
            let v: f64 = rec
                .get(cu + 1)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::Parse(format!("row {t}: bad value in u_{}", cu + 1)))?;
            data.push(v);
        }
        t += 1;
    }
    if t == 0 {
        return Err(Error::Parse(format!("{}: no data rows", path.display())));
    }
    Ok(DMatrix::from_row_iterator(t, l, data))
}

/// Random input with only k independent channels: the first k are i.i.d.
/// uniform, the remaining l-k are random fixed linear combinations of them.
fn generated_input(
    t: usize,
    l: usize,
    k: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    let k = k.unwrap_or(l);
    if k == 0 || k > l {
        return Err(Error::Shape(format!("input rank must lie in 1..={l}, got {k}")));
    }
    if t == 0 {
        return Err(Error::Shape("need at least one step".into()));
    }
    let base = random_input(t, k, rng);
    if k == l {
        return Ok(base);
    }
    let coefs = DMatrix::from_fn(l - k, k, |_, _| 2.0 * rng.random::<f64>() - 1.0);
    let mut u = DMatrix::zeros(t, l);
    u.columns_mut(0, k).copy_from(&base);
    u.columns_mut(k, l - k).copy_from(&(&base * coefs.transpose()));
    Ok(u)
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let tol = args.tol.build()?;
    let sys = LtiSystem::load_json(&args.system)?;
    let u = match &args.input {
        Some(path) => load_inputs(path)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            generated_input(args.horizon, sys.l(), args.rank_input, &mut rng)?
        }
    };
    if u.ncols() != sys.l() {
        return Err(Error::Shape(format!(
            "input has {} channels, system expects {}",
            u.ncols(),
            sys.l()
        )));
    }
    let (t, n) = (u.nrows(), sys.n_params());
    if t * sys.m() < n {
        eprintln!(
            "warning: horizon gives {} output samples for {n} parameters; \
             rank decisions may be truncation artifacts",
            t * sys.m()
        );
    }
    let bundle = build_bundle_lti(&sys, &u)?;
    if let Some(dir) = &args.dump_sensitivity {
        fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
        bundle.export_debug(dir)?;
    }
    let mut report = analyze(&bundle, &tol)?;
    if args.probe {
        let cfg = ProbeConfig { seed: args.seed, ..ProbeConfig::default() };
        report.theorem1_hypothesis_ok = rank_constancy_probe(&sys, &u, &cfg, &tol)?;
    }
    let mut value = serde_json::to_value(&report)?;
    if args.reparameterize {
        let split = reparameterize(&bundle, &tol)?;
        value["reparameterization"] = serde_json::json!({
            "P": matrix_to_rows(&split.p),
            "identifiable_dim": split.r,
            "note": split.note,
        });
    }
    emit_text(args.out.as_deref(), &serde_json::to_string_pretty(&value)?)
}

fn cmd_design(args: DesignArgs) -> Result<()> {
    let tol = args.tol.build()?;
    let sys = LtiSystem::load_json(&args.system)?;
    let q = parse_weight(&args.q, sys.m(), "Q")?;
    let r = parse_weight(&args.r, sys.l(), "R")?;
    let cost = LqrCost::new(q, r, None, crate::controller::Horizon::Infinite)?;
    let mut snap = SnapshotConfig::default_for(&sys);
    if let Some(runs) = args.runs {
        snap.m_runs = runs;
    }
    if let Some((start, end)) = args.window {
        snap.t_start = start;
        snap.t_end = end;
    }
    let ctl = design_low_rank(&sys, &cost, args.rank, &snap, args.seed, &tol)?;
    emit_text(args.out.as_deref(), &ctl.to_json_pretty()?)
}

fn cmd_lqr(args: LqrArgs) -> Result<()> {
    let tol = args.tol.build()?;
    let sys = LtiSystem::load_json(&args.system)?;
    let q = parse_weight(&args.q, sys.m(), "Q")?;
    let r = parse_weight(&args.r, sys.l(), "R")?;
    let cost = LqrCost::new(q, r, None, crate::controller::Horizon::Infinite)?;
    let sol = lqr_infinite(&sys, &cost, &tol)?;
    let payload = serde_json::json!({
        "gain": matrix_to_rows(&sol.gain),
        "p": matrix_to_rows(&sol.p),
        "iterations": sol.iterations,
    });
    emit_text(args.out.as_deref(), &serde_json::to_string_pretty(&payload)?)
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let sys = LtiSystem::load_json(&args.system)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let x0 = match args.x0 {
        X0Mode::Zero => DVector::zeros(sys.p()),
        X0Mode::Random => unit_ball_sample(&mut rng, sys.p()),
    };
    let traj = match &args.controller {
        Some(path) => {
            if args.noise_v != 0.0 || args.noise_w != 0.0 {
                return Err(Error::Parse(
                    "closed-loop simulation is noise-free; drop --noise-v/--noise-w".into(),
                ));
            }
            let ctl = LowRankController::load_json(path)?;
            simulate_closed_loop(&sys, &ctl.effective_feedback(), &x0, args.steps)?
        }
        None => {
            let u = match &args.input {
                Some(path) => load_inputs(path)?,
                None if args.random_input => {
                    generated_input(args.steps, sys.l(), args.rank_input, &mut rng)?
                }
                None => {
                    return Err(Error::Parse(
                        "open-loop simulation needs --input or --random-input".into(),
                    ))
                }
            };
            let noise = (args.noise_v != 0.0 || args.noise_w != 0.0).then(|| NoiseSpec {
                w_amp: args.noise_w,
                v_amp: args.noise_v,
                seed: rng.random::<u64>(),
            });
            simulate(&sys.with_x0(x0)?, &u, noise.as_ref())?
        }
    };
    match &args.out {
        Some(path) => traj.save_csv(path),
        None => traj.write_csv(std::io::stdout().lock()),
    }
}

fn cmd_attack(args: AttackArgs) -> Result<()> {
    let tol = args.tol.build()?;
    let traj = Trajectory::load_csv(&args.trajectory)?;
    let truth = match &args.system {
        Some(path) => Some(LtiSystem::load_json(path)?),
        None => None,
    };
    let result = match args.method {
        AttackMethod::Markov => {
            let split = args.train.zip(args.test);
            identify_markov(&traj, args.tm, args.ridge, split, truth.as_ref(), &tol)?
        }
        AttackMethod::Graddesc => {
            let template = truth.ok_or_else(|| {
                Error::Parse("graddesc needs --system as the template".into())
            })?;
            let lr = match args.lr_fixed {
                Some(a) => LearningRate::Fixed(a),
                None => LearningRate::AutoScaled(args.lr_scale),
            };
            identify_graddesc(&template, &traj, lr, args.iters, args.seed)?
        }
    };
    emit_text(args.out.as_deref(), &result.to_json_pretty()?)
}

fn cmd_montecarlo(args: MontecarloArgs) -> Result<()> {
    let lr = match args.lr_fixed {
        Some(a) => LearningRate::Fixed(a),
        None => LearningRate::AutoScaled(args.lr_scale),
    };
    let family = match args.family {
        McFamilyArg::SampleSweep => McFamily::SampleSweepGradDescent(SampleSweepParams {
            p: args.state_dim,
            l: args.input_dim,
            m: args.output_dim,
            rho: args.rho.unwrap_or(0.6),
            v_amp: args.noise_v,
            sizes: args.sizes.clone(),
            lr,
            iters: args.iters,
        }),
        McFamilyArg::RankSweep => McFamily::RankSweepMarkov(RankSweepParams {
            p: args.state_dim,
            l: args.input_dim,
            m: args.output_dim,
            rho: args.rho.unwrap_or(0.3),
            v_amp: args.noise_v,
            ranks: args.ranks.clone(),
            train: args.train,
            test: args.test,
            t_m: args.tm,
        }),
    };
    let rows = monte_carlo(&McPlan { family, runs: args.runs }, args.seed, args.jobs)?;
    match &args.out {
        Some(path) => {
            mc_rows_to_csv(&rows, fs::File::create(path).map_err(|e| Error::io_at(path, e))?)
        }
        None => mc_rows_to_csv(&rows, std::io::stdout().lock()),
    }
}

/// Fixed demo plant used by the self-test battery.
fn demo_system() -> LtiSystem {
    let a = DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.0, 0.3, 0.2, 0.1, 0.0, 0.4]);
    let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]);
    let c = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    LtiSystem::fully_masked(a, b, c).expect("demo system is well-formed")
}

fn selftest() -> Result<()> {
    let tol = Tolerances::default();
    let mut failures = 0usize;
    let mut check = |name: &str, outcome: std::result::Result<(), String>| match outcome {
        Ok(()) => println!("ok   {name}"),
        Err(detail) => {
            failures += 1;
            println!("FAIL {name}: {detail}");
        }
    };

    // Closed-form scalar Riccati solution against the iterative solver.
    check("scalar-riccati", (|| {
        let sys = LtiSystem::fully_masked(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .map_err(|e| e.to_string())?;
        let cost = LqrCost::scalars(1.0, 1.0, 1, 1).map_err(|e| e.to_string())?;
        let p_star = (0.25 + 4.0625_f64.sqrt()) / 2.0;
        let l_star = 0.5 * p_star / (1.0 + p_star);
        let sol = lqr_infinite(&sys, &cost, &tol).map_err(|e| e.to_string())?;
        let dp = (sol.p[(0, 0)] - p_star).abs();
        let dl = (sol.gain[(0, 0)] - l_star).abs();
        if dp <= 1e-9 && dl <= 1e-9 {
            Ok(())
        } else {
            Err(format!("|dP| = {dp:e}, |dL| = {dl:e}"))
        }
    })());

    // With A = I the delay-d derivative of M_d in an A-entry collapses to
    // d · (column of C) · (row of B).
    check("derivative-table-identity-a", (|| {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let c = DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 2.0, 0.25]);
        let sys = LtiSystem::fully_masked(DMatrix::identity(2, 2), b.clone(), c.clone())
            .map_err(|e| e.to_string())?;
        // Parameter 1 in row-major A order is A[0][1]: column 0 of C times
        // row 1 of B.
        let got = g_ijk(&sys, 1, 3).map_err(|e| e.to_string())?;
        let want = c.column(0) * b.row(1) * 3.0;
        let diff = (&got - &want).norm();
        if diff <= 1e-12 {
            Ok(())
        } else {
            Err(format!("residual {diff:e}"))
        }
    })());

    // Convolving the impulse response reproduces the simulated outputs.
    check("markov-convolution", (|| {
        let sys = demo_system();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = random_input(40, 2, &mut rng);
        let traj = simulate(&sys, &u, None).map_err(|e| e.to_string())?;
        let y_hat = predict_markov(&markov_params(&sys, 40), &u);
        let diff = (&y_hat - &traj.y).norm();
        if diff <= 1e-10 {
            Ok(())
        } else {
            Err(format!("residual {diff:e}"))
        }
    })());

    // Finite-difference sensitivities agree with the analytic ones.
    check("fd-cross-check-w", (|| {
        let sys = demo_system();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let u = random_input(12, 2, &mut rng);
        let exact = build_bundle_lti(&sys, &u).map_err(|e| e.to_string())?;
        let eval = LtiEvaluator::new(sys.clone());
        let fd = build_bundle_fd(&eval, &sys.extract_params(), &u, crate::sensitivity::FD_STEP)
            .map_err(|e| e.to_string())?;
        let rel = (&exact.w - &fd.w).norm() / exact.w.norm();
        if rel <= 1e-6 {
            Ok(())
        } else {
            Err(format!("relative W difference {rel:e}"))
        }
    })());

    // The eigenbasis split maps the Fisher matrix's null directions to the
    // trailing coordinates.
    check("split-reparameterization", (|| {
        let sys = demo_system();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let u = generated_input(30, 2, Some(1), &mut rng).map_err(|e| e.to_string())?;
        let bundle = build_bundle_lti(&sys, &u).map_err(|e| e.to_string())?;
        let split = reparameterize(&bundle, &tol).map_err(|e| e.to_string())?;
        let n = bundle.n;
        let trailing = split.p.columns(split.r, n - split.r).into_owned();
        let rel = (&bundle.f * &trailing).norm() / bundle.f.norm();
        if split.r < n && rel <= 1e-7 {
            Ok(())
        } else {
            Err(format!("identifiable dim {} of {n}, residual {rel:e}", split.r))
        }
    })());

    // An unexcited plant yields the all-zero minimum-norm estimate.
    check("zero-input-attack", (|| {
        let sys = demo_system();
        let u = DMatrix::zeros(30, 2);
        let traj = simulate(&sys, &u, None).map_err(|e| e.to_string())?;
        let res = identify_markov(&traj, 5, 0.0, None, Some(&sys), &tol)
            .map_err(|e| e.to_string())?;
        let norm: f64 = res.markov_estimate.iter().map(|m| m.norm()).sum();
        if norm == 0.0 && res.regressor_rank == Some(0) {
            Ok(())
        } else {
            Err(format!("estimate norm {norm:e}"))
        }
    })());

    // Designing twice with one seed gives byte-identical output.
    check("design-determinism", (|| {
        let sys = demo_system();
        let cost = LqrCost::scalars(1.0, 1.0, 2, 2).map_err(|e| e.to_string())?;
        let snap = SnapshotConfig::default_for(&sys);
        let once = design_low_rank(&sys, &cost, Some(1), &snap, 7, &tol)
            .and_then(|c| c.to_json_pretty())
            .map_err(|e| e.to_string())?;
        let twice = design_low_rank(&sys, &cost, Some(1), &snap, 7, &tol)
            .and_then(|c| c.to_json_pretty())
            .map_err(|e| e.to_string())?;
        if once == twice {
            Ok(())
        } else {
            Err("outputs differ".into())
        }
    })());

    if failures == 0 {
        Ok(())
    } else {
        Err(Error::Eval(format!("{failures} self-test check(s) failed")))
    }
}
