//! The identification adversary: given logged input/output data, estimate
//! the plant by Markov-parameter least squares or by gradient descent on the
//! masked parameters, and measure how well the estimate predicts held-out
//! data. Monte Carlo drivers aggregate these attacks over random plants and
//! noise to produce the sample-size and controller-rank sweeps.
//!
//! The Markov least-squares identifier is the stronger linear adversary: it
//! fits the impulse-response coefficients directly, so any failure to
//! recover the dynamics is a property of the data (rank-limited excitation),
//! not of the optimizer.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{least_squares_min_norm, svd_rank, Tolerances};
use crate::sensitivity::output_sensitivity_w;
use crate::system_model::{
    markov_params, matrix_to_rows, simulate, LtiSystem, MaskEntry, MatrixId, NoiseSpec, Trajectory,
};

/// Which identifier produced a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentMethod {
    MarkovLs,
    GradDescent,
}

/// Outcome of one identification attack.
#[derive(Debug, Clone, Serialize)]
#[serde(into = "IdentResultRaw")]
pub struct IdentResult {
    pub method: IdentMethod,
    /// Estimated Markov parameters M_0..M_{T_m-1} (Markov method, or derived
    /// from the estimated parameters for gradient descent).
    pub markov_estimate: Vec<DMatrix<f64>>,
    /// Estimated parameter vector (gradient descent only).
    pub theta_estimate: Option<DVector<f64>>,
    /// ‖θ̂ − θ*‖/‖θ*‖ against the known truth (gradient descent only).
    pub param_error: Option<f64>,
    /// max_k ‖M̂_k − M_k‖_F / (1 + ‖M_k‖_F) against the known truth.
    pub markov_error: Option<f64>,
    /// RMS output prediction error (held-out split when given, otherwise
    /// in-sample).
    pub pred_error: f64,
    /// Numerical rank of the training regressor (Markov method only).
    pub regressor_rank: Option<usize>,
}

#[derive(Serialize)]
struct IdentResultRaw {
    method: IdentMethod,
    markov_estimate: Vec<Vec<Vec<f64>>>,
    theta_estimate: Option<Vec<f64>>,
    param_error: Option<f64>,
    markov_error: Option<f64>,
    pred_error: f64,
    regressor_rank: Option<usize>,
}

impl From<IdentResult> for IdentResultRaw {
    fn from(r: IdentResult) -> Self {
        IdentResultRaw {
            method: r.method,
            markov_estimate: r.markov_estimate.iter().map(matrix_to_rows).collect(),
            theta_estimate: r.theta_estimate.map(|v| v.iter().copied().collect()),
            param_error: r.param_error,
            markov_error: r.markov_error,
            pred_error: r.pred_error,
            regressor_rank: r.regressor_rank,
        }
    }
}

impl IdentResult {
    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Convolution prediction: ŷ(k) = Σ_{d < min(k, T_m)} M_d·u(k-1-d).
pub fn predict_markov(markov: &[DMatrix<f64>], u: &DMatrix<f64>) -> DMatrix<f64> {
    let t = u.nrows();
    let m = markov.first().map(|mk| mk.nrows()).unwrap_or(0);
    let mut y = DMatrix::zeros(t, m);
    for k in 0..t {
        for (d, mk) in markov.iter().enumerate().take(k) {
            let contrib = mk * u.row(k - 1 - d).transpose();
            for cy in 0..m {
                y[(k, cy)] += contrib[cy];
            }
        }
    }
    y
}

/// max_k ‖M̂_k − M_k‖_F / (1 + ‖M_k‖_F).
pub fn markov_error(estimate: &[DMatrix<f64>], reference: &[DMatrix<f64>]) -> f64 {
    estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| (e - r).norm() / (1.0 + r.norm()))
        .fold(0.0, f64::max)
}

/// Same error restricted to the column space of the training inputs:
/// max_k ‖(M̂_k − M_k)·Π‖_F / (1 + ‖M_k‖_F), with Π the orthogonal projector
/// onto span{u(t)}. On rank-limited data the estimate can be exact here
/// while being arbitrary off the excited subspace.
pub fn restricted_markov_error(
    estimate: &[DMatrix<f64>],
    reference: &[DMatrix<f64>],
    u_train: &DMatrix<f64>,
    tol: &Tolerances,
) -> Result<f64> {
    let rank = svd_rank(u_train, tol)?;
    let l = u_train.ncols();
    let projector = if rank == 0 {
        DMatrix::zeros(l, l)
    } else {
        let svd = u_train.clone().svd(false, true);
        let v_t = svd.v_t.as_ref().expect("svd with V");
        let vr = v_t.rows(0, rank).transpose(); // l x rank
        &vr * vr.transpose()
    };
    Ok(estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| ((e - r) * &projector).norm() / (1.0 + r.norm()))
        .fold(0.0, f64::max))
}

fn rms(diff: &DMatrix<f64>) -> f64 {
    if diff.is_empty() {
        return 0.0;
    }
    (diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64).sqrt()
}

/// Identify the first `t_m` Markov parameters from a logged run by linear
/// least squares on the convolution model.
///
/// The regressor row at time k stacks `u(k-1)ᵀ .. u(k-t_m)ᵀ` (zero-padded
/// before time 0), so the fit needs a zero initial state. With `ridge = 0`
/// the minimum-norm solution exposes the null-space ambiguity of
/// rank-deficient excitation deterministically; `ridge > 0` solves the
/// regularized normal equations instead. `split = Some((train, test))` fits
/// on the first `train` steps and reports `pred_error` on the next `test`
/// steps; the prediction convolves over the full input history.
pub fn identify_markov(
    traj: &Trajectory,
    t_m: usize,
    ridge: f64,
    split: Option<(usize, usize)>,
    truth: Option<&LtiSystem>,
    tol: &Tolerances,
) -> Result<IdentResult> {
    let (t, l) = (traj.t(), traj.l());
    if t_m == 0 || t_m > t {
        return Err(Error::Shape(format!(
            "need 1 <= t_m <= T, got t_m = {t_m} with T = {t}"
        )));
    }
    if !ridge.is_finite() || ridge < 0.0 {
        return Err(Error::Parse("ridge must be finite and >= 0".into()));
    }
    if let Some(x) = &traj.x {
        if x.row(0).iter().any(|v| *v != 0.0) {
            return Err(Error::UnsupportedInitialState);
        }
    }
    let (n_train, n_test) = match split {
        Some((train, test)) => {
            if train == 0 || test == 0 || train + test > t {
                return Err(Error::Shape(format!(
                    "split ({train}, {test}) does not fit a {t}-step trajectory"
                )));
            }
            (train, test)
        }
        None => (t, 0),
    };

    // Block-Toeplitz regressor over the full horizon; fit on the head.
    let phi = DMatrix::from_fn(t, t_m * l, |k, col| {
        let (d, cu) = (col / l, col % l);
        if k > d {
            traj.u[(k - 1 - d, cu)]
        } else {
            0.0
        }
    });
    let phi_train = phi.rows(0, n_train).into_owned();
    let y_train = traj.y.rows(0, n_train).into_owned();
    let regressor_rank = svd_rank(&phi_train, tol)?;

    let x = if ridge > 0.0 {
        let mut normal = phi_train.transpose() * &phi_train;
        for i in 0..normal.nrows() {
            normal[(i, i)] += ridge;
        }
        let chol = nalgebra::Cholesky::new(normal).ok_or(Error::SingularGain)?;
        chol.solve(&(phi_train.transpose() * &y_train))
    } else {
        least_squares_min_norm(&phi_train, &y_train, tol)?
    };
    let markov_estimate: Vec<DMatrix<f64>> = (0..t_m)
        .map(|d| x.rows(d * l, l).transpose())
        .collect();

    let y_hat = &phi * &x;
    let pred_error = if n_test > 0 {
        rms(&(y_hat.rows(n_train, n_test) - traj.y.rows(n_train, n_test)))
    } else {
        rms(&(&y_hat - &traj.y))
    };
    let markov_err = truth.map(|sys| markov_error(&markov_estimate, &markov_params(sys, t_m)));

    Ok(IdentResult {
        method: IdentMethod::MarkovLs,
        markov_estimate,
        theta_estimate: None,
        param_error: None,
        markov_error: markov_err,
        pred_error,
        regressor_rank: Some(regressor_rank),
    })
}

/// Step-size policy for the gradient-descent identifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LearningRate {
    /// Constant step size.
    Fixed(f64),
    /// `c / λ_max(WᵀW)` with W evaluated once at the initial guess — scales
    /// the step to the local curvature of the squared-error loss.
    AutoScaled(f64),
}

impl Default for LearningRate {
    fn default() -> Self {
        LearningRate::AutoScaled(0.45)
    }
}

/// Divergence guard for the gradient-descent loss.
pub const GRADDESC_LOSS_LIMIT: f64 = 1e12;

/// Identify the masked parameters by gradient descent on the squared output
/// error, starting from the true parameters perturbed by ±10% relative
/// (seeded), the attacker-with-a-warm-start benchmark.
///
/// The template system carries both the mask and the true parameters, which
/// also price `param_error` and `markov_error` on the result. The gradient
/// is `2·Wᵀ(ŷ − y)` with W from the forward sensitivity recursion at the
/// current estimate. A loss above [`GRADDESC_LOSS_LIMIT`] aborts with a
/// typed divergence error.
pub fn identify_graddesc(
    template: &LtiSystem,
    traj: &Trajectory,
    lr: LearningRate,
    iters: usize,
    seed: u64,
) -> Result<IdentResult> {
    let (t, m) = (traj.t(), traj.m());
    if traj.l() != template.l() || m != template.m() {
        return Err(Error::Shape(format!(
            "trajectory is {} in / {} out, system expects {} / {}",
            traj.l(),
            m,
            template.l(),
            template.m()
        )));
    }
    let theta_star = template.extract_params();
    let n = theta_star.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = DVector::from_fn(n, |i, _| {
        let span = 0.1 * (1.0 + theta_star[i].abs());
        theta_star[i] + span * (2.0 * rng.random::<f64>() - 1.0)
    });

    let flat_y = |y: &DMatrix<f64>| DVector::from_fn(t * m, |r, _| y[(r / m, r % m)]);
    let y_logged = flat_y(&traj.y);
    // Simulation blow-ups on a bad parameter guess are divergence, not
    // malformed input.
    let outputs_at = |th: &DVector<f64>| -> Result<DMatrix<f64>> {
        let sys = template.apply_params(th)?;
        match simulate(&sys, &traj.u, None) {
            Ok(run) => Ok(run.y),
            Err(Error::InvalidMatrix(_)) => Err(Error::Diverged {
                loss: f64::INFINITY,
                limit: GRADDESC_LOSS_LIMIT,
            }),
            Err(e) => Err(e),
        }
    };

    let step = match lr {
        LearningRate::Fixed(a) if a > 0.0 && a.is_finite() => a,
        LearningRate::AutoScaled(c) if c > 0.0 && c.is_finite() => {
            let w0 = output_sensitivity_w(&template.apply_params(&theta)?, &traj.u)?;
            let f0 = w0.transpose() * &w0;
            let lam_max = nalgebra::SymmetricEigen::new(f0)
                .eigenvalues
                .iter()
                .cloned()
                .fold(0.0, f64::max);
            if lam_max <= 0.0 {
                return Err(Error::Eval(
                    "flat loss surface: WᵀW vanishes at the initial guess".into(),
                ));
            }
            c / lam_max
        }
        _ => return Err(Error::Parse("learning rate must be positive".into())),
    };

    for _ in 0..iters {
        let sys_hat = template.apply_params(&theta)?;
        let residual = flat_y(&outputs_at(&theta)?) - &y_logged;
        let loss = residual.norm_squared();
        if !loss.is_finite() || loss > GRADDESC_LOSS_LIMIT {
            return Err(Error::Diverged { loss, limit: GRADDESC_LOSS_LIMIT });
        }
        let w = output_sensitivity_w(&sys_hat, &traj.u)?;
        let grad = w.transpose() * residual * 2.0;
        theta -= grad * step;
    }

    let final_residual = flat_y(&outputs_at(&theta)?) - &y_logged;
    let denom = if theta_star.norm() > 0.0 { theta_star.norm() } else { 1.0 };
    let sys_hat = template.apply_params(&theta)?;
    let t_markov = t.clamp(1, 20);
    let markov_err = markov_error(
        &markov_params(&sys_hat, t_markov),
        &markov_params(template, t_markov),
    );
    Ok(IdentResult {
        method: IdentMethod::GradDescent,
        markov_estimate: markov_params(&sys_hat, t_markov),
        theta_estimate: Some(theta.clone()),
        param_error: Some((&theta - &theta_star).norm() / denom),
        markov_error: Some(markov_err),
        pred_error: rms(&DMatrix::from_fn(t * m, 1, |r, _| final_residual[r])),
        regressor_rank: None,
    })
}

/// Mask shapes for randomly generated plants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Every entry of A, B, C free.
    Full,
    /// Only the first row of A free (the small identifiable family).
    FirstRowA,
}

/// Random plant: A scaled to the requested spectral radius, B and C uniform
/// on [-1, 1], zero initial state.
pub fn random_system(
    p: usize,
    l: usize,
    m: usize,
    rho: f64,
    kind: MaskKind,
    rng: &mut ChaCha8Rng,
) -> Result<LtiSystem> {
    if p == 0 || l == 0 || m == 0 {
        return Err(Error::Shape("dimensions must be at least 1".into()));
    }
    if !rho.is_finite() || rho <= 0.0 {
        return Err(Error::Parse("spectral radius target must be positive".into()));
    }
    let uni = |rng: &mut ChaCha8Rng| 2.0 * rng.random::<f64>() - 1.0;
    let mut a = DMatrix::from_fn(p, p, |_, _| 0.0);
    for i in 0..p {
        for j in 0..p {
            a[(i, j)] = uni(rng);
        }
    }
    let sr = crate::numerics::spectral_radius(&a)?;
    if sr > 0.0 {
        a *= rho / sr;
    }
    let mut b = DMatrix::zeros(p, l);
    for v in b.iter_mut() {
        *v = uni(rng);
    }
    let mut c = DMatrix::zeros(m, p);
    for v in c.iter_mut() {
        *v = uni(rng);
    }
    match kind {
        MaskKind::Full => LtiSystem::fully_masked(a, b, c),
        MaskKind::FirstRowA => {
            let mask = (0..p).map(|j| MaskEntry(MatrixId::A, 0, j)).collect();
            LtiSystem::new(a, b, c, mask, DVector::zeros(p))
        }
    }
}

/// i.i.d. uniform input on [-1, 1], T x l.
pub fn random_input(t: usize, l: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(t, l, |_, _| 2.0 * rng.random::<f64>() - 1.0)
}

/// Input confined to a rank-r subspace: u(t) = K·v(t) with a random l x r
/// factor K and i.i.d. reduced inputs v(t).
pub fn rank_limited_input(t: usize, l: usize, r: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let k = DMatrix::from_fn(l, r, |_, _| 2.0 * rng.random::<f64>() - 1.0);
    let v = DMatrix::from_fn(t, r, |_, _| 2.0 * rng.random::<f64>() - 1.0);
    v * k.transpose()
}

/// Plant and sweep parameters for [`McFamily::SampleSweepGradDescent`].
#[derive(Debug, Clone)]
pub struct SampleSweepParams {
    pub p: usize,
    pub l: usize,
    pub m: usize,
    /// Spectral radius of the random plants.
    pub rho: f64,
    /// Uniform output-noise amplitude.
    pub v_amp: f64,
    /// Sample sizes (trajectory lengths), each at least 2.
    pub sizes: Vec<usize>,
    pub lr: LearningRate,
    pub iters: usize,
}

/// Plant and sweep parameters for [`McFamily::RankSweepMarkov`].
#[derive(Debug, Clone)]
pub struct RankSweepParams {
    pub p: usize,
    pub l: usize,
    pub m: usize,
    /// Spectral radius of the random plants.
    pub rho: f64,
    /// Uniform output-noise amplitude.
    pub v_amp: f64,
    /// Training-input ranks to sweep, each in `1..=l`.
    pub ranks: Vec<usize>,
    /// Training steps (rank-limited input).
    pub train: usize,
    /// Held-out steps (full-rank input).
    pub test: usize,
    /// Number of Markov parameters to estimate.
    pub t_m: usize,
}

/// A Monte Carlo experiment family.
#[derive(Debug, Clone)]
pub enum McFamily {
    /// Gradient-descent identification of a small identifiable plant
    /// (first-row-of-A mask) under output noise, swept over sample sizes.
    /// Emits `param_error` rows and, per size, the Cramer-Rao `noise_floor`.
    SampleSweepGradDescent(SampleSweepParams),
    /// Markov-LS attack against rank-limited training input with a full-rank
    /// held-out tail, swept over the controller rank r (reported in the
    /// `sample_size` column). Emits `pred_error` rows.
    RankSweepMarkov(RankSweepParams),
}

/// A family plus the number of independent runs.
#[derive(Debug, Clone)]
pub struct McPlan {
    pub family: McFamily,
    pub runs: usize,
}

/// One aggregated output row (CSV: `sample_size,metric,mean,std,runs`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRow {
    /// Sample size for the sweep family; controller rank for the rank sweep.
    pub sample_size: usize,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation (0 when fewer than two runs succeeded).
    pub std: f64,
    /// Number of runs that produced a value.
    pub runs: usize,
}

fn aggregate(sizes: &[usize], metric: &str, per_run: &[Vec<Option<f64>>]) -> Vec<McRow> {
    sizes
        .iter()
        .enumerate()
        .map(|(j, &size)| {
            let values: Vec<f64> = per_run.iter().filter_map(|run| run[j]).collect();
            let runs = values.len();
            let mean = if runs > 0 {
                values.iter().sum::<f64>() / runs as f64
            } else {
                f64::NAN
            };
            let std = if runs > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (runs - 1) as f64).sqrt()
            } else {
                0.0
            };
            McRow { sample_size: size, metric: metric.to_string(), mean, std, runs }
        })
        .collect()
}

/// RNG for one run: the master seed selects the experiment, the stream
/// index isolates runs so results are independent of scheduling.
fn run_rng(master_seed: u64, run: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(run as u64 + 1);
    rng
}

/// Cramer-Rao floor on the relative parameter error for uniform output
/// noise of amplitude `v_amp`: sigma·sqrt(tr F⁻¹)/‖θ*‖.
fn crlb_floor(sys: &LtiSystem, u: &DMatrix<f64>, v_amp: f64) -> Result<Option<f64>> {
    let w = output_sensitivity_w(sys, u)?;
    let f = w.transpose() * &w;
    let sigma = v_amp / 3.0_f64.sqrt();
    let denom = sys.extract_params().norm();
    match f.clone().try_inverse() {
        Some(inv) if denom > 0.0 => Ok(Some(sigma * inv.trace().sqrt() / denom)),
        _ => Ok(None),
    }
}

/// Per-run metric values in sweep order; `None` marks a diverged run.
type MetricColumn = Vec<Option<f64>>;

fn sample_sweep_run(
    cfg: &SampleSweepParams,
    master_seed: u64,
    run: usize,
) -> Result<(MetricColumn, MetricColumn)> {
    let mut rng = run_rng(master_seed, run);
    let sys = random_system(cfg.p, cfg.l, cfg.m, cfg.rho, MaskKind::FirstRowA, &mut rng)?;
    let t_max = *cfg.sizes.iter().max().expect("validated non-empty");
    let u = random_input(t_max, cfg.l, &mut rng);
    let noise = NoiseSpec { w_amp: 0.0, v_amp: cfg.v_amp, seed: rng.random::<u64>() };
    let gd_seed = rng.random::<u64>();
    let traj_full = simulate(&sys, &u, Some(&noise))?;
    let mut errors = Vec::with_capacity(cfg.sizes.len());
    let mut floors = Vec::with_capacity(cfg.sizes.len());
    for &size in &cfg.sizes {
        let u_s = u.rows(0, size).into_owned();
        let traj = Trajectory::new(
            u_s.clone(),
            traj_full.y.rows(0, size).into_owned(),
            None,
            traj_full.noise_seed,
        )?;
        match identify_graddesc(&sys, &traj, cfg.lr, cfg.iters, gd_seed) {
            Ok(res) => errors.push(res.param_error),
            Err(Error::Diverged { .. }) => errors.push(None),
            Err(e) => return Err(e),
        }
        floors.push(crlb_floor(&sys, &u_s, cfg.v_amp)?);
    }
    Ok((errors, floors))
}

fn rank_sweep_run(
    cfg: &RankSweepParams,
    master_seed: u64,
    run: usize,
    tol: &Tolerances,
) -> Result<MetricColumn> {
    let mut rng = run_rng(master_seed, run);
    let sys = random_system(cfg.p, cfg.l, cfg.m, cfg.rho, MaskKind::Full, &mut rng)?;
    let mut out = Vec::with_capacity(cfg.ranks.len());
    for &r in &cfg.ranks {
        let u_train = rank_limited_input(cfg.train, cfg.l, r, &mut rng);
        let u_test = random_input(cfg.test, cfg.l, &mut rng);
        let mut u = DMatrix::zeros(cfg.train + cfg.test, cfg.l);
        u.rows_mut(0, cfg.train).copy_from(&u_train);
        u.rows_mut(cfg.train, cfg.test).copy_from(&u_test);
        let noise = NoiseSpec { w_amp: 0.0, v_amp: cfg.v_amp, seed: rng.random::<u64>() };
        let traj = simulate(&sys, &u, Some(&noise))?;
        let res =
            identify_markov(&traj, cfg.t_m, 0.0, Some((cfg.train, cfg.test)), Some(&sys), tol)?;
        out.push(Some(res.pred_error));
    }
    Ok(out)
}

/// Run a Monte Carlo plan: independent seeded runs (parallelized when
/// `jobs != Some(1)`), aggregated to mean/std per sweep point.
///
/// Output is bit-reproducible for a fixed master seed regardless of the
/// worker count: every run draws from its own RNG stream and results are
/// reduced in run order.
pub fn monte_carlo(plan: &McPlan, master_seed: u64, jobs: Option<usize>) -> Result<Vec<McRow>> {
    if plan.runs == 0 {
        return Err(Error::Parse("need at least one run".into()));
    }
    let tol = Tolerances::default();
    let body = || -> Result<Vec<McRow>> {
        match &plan.family {
            McFamily::SampleSweepGradDescent(cfg) => {
                if cfg.sizes.is_empty() || cfg.sizes.iter().any(|&s| s < 2) {
                    return Err(Error::Parse("sample sizes must all be >= 2".into()));
                }
                let results: Result<Vec<_>> = (0..plan.runs)
                    .into_par_iter()
                    .map(|run| sample_sweep_run(cfg, master_seed, run))
                    .collect();
                let results = results?;
                let errors: Vec<_> = results.iter().map(|(e, _)| e.clone()).collect();
                let floors: Vec<_> = results.iter().map(|(_, f)| f.clone()).collect();
                let mut rows = aggregate(&cfg.sizes, "param_error", &errors);
                rows.extend(aggregate(&cfg.sizes, "noise_floor", &floors));
                Ok(rows)
            }
            McFamily::RankSweepMarkov(cfg) => {
                if cfg.ranks.is_empty() || cfg.ranks.iter().any(|&r| r == 0 || r > cfg.l) {
                    return Err(Error::Parse("ranks must lie in 1..=l".into()));
                }
                let results: Result<Vec<_>> = (0..plan.runs)
                    .into_par_iter()
                    .map(|run| rank_sweep_run(cfg, master_seed, run, &tol))
                    .collect();
                Ok(aggregate(&cfg.ranks, "pred_error", &results?))
            }
        }
    };
    match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build()
            .map_err(|e| Error::Eval(format!("thread pool: {e}")))?
            .install(body),
        None => body(),
    }
}

/// Write Monte Carlo rows as CSV (`sample_size,metric,mean,std,runs`).
pub fn mc_rows_to_csv<W: std::io::Write>(rows: &[McRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["sample_size", "metric", "mean", "std", "runs"])?;
    for row in rows {
        wtr.write_record([
            row.sample_size.to_string(),
            row.metric.clone(),
            row.mean.to_string(),
            row.std.to_string(),
            row.runs.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
