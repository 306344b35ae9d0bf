//! LQR state feedback and the low-rank controller design that keeps the
//! closed loop unidentifiable: infinite- and finite-horizon LQR, the optimal
//! gain restricted to a fixed input factor, POD snapshot reduction with the
//! reduced-order Riccati design, input-rank reporting, and closed-loop cost
//! evaluation (exact and simulated).
//!
//! The design idea: feed the plant only through `u(t) = K·v(t)` with a rank-r
//! factor `K` (r < l), so every input the plant ever sees lives in an
//! r-dimensional subspace. Logged data from such a loop cannot pin down the
//! dynamics — the identifiability analysis returns a certificate witness —
//! while the reduced-order LQR keeps the loop stable and the cost close to
//! the unrestricted optimum.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    fix_column_signs, solve_dare, spectral_radius, svd_rank, RiccatiSolution, Tolerances,
};
use crate::system_model::{matrix_to_rows, rows_to_matrix, simulate, LtiSystem, Trajectory};

/// Cost horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Horizon {
    Infinite,
    Finite(usize),
}

/// Quadratic cost `J = Σ yᵀQy + uᵀRu` (plus an optional terminal output
/// weight for finite horizons).
#[derive(Debug, Clone)]
pub struct LqrCost {
    /// Output weight, m x m PSD.
    pub q: DMatrix<f64>,
    /// Input weight, l x l PSD.
    pub r: DMatrix<f64>,
    /// Terminal output weight (finite horizon only; defaults to Q).
    pub q_t: Option<DMatrix<f64>>,
    pub horizon: Horizon,
}

fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Shape(format!("{what} must be square")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidMatrix(format!("{what} must be finite")));
    }
    let asym = (m - m.transpose()).norm();
    if asym > 1e-10 * (1.0 + m.norm()) {
        return Err(Error::InvalidMatrix(format!("{what} must be symmetric")));
    }
    if m.nrows() > 0 {
        let eig = nalgebra::SymmetricEigen::new(m.clone());
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -1e-10 {
            return Err(Error::InvalidMatrix(format!(
                "{what} must be positive semidefinite (eigenvalue {min})"
            )));
        }
    }
    Ok(())
}

impl LqrCost {
    /// Build a cost, validating that both weights are symmetric PSD.
    pub fn new(
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        q_t: Option<DMatrix<f64>>,
        horizon: Horizon,
    ) -> Result<Self> {
        check_psd(&q, "Q")?;
        check_psd(&r, "R")?;
        if let Some(qt) = &q_t {
            check_psd(qt, "Q_T")?;
            if qt.nrows() != q.nrows() {
                return Err(Error::Shape("Q_T must have the same size as Q".into()));
            }
        }
        Ok(LqrCost { q, r, q_t, horizon })
    }

    /// Scalar weights expanded to scaled identities, infinite horizon.
    pub fn scalars(q: f64, r: f64, m: usize, l: usize) -> Result<Self> {
        LqrCost::new(
            DMatrix::identity(m, m) * q,
            DMatrix::identity(l, l) * r,
            None,
            Horizon::Infinite,
        )
    }

    fn check_dims(&self, sys: &LtiSystem) -> Result<()> {
        if self.q.nrows() != sys.m() {
            return Err(Error::Shape(format!(
                "Q is {}x{} but the system has {} outputs",
                self.q.nrows(),
                self.q.ncols(),
                sys.m()
            )));
        }
        if self.r.nrows() != sys.l() {
            return Err(Error::Shape(format!(
                "R is {}x{} but the system has {} inputs",
                self.r.nrows(),
                self.r.ncols(),
                sys.l()
            )));
        }
        Ok(())
    }

    /// State-space weight CᵀQC.
    fn state_weight(&self, sys: &LtiSystem) -> DMatrix<f64> {
        sys.c.transpose() * &self.q * &sys.c
    }
}

/// Infinite-horizon LQR: the stabilizing Riccati solution for state weight
/// CᵀQC and the gain `L0` with `u(t) = -L0·x(t)`.
pub fn lqr_infinite(sys: &LtiSystem, cost: &LqrCost, tol: &Tolerances) -> Result<RiccatiSolution> {
    cost.check_dims(sys)?;
    if cost.horizon != Horizon::Infinite {
        return Err(Error::Parse("lqr_infinite needs an infinite-horizon cost".into()));
    }
    solve_dare(&sys.a, &sys.b, &cost.state_weight(sys), &cost.r, tol)
}

/// Finite-horizon LQR: time-varying gains `L(0)..L(T-1)` from the backward
/// Riccati recursion started at the terminal weight CᵀQ_TC.
pub fn lqr_finite(sys: &LtiSystem, cost: &LqrCost) -> Result<Vec<DMatrix<f64>>> {
    cost.check_dims(sys)?;
    let t = match cost.horizon {
        Horizon::Finite(t) if t >= 1 => t,
        Horizon::Finite(_) => return Err(Error::Parse("finite horizon must be >= 1".into())),
        Horizon::Infinite => {
            return Err(Error::Parse("lqr_finite needs a finite-horizon cost".into()))
        }
    };
    let qx = cost.state_weight(sys);
    let qt = cost.q_t.as_ref().unwrap_or(&cost.q);
    let mut p = sys.c.transpose() * qt * &sys.c;
    let mut gains = Vec::with_capacity(t);
    for _ in 0..t {
        let btp = sys.b.transpose() * &p;
        let denom = &cost.r + &btp * &sys.b;
        let chol = nalgebra::Cholesky::new(denom).ok_or(Error::SingularGain)?;
        let gain = chol.solve(&(&btp * &sys.a));
        let atp = sys.a.transpose() * &p;
        let next = &qx + &atp * &sys.a - (&atp * &sys.b) * &gain;
        p = (&next + next.transpose()) * 0.5;
        gains.push(gain);
    }
    gains.reverse();
    Ok(gains)
}

/// Optimal gain when the input is restricted to `u = K·v`: solves the
/// Riccati equation of the input-transformed system (A, B·K, CᵀQC, KᵀRK).
/// The returned gain `L(K)` is r x p and the loop plays `u = -K·L(K)·x`.
pub fn gain_for_k(
    sys: &LtiSystem,
    cost: &LqrCost,
    k: &DMatrix<f64>,
    tol: &Tolerances,
) -> Result<RiccatiSolution> {
    cost.check_dims(sys)?;
    if k.nrows() != sys.l() || k.ncols() == 0 || k.ncols() > sys.l() {
        return Err(Error::Shape(format!(
            "K must be {} x r with 1 <= r <= {}, got {} x {}",
            sys.l(),
            sys.l(),
            k.nrows(),
            k.ncols()
        )));
    }
    if svd_rank(k, tol)? != k.ncols() {
        return Err(Error::RankDeficient(
            "K must have full column rank".into(),
        ));
    }
    let bk = &sys.b * k;
    let rk = k.transpose() * &cost.r * k;
    solve_dare(&sys.a, &bk, &cost.state_weight(sys), &rk, tol)
}

/// Leading-r POD basis of a snapshot matrix (p x N): `V1 = V2` = the first r
/// left singular vectors, columns sign-fixed so the largest-magnitude entry
/// is positive.
pub fn pod_basis(
    x: &DMatrix<f64>,
    r: usize,
    tol: &Tolerances,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if r == 0 || x.ncols() < r {
        return Err(Error::Shape(format!(
            "POD needs 1 <= r <= N, got r = {r} with {} snapshots",
            x.ncols()
        )));
    }
    let rank = svd_rank(x, tol)?;
    if r > rank {
        return Err(Error::RankDeficient(format!(
            "snapshots have rank {rank} < requested order {r}; add runs or widen the window"
        )));
    }
    let svd = x.clone().svd(true, false);
    let u = svd.u.as_ref().expect("svd with U");
    let mut v1 = u.columns(0, r).into_owned();
    fix_column_signs(&mut v1);
    Ok((v1.clone(), v1))
}

/// How snapshots for the POD basis are generated: free responses (u = 0)
/// from random initial states in the unit ball.
#[derive(Debug, Clone, Copy)]
pub struct SnapshotConfig {
    /// Number of free-response runs.
    pub m_runs: usize,
    /// First recorded step of each run (skipping the raw initial state).
    pub t_start: usize,
    /// Last recorded step of each run.
    pub t_end: usize,
}

impl SnapshotConfig {
    /// Defaults scaled to the plant: p runs over the window [1, 5p].
    pub fn default_for(sys: &LtiSystem) -> Self {
        let p = sys.p();
        SnapshotConfig { m_runs: p, t_start: 1, t_end: 5 * p }
    }

    fn validate(&self) -> Result<()> {
        if self.m_runs == 0 || self.t_start > self.t_end {
            return Err(Error::Parse(
                "snapshot config needs m_runs >= 1 and t_start <= t_end".into(),
            ));
        }
        Ok(())
    }
}

/// How the controller realizes `u = K·v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    /// POD-reduced design: v = V1ᵀx is the reduced state.
    StateFeedbackReduced,
    /// Unrestricted LQR, emitted when p < l already bounds the input rank.
    PlainLqr,
}

/// Rank-limited state-feedback controller: `u(t) = K·v(t)` with
/// `v(t) = V1ᵀ·x(t)` and `K = -Lr`, so the loop plays `u = -Lr·V1ᵀ·x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LowRankControllerRaw", into = "LowRankControllerRaw")]
pub struct LowRankController {
    pub mode: ControllerMode,
    /// Input column factor, l x r; every input lies in its column space.
    pub k: DMatrix<f64>,
    /// Gain on the reduced state, l x r (`K = -Lr`).
    pub lr: DMatrix<f64>,
    /// Projection basis, p x r: the reduced state is v = V1ᵀx.
    pub v1: DMatrix<f64>,
    /// Reconstruction basis, p x r; equal to V1 for the POD design
    /// (so V1ᵀV2 = I_r exactly).
    pub v2: DMatrix<f64>,
    /// Input rank bound r. For `plain_lqr` this is p, and K = -L0 may have
    /// rank below r on degenerate plants.
    pub r: usize,
    /// Seed used for snapshot generation (design determinism).
    pub seed: u64,
}

/// On-disk shape of [`LowRankController`]; `V2` is omitted because the POD
/// construction keeps it equal to `V1`.
#[derive(Serialize, Deserialize)]
struct LowRankControllerRaw {
    mode: ControllerMode,
    #[serde(rename = "K")]
    k: Vec<Vec<f64>>,
    #[serde(rename = "Lr")]
    lr: Vec<Vec<f64>>,
    #[serde(rename = "V1")]
    v1: Vec<Vec<f64>>,
    r: usize,
    seed: u64,
}

impl TryFrom<LowRankControllerRaw> for LowRankController {
    type Error = Error;

    fn try_from(raw: LowRankControllerRaw) -> Result<Self> {
        let k = rows_to_matrix(&raw.k, "K")?;
        let lr = rows_to_matrix(&raw.lr, "Lr")?;
        let v1 = rows_to_matrix(&raw.v1, "V1")?;
        if k.ncols() != raw.r || lr.shape() != k.shape() || v1.ncols() != raw.r {
            return Err(Error::Shape(
                "controller blocks must share the rank r column count".into(),
            ));
        }
        Ok(LowRankController {
            mode: raw.mode,
            k,
            lr,
            v2: v1.clone(),
            v1,
            r: raw.r,
            seed: raw.seed,
        })
    }
}

impl From<LowRankController> for LowRankControllerRaw {
    fn from(c: LowRankController) -> Self {
        LowRankControllerRaw {
            mode: c.mode,
            k: matrix_to_rows(&c.k),
            lr: matrix_to_rows(&c.lr),
            v1: matrix_to_rows(&c.v1),
            r: c.r,
            seed: c.seed,
        }
    }
}

impl LowRankController {
    /// Full state-feedback matrix `Lr·V1ᵀ` (l x p); the loop plays
    /// `u(t) = -Lr·V1ᵀ·x(t)`.
    pub fn effective_feedback(&self) -> DMatrix<f64> {
        &self.lr * self.v1.transpose()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_json_str(&text)
    }
}

/// Uniform sample from the unit ball in `dim` dimensions.
pub fn unit_ball_sample(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    let dir = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = dir.norm();
    let radius = rng.random::<f64>().powf(1.0 / dim as f64);
    if norm < 1e-12 {
        let mut e = DVector::zeros(dim);
        e[0] = radius;
        return e;
    }
    dir * (radius / norm)
}

/// Design a rank-r controller making the closed loop unidentifiable.
///
/// When `p < l` the unrestricted LQR already confines inputs to a rank-p
/// subspace, so `r = None` (or `r = p`) short-circuits to `plain_lqr`.
/// Otherwise: simulate free responses from random initial states, extract
/// the leading-r POD basis V1, reduce the plant to
/// `(V1ᵀAV1, V1ᵀB, CV1)`, solve the reduced Riccati equation for the gain
/// `Lr`, and emit `K = -Lr` with `v = V1ᵀx`. The reduced gain is checked for
/// stability on the FULL plant; an unstable loop is a typed error (increase
/// r or widen the snapshot window).
pub fn design_low_rank(
    sys: &LtiSystem,
    cost: &LqrCost,
    r: Option<usize>,
    snap: &SnapshotConfig,
    seed: u64,
    tol: &Tolerances,
) -> Result<LowRankController> {
    cost.check_dims(sys)?;
    if cost.horizon != Horizon::Infinite {
        return Err(Error::Parse("low-rank design uses the infinite-horizon cost".into()));
    }
    snap.validate()?;
    let (p, l) = (sys.p(), sys.l());
    let order = match r {
        Some(0) => return Err(Error::Shape("rank must be at least 1".into())),
        Some(r) if r >= l => {
            return Err(Error::Shape(format!(
                "rank {r} must stay below the input dimension {l}"
            )))
        }
        Some(r) if r > p => {
            return Err(Error::Shape(format!(
                "rank {r} cannot exceed the state dimension {p}"
            )))
        }
        Some(r) => r,
        // Default order: one below the input dimension (so the loop always
        // hides at least one input direction), capped by the state dimension.
        None => l.saturating_sub(1).min(p),
    };

    let ctl = if p < l && order == p {
        // p < l already bounds the input rank by p: plain LQR suffices.
        let sol = lqr_infinite(sys, cost, tol)?;
        LowRankController {
            mode: ControllerMode::PlainLqr,
            k: -&sol.gain,
            lr: sol.gain,
            v1: DMatrix::identity(p, p),
            v2: DMatrix::identity(p, p),
            r: p,
            seed,
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let window = snap.t_end - snap.t_start + 1;
        let mut x = DMatrix::zeros(p, snap.m_runs * window);
        let u_zero = DMatrix::zeros(snap.t_end + 1, l);
        for run in 0..snap.m_runs {
            let x0 = unit_ball_sample(&mut rng, p);
            let traj = simulate(&sys.with_x0(x0)?, &u_zero, None)?;
            let states = traj.x.as_ref().expect("simulate records states");
            for (idx, step) in (snap.t_start..=snap.t_end).enumerate() {
                x.set_column(run * window + idx, &states.row(step).transpose());
            }
        }
        let (v1, v2) = pod_basis(&x, order, tol)?;
        let a_r = v1.transpose() * &sys.a * &v2;
        let b_r = v1.transpose() * &sys.b;
        let c_r = &sys.c * &v2;
        let qx_r = c_r.transpose() * &cost.q * &c_r;
        let sol = solve_dare(&a_r, &b_r, &qx_r, &cost.r, tol)?;
        let lr = sol.gain; // l x r
        let k = -&lr;
        if svd_rank(&k, tol)? != order {
            return Err(Error::RankDeficient(format!(
                "reduced gain lost rank (below {order}); adjust the cost weights"
            )));
        }
        LowRankController {
            mode: ControllerMode::StateFeedbackReduced,
            k,
            lr,
            v1,
            v2,
            r: order,
            seed,
        }
    };

    let rho = spectral_radius(&closed_loop_matrix(sys, &ctl.effective_feedback()))?;
    if rho >= 1.0 {
        return Err(Error::ReducedLoopUnstable { rho });
    }
    Ok(ctl)
}

/// Numerical rank of an input sequence (T x l, needs T >= l so the rank can
/// reach l).
pub fn input_rank(u: &DMatrix<f64>, tol: &Tolerances) -> Result<usize> {
    if u.nrows() < u.ncols() {
        return Err(Error::Shape(format!(
            "input rank needs at least l = {} steps, got {}",
            u.ncols(),
            u.nrows()
        )));
    }
    svd_rank(u, tol)
}

/// Rank of the stacked input/state excitation matrix [u; x] over time —
/// the persistent-excitation read on a whole trajectory.
pub fn stacked_excitation_rank(traj: &Trajectory, tol: &Tolerances) -> Result<usize> {
    let x = traj
        .x
        .as_ref()
        .ok_or_else(|| Error::Shape("trajectory has no recorded states".into()))?;
    let (t, l, p) = (traj.t(), traj.l(), x.ncols());
    let stacked = DMatrix::from_fn(l + p, t, |i, j| {
        if i < l {
            traj.u[(j, i)]
        } else {
            x[(j, i - l)]
        }
    });
    svd_rank(&stacked, tol)
}

/// Closed-loop state matrix A - B·Fb for feedback `u = -Fb·x`.
pub fn closed_loop_matrix(sys: &LtiSystem, fb: &DMatrix<f64>) -> DMatrix<f64> {
    &sys.a - &sys.b * fb
}

/// Simulate `u(t) = -Fb·x(t)` from `x0` for `steps` steps, logging the
/// resulting inputs, outputs, and states.
pub fn simulate_closed_loop(
    sys: &LtiSystem,
    fb: &DMatrix<f64>,
    x0: &DVector<f64>,
    steps: usize,
) -> Result<Trajectory> {
    if fb.nrows() != sys.l() || fb.ncols() != sys.p() {
        return Err(Error::Shape(format!(
            "feedback must be {} x {}, got {} x {}",
            sys.l(),
            sys.p(),
            fb.nrows(),
            fb.ncols()
        )));
    }
    if x0.len() != sys.p() {
        return Err(Error::Shape("x0 length must match the state dimension".into()));
    }
    if steps == 0 {
        return Err(Error::Shape("need at least one step".into()));
    }
    let (l, m, p) = (sys.l(), sys.m(), sys.p());
    let mut u = DMatrix::zeros(steps, l);
    let mut y = DMatrix::zeros(steps, m);
    let mut xs = DMatrix::zeros(steps, p);
    let mut x = x0.clone();
    for t in 0..steps {
        xs.row_mut(t).tr_copy_from(&x);
        y.row_mut(t).tr_copy_from(&(&sys.c * &x));
        let ut = -(fb * &x);
        u.row_mut(t).tr_copy_from(&ut);
        x = &sys.a * &x + &sys.b * &ut;
    }
    Trajectory::new(u, y, Some(xs), None)
}

/// Exact expected infinite-horizon cost of `u = -Fb·x` for x0 ~ N(0, I):
/// the trace of the closed-loop observability-type Gramian of
/// S = CᵀQC + FbᵀRFb, computed by doubling. Infinite when the loop is
/// unstable.
pub fn expected_infinite_cost(sys: &LtiSystem, fb: &DMatrix<f64>, cost: &LqrCost) -> Result<f64> {
    cost.check_dims(sys)?;
    if fb.nrows() != sys.l() || fb.ncols() != sys.p() {
        return Err(Error::Shape("feedback must be l x p".into()));
    }
    let acl = closed_loop_matrix(sys, fb);
    if spectral_radius(&acl)? >= 1.0 {
        return Ok(f64::INFINITY);
    }
    let s = cost.state_weight(sys) + fb.transpose() * &cost.r * fb;
    let mut x = s;
    let mut m = acl;
    for _ in 0..200 {
        let term = m.transpose() * &x * &m;
        let done = term.norm() <= 1e-12 * (1.0 + x.norm());
        x += term;
        if done {
            break;
        }
        m = &m * &m;
    }
    Ok(x.trace())
}

/// Monte Carlo estimate of the same cost: average of the accumulated
/// `Σ yᵀQy + uᵀRu` over `runs` closed-loop simulations from standard-normal
/// initial states.
pub fn simulated_cost(
    sys: &LtiSystem,
    fb: &DMatrix<f64>,
    cost: &LqrCost,
    steps: usize,
    runs: usize,
    seed: u64,
) -> Result<f64> {
    if runs == 0 {
        return Err(Error::Shape("need at least one run".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..runs {
        let x0 = DVector::from_fn(sys.p(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let traj = simulate_closed_loop(sys, fb, &x0, steps)?;
        for t in 0..steps {
            let yt = traj.y.row(t).transpose();
            let ut = traj.u.row(t).transpose();
            total += (yt.transpose() * &cost.q * yt)[(0, 0)];
            total += (ut.transpose() * &cost.r * ut)[(0, 0)];
        }
    }
    Ok(total / runs as f64)
}
