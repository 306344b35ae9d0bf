//! Output-sensitivity matrix W, Fisher information F = WᵀW, input Jacobian
//! Ja, and mixed input/parameter Hessian H over a finite logged horizon —
//! exact for LTI systems via derivative matrices of the Markov parameters,
//! or by central finite differences through an abstract evaluator.
//!
//! Index conventions, fixed once and used everywhere:
//!
//! * `W` is (T·m) x n: row `k·m + cy` holds ∂y_cy(k)/∂θ, column i is θ_i.
//! * `Ja` is (T·m) x (T·l): column `j·l + cu` holds ∂y/∂u_cu(j).
//! * `H` is (T²·l·m) x n: row `((k·T + j)·l + cu)·m + cy` holds
//!   ∂²y_cy(k)/∂θ_i ∂u_cu(j). Rows with `j >= k` are identically zero
//!   (outputs cannot depend on present or future inputs).

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::system_model::{simulate, LtiSystem, MaskEntry, MatrixId};

/// Default relative step for the finite-difference path.
pub const FD_STEP: f64 = 1e-6;

/// W, F, H, Ja for one system/input pair, under the module's index
/// conventions.
#[derive(Debug, Clone)]
pub struct SensitivityBundle {
    /// Horizon (steps).
    pub t: usize,
    /// Input dimension.
    pub l: usize,
    /// Output dimension.
    pub m: usize,
    /// Parameter count.
    pub n: usize,
    /// Output sensitivity, (T·m) x n.
    pub w: DMatrix<f64>,
    /// Fisher information WᵀW, n x n.
    pub f: DMatrix<f64>,
    /// Mixed input/parameter Hessian, (T²·l·m) x n.
    pub h: DMatrix<f64>,
    /// Input Jacobian, (T·m) x (T·l).
    pub ja: DMatrix<f64>,
}

impl SensitivityBundle {
    /// Row of `W`/`Ja` for output channel `cy` at time `k`.
    pub fn w_row(&self, k: usize, cy: usize) -> usize {
        k * self.m + cy
    }

    /// Column of `Ja` for input channel `cu` at time `j`.
    pub fn ja_col(&self, j: usize, cu: usize) -> usize {
        j * self.l + cu
    }

    /// Row of `H` for (output time `k`, input time `j`, channels `cu`, `cy`).
    pub fn h_row(&self, k: usize, j: usize, cu: usize, cy: usize) -> usize {
        ((k * self.t + j) * self.l + cu) * self.m + cy
    }

    /// Dump all four matrices as CSV plus a JSON sidecar describing the
    /// index conventions (debugging aid).
    pub fn export_debug(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
        for (name, m) in [("w", &self.w), ("f", &self.f), ("h", &self.h), ("ja", &self.ja)] {
            write_matrix_csv(&dir.join(format!("{name}.csv")), m)?;
        }
        let conventions = serde_json::json!({
            "w": "rows k*m+cy for time k, output channel cy; columns are theta indices",
            "f": "n x n, equals w' * w",
            "h": "rows ((k*T+j)*l+cu)*m+cy; rows with j >= k are zero; columns are theta indices",
            "ja": "rows as in w; columns j*l+cu for time j, input channel cu",
            "t": self.t, "l": self.l, "m": self.m, "n": self.n,
        });
        let sidecar = dir.join("conventions.json");
        std::fs::write(&sidecar, serde_json::to_string_pretty(&conventions)?)
            .map_err(|e| Error::io_at(&sidecar, e))?;
        Ok(())
    }
}

fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut wtr = csv::Writer::from_writer(file);
    for i in 0..m.nrows() {
        let record: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Cached products C·A^s and A^s·B for s = 0..=dmax.
struct PowerCache {
    capow: Vec<DMatrix<f64>>,
    apowb: Vec<DMatrix<f64>>,
}

fn power_cache(sys: &LtiSystem, dmax: usize) -> PowerCache {
    let mut capow = Vec::with_capacity(dmax + 1);
    let mut apowb = Vec::with_capacity(dmax + 1);
    capow.push(sys.c.clone());
    apowb.push(sys.b.clone());
    for _ in 1..=dmax {
        let next_c = capow.last().expect("nonempty") * &sys.a;
        capow.push(next_c);
        let next_b = &sys.a * apowb.last().expect("nonempty");
        apowb.push(next_b);
    }
    PowerCache { capow, apowb }
}

/// ∂(C·A^d·B)/∂θ for one mask coordinate, given the power cache.
fn g_from_cache(sys: &LtiSystem, cache: &PowerCache, entry: MaskEntry, d: usize) -> DMatrix<f64> {
    let (m, l) = (sys.m(), sys.l());
    let MaskEntry(id, p, q) = entry;
    let mut g = DMatrix::zeros(m, l);
    match id {
        // Product rule over every A factor in C A^d B: the s-th term keeps
        // C A^s to the left and A^{d-1-s} B to the right of the unit matrix,
        // collapsing to an outer product of a cached column and row.
        MatrixId::A => {
            for s in 0..d {
                let col = cache.capow[s].column(p);
                let row = cache.apowb[d - 1 - s].row(q);
                g.gemm(1.0, &col, &row, 1.0);
            }
        }
        MatrixId::B => {
            g.column_mut(q).copy_from(&cache.capow[d].column(p));
        }
        MatrixId::C => {
            g.row_mut(p).copy_from(&cache.apowb[d].row(q));
        }
    }
    g
}

/// Derivative of the d-th Markov parameter C·A^d·B with respect to θ_i,
/// as an m x l matrix.
pub fn g_ijk(sys: &LtiSystem, i: usize, d: usize) -> Result<DMatrix<f64>> {
    if i >= sys.n_params() {
        return Err(Error::Shape(format!(
            "parameter index {i} out of range for {} parameters",
            sys.n_params()
        )));
    }
    let cache = power_cache(sys, d);
    Ok(g_from_cache(sys, &cache, sys.mask[i], d))
}

fn check_input(sys: &LtiSystem, u: &DMatrix<f64>) -> Result<()> {
    if u.ncols() != sys.l() {
        return Err(Error::Shape(format!(
            "input has {} channels, system expects {}",
            u.ncols(),
            sys.l()
        )));
    }
    if u.nrows() == 0 {
        return Err(Error::Shape("input must have at least one step".into()));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidMatrix("input must be finite".into()));
    }
    Ok(())
}

/// Build W, F, H, Ja exactly for an LTI system at its current parameters.
///
/// Requires a zero initial state: with x0 = 0 every output is a pure
/// convolution of the Markov parameters with the input, which is what the
/// derivative matrices describe.
pub fn build_bundle_lti(sys: &LtiSystem, u: &DMatrix<f64>) -> Result<SensitivityBundle> {
    if sys.x0.iter().any(|v| *v != 0.0) {
        return Err(Error::UnsupportedInitialState);
    }
    check_input(sys, u)?;
    let (t, l, m, n) = (u.nrows(), sys.l(), sys.m(), sys.n_params());
    let cache = power_cache(sys, t - 1);
    let g_mats: Vec<Vec<DMatrix<f64>>> = sys
        .mask
        .iter()
        .map(|&e| (0..t).map(|d| g_from_cache(sys, &cache, e, d)).collect())
        .collect();
    let u_cols: Vec<DVector<f64>> = (0..t).map(|j| u.row(j).transpose()).collect();

    let mut w = DMatrix::zeros(t * m, n);
    for k in 0..t {
        for (i, g_i) in g_mats.iter().enumerate() {
            let mut acc = DVector::zeros(m);
            for d in 0..k {
                acc.gemv(1.0, &g_i[d], &u_cols[k - 1 - d], 1.0);
            }
            w.view_mut((k * m, i), (m, 1)).copy_from(&acc);
        }
    }

    let markov: Vec<DMatrix<f64>> = (0..t).map(|d| &cache.capow[d] * &sys.b).collect();
    let mut ja = DMatrix::zeros(t * m, t * l);
    for k in 0..t {
        for j in 0..k {
            ja.view_mut((k * m, j * l), (m, l)).copy_from(&markov[k - 1 - j]);
        }
    }

    let mut h = DMatrix::zeros(t * t * l * m, n);
    for k in 0..t {
        for j in 0..k {
            let d = k - 1 - j;
            for (i, g_i) in g_mats.iter().enumerate() {
                let g = &g_i[d];
                for cu in 0..l {
                    for cy in 0..m {
                        h[(((k * t + j) * l + cu) * m + cy, i)] = g[(cy, cu)];
                    }
                }
            }
        }
    }

    let f = w.transpose() * &w;
    Ok(SensitivityBundle { t, l, m, n, w, f, h, ja })
}

/// W alone, by the forward sensitivity recursion — O(T·n·p²), much cheaper
/// than the full bundle for long horizons (used by the gradient-descent
/// identifier every iteration).
///
/// For each parameter the recursion propagates s_i(t) = ∂x(t)/∂θ_i:
/// `s_i(t+1) = A s_i(t) + [∂A] x(t) + [∂B] u(t)` and
/// `∂y(t)/∂θ_i = C s_i(t) + [∂C] x(t)`, where each bracket is the
/// single-entry derivative of the masked matrix.
pub fn output_sensitivity_w(sys: &LtiSystem, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_input(sys, u)?;
    let (t, m, n, p) = (u.nrows(), sys.m(), sys.n_params(), sys.p());
    let traj = simulate(sys, u, None)?;
    let xs = traj.x.as_ref().expect("simulate records states");
    let mut w = DMatrix::zeros(t * m, n);
    for (i, &MaskEntry(id, pp, qq)) in sys.mask.iter().enumerate() {
        let mut s = DVector::zeros(p);
        for step in 0..t {
            let mut dy = &sys.c * &s;
            if id == MatrixId::C {
                dy[pp] += xs[(step, qq)];
            }
            for cy in 0..m {
                w[(step * m + cy, i)] = dy[cy];
            }
            if step + 1 < t {
                let mut s_next = &sys.a * &s;
                match id {
                    MatrixId::A => s_next[pp] += xs[(step, qq)],
                    MatrixId::B => s_next[pp] += u[(step, qq)],
                    MatrixId::C => {}
                }
                s = s_next;
            }
        }
    }
    Ok(w)
}

/// Any simulable parameterized system the finite-difference path can probe.
pub trait SystemEvaluator {
    /// Number of free parameters.
    fn n_params(&self) -> usize;
    /// Input dimension l.
    fn input_dim(&self) -> usize;
    /// Output dimension m.
    fn output_dim(&self) -> usize;
    /// Outputs (T x m) produced by parameters `theta` under input `u` (T x l).
    fn outputs(&self, theta: &DVector<f64>, u: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

/// [`SystemEvaluator`] backed by an LTI template whose mask defines theta.
pub struct LtiEvaluator {
    template: LtiSystem,
}

impl LtiEvaluator {
    pub fn new(template: LtiSystem) -> Self {
        LtiEvaluator { template }
    }
}

impl SystemEvaluator for LtiEvaluator {
    fn n_params(&self) -> usize {
        self.template.n_params()
    }

    fn input_dim(&self) -> usize {
        self.template.l()
    }

    fn output_dim(&self) -> usize {
        self.template.m()
    }

    fn outputs(&self, theta: &DVector<f64>, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let sys = self.template.apply_params(theta)?;
        Ok(simulate(&sys, u, None)?.y)
    }
}

/// Build W, F, H, Ja by central finite differences around `(theta, u)`.
///
/// `h` is the relative base step for the first central differences (W and
/// Ja); each coordinate uses `h · (1 + |value|)`. H is the four-point mixed
/// difference over one theta and one input coordinate; its stencil ignores
/// `h` and steps by `eps^(1/4) · (1 + |value|)` per direction, since a
/// second-order stencil at a first-order step drowns in roundoff
/// (`eps / (4h²) ≈ 5e-5` at `h = 1e-6`). Rows of H with `j >= k` are pinned
/// to zero rather than estimated.
pub fn build_bundle_fd(
    eval: &dyn SystemEvaluator,
    theta: &DVector<f64>,
    u: &DMatrix<f64>,
    h: f64,
) -> Result<SensitivityBundle> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Parse("finite-difference step must be positive".into()));
    }
    let (t, l, m, n) = (u.nrows(), eval.input_dim(), eval.output_dim(), eval.n_params());
    if theta.len() != n {
        return Err(Error::Shape(format!(
            "theta has length {}, evaluator expects {n}",
            theta.len()
        )));
    }
    if u.ncols() != l || t == 0 {
        return Err(Error::Shape(format!(
            "input must be T x {l} with T >= 1, got {} x {}",
            t,
            u.ncols()
        )));
    }
    let run = |th: &DVector<f64>, uu: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let y = eval.outputs(th, uu).map_err(|e| Error::Eval(e.to_string()))?;
        if y.nrows() != t || y.ncols() != m {
            return Err(Error::Eval(format!(
                "evaluator returned {} x {}, expected {t} x {m}",
                y.nrows(),
                y.ncols()
            )));
        }
        Ok(y)
    };
    let flat = |y: &DMatrix<f64>| -> DVector<f64> {
        DVector::from_fn(t * m, |r, _| y[(r / m, r % m)])
    };
    let step = |v: f64| h * (1.0 + v.abs());

    let mut w = DMatrix::zeros(t * m, n);
    for i in 0..n {
        let hi = step(theta[i]);
        let mut tp = theta.clone();
        tp[i] += hi;
        let mut tm = theta.clone();
        tm[i] -= hi;
        let diff = (flat(&run(&tp, u)?) - flat(&run(&tm, u)?)) / (2.0 * hi);
        w.set_column(i, &diff);
    }

    let mut ja = DMatrix::zeros(t * m, t * l);
    for j in 0..t {
        for cu in 0..l {
            let hu = step(u[(j, cu)]);
            let mut up = u.clone();
            up[(j, cu)] += hu;
            let mut um = u.clone();
            um[(j, cu)] -= hu;
            let diff = (flat(&run(theta, &up)?) - flat(&run(theta, &um)?)) / (2.0 * hu);
            ja.set_column(j * l + cu, &diff);
        }
    }

    let step2 = |v: f64| f64::EPSILON.powf(0.25) * (1.0 + v.abs());
    let mut hmat = DMatrix::zeros(t * t * l * m, n);
    for i in 0..n {
        let hi = step2(theta[i]);
        let mut tp = theta.clone();
        tp[i] += hi;
        let mut tm = theta.clone();
        tm[i] -= hi;
        for j in 0..t {
            for cu in 0..l {
                let hu = step2(u[(j, cu)]);
                let mut up = u.clone();
                up[(j, cu)] += hu;
                let mut um = u.clone();
                um[(j, cu)] -= hu;
                let ypp = run(&tp, &up)?;
                let ypm = run(&tp, &um)?;
                let ymp = run(&tm, &up)?;
                let ymm = run(&tm, &um)?;
                let scale = 4.0 * hi * hu;
                for k in (j + 1)..t {
                    for cy in 0..m {
                        let mixed =
                            (ypp[(k, cy)] - ypm[(k, cy)] - ymp[(k, cy)] + ymm[(k, cy)]) / scale;
                        hmat[(((k * t + j) * l + cu) * m + cy, i)] = mixed;
                    }
                }
            }
        }
    }

    let f = w.transpose() * &w;
    Ok(SensitivityBundle { t, l, m, n, w, f, h: hmat, ja })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> LtiSystem {
        LtiSystem::fully_masked(
            DMatrix::from_row_slice(2, 2, &[0.4, 0.2, -0.1, 0.3]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 2.0]),
        )
        .unwrap()
    }

    #[test]
    fn g_for_b_entry_at_d_zero_is_c_column() {
        let sys = toy();
        // Index of B_{0,0} in the full mask: after the 4 A entries.
        let g = g_ijk(&sys, 4, 0).unwrap();
        let mut expect = DMatrix::zeros(2, 2);
        expect.column_mut(0).copy_from(&sys.c.column(0));
        assert_eq!(g, expect);
    }

    #[test]
    fn g_for_a_entry_at_d_zero_is_zero() {
        let sys = toy();
        let g = g_ijk(&sys, 0, 0).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn g_for_a_entry_with_identity_a_collapses() {
        let mut sys = toy();
        sys.a = DMatrix::identity(2, 2);
        for d in 0..5 {
            // With A = I every product-rule term is C E B, d of them.
            let g = g_ijk(&sys, 1, d).unwrap(); // A_{0,1}
            let mut e = DMatrix::zeros(2, 2);
            e[(0, 1)] = 1.0;
            let expect = &sys.c * e * &sys.b * d as f64;
            assert!((g - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_input_zeroes_w_but_not_h_or_ja() {
        let sys = toy();
        let t = 6;
        let zero = DMatrix::zeros(t, 2);
        let rand_u = DMatrix::from_fn(t, 2, |i, j| ((i * 2 + j) as f64 * 0.9).sin());
        let b0 = build_bundle_lti(&sys, &zero).unwrap();
        let b1 = build_bundle_lti(&sys, &rand_u).unwrap();
        assert!(b0.w.iter().all(|v| *v == 0.0));
        assert!(b0.f.iter().all(|v| *v == 0.0));
        assert_eq!(b0.h, b1.h);
        assert_eq!(b0.ja, b1.ja);
    }

    #[test]
    fn single_b_parameter_bundle_matches_hand_expansion() {
        let sys = LtiSystem::new(
            DMatrix::zeros(2, 2),
            DMatrix::from_row_slice(2, 1, &[2.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 3.0, -1.0, 0.0]),
            vec![MaskEntry(MatrixId::B, 0, 0)],
            DVector::zeros(2),
        )
        .unwrap();
        let u = DMatrix::from_row_slice(2, 1, &[0.7, -0.2]);
        let b = build_bundle_lti(&sys, &u).unwrap();
        // Only the k = 1 block is nonzero: C column 0 (entries 1 and -1)
        // times u(0) = 0.7.
        assert_eq!(b.w[(0, 0)], 0.0);
        assert_eq!(b.w[(1, 0)], 0.0);
        assert!((b.w[(2, 0)] - 0.7).abs() < 1e-15);
        assert!((b.w[(3, 0)] + 0.7).abs() < 1e-15);
    }

    #[test]
    fn fast_w_matches_bundle_w() {
        let sys = toy();
        let u = DMatrix::from_fn(8, 2, |i, j| ((i + 3 * j) as f64 * 0.37).cos());
        let bundle = build_bundle_lti(&sys, &u).unwrap();
        let fast = output_sensitivity_w(&sys, &u).unwrap();
        assert!((&bundle.w - &fast).norm() < 1e-12 * (1.0 + bundle.w.norm()));
    }

    /// y(t) = theta * u(t-1): one parameter, one channel each way.
    struct ScalarDelay;

    impl SystemEvaluator for ScalarDelay {
        fn n_params(&self) -> usize {
            1
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn output_dim(&self) -> usize {
            1
        }
        fn outputs(&self, theta: &DVector<f64>, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
            let t = u.nrows();
            Ok(DMatrix::from_fn(t, 1, |k, _| {
                if k == 0 {
                    0.0
                } else {
                    theta[0] * u[(k - 1, 0)]
                }
            }))
        }
    }

    #[test]
    fn fd_scalar_delay_recovers_shifted_input_and_unit_hessian() {
        let t = 5;
        let u = DMatrix::from_fn(t, 1, |i, _| (i as f64 + 1.0) * 0.3);
        let theta = DVector::from_vec(vec![0.8]);
        let b = build_bundle_fd(&ScalarDelay, &theta, &u, FD_STEP).unwrap();
        for k in 1..t {
            assert!((b.w[(k, 0)] - u[(k - 1, 0)]).abs() < 1e-8);
            let row = b.h_row(k, k - 1, 0, 0);
            // Mixed second differences carry ~eps/(4h^2) roundoff, so the
            // achievable accuracy at h = 1e-6 is about 1e-5 relative.
            assert!((b.h[(row, 0)] - 1.0).abs() < 1e-4);
        }
        // All other H rows vanish.
        let mut total: f64 = 0.0;
        for k in 0..t {
            for j in 0..k.saturating_sub(1) {
                total += b.h[(b.h_row(k, j, 0, 0), 0)].abs();
            }
        }
        assert!(total < 1e-6);
    }

    /// Evaluator that never looks at theta.
    struct DeafToTheta;

    impl SystemEvaluator for DeafToTheta {
        fn n_params(&self) -> usize {
            2
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn output_dim(&self) -> usize {
            1
        }
        fn outputs(&self, _theta: &DVector<f64>, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
            Ok(u.clone())
        }
    }

    #[test]
    fn fd_ignoring_theta_gives_zero_w_and_h() {
        let u = DMatrix::from_fn(4, 1, |i, _| i as f64);
        let theta = DVector::from_vec(vec![1.0, 2.0]);
        let b = build_bundle_fd(&DeafToTheta, &theta, &u, FD_STEP).unwrap();
        assert!(b.w.iter().all(|v| v.abs() < 1e-12));
        assert!(b.h.iter().all(|v| v.abs() < 1e-12));
    }
}
