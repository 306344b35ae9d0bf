//! Tolerance-aware dense linear algebra shared by every other module:
//! SVD-based numerical rank, null-space bases, span membership, spectral
//! radius, minimum-norm least squares, and a fixed-point solver for the
//! discrete algebraic Riccati equation.
//!
//! Rank convention: a singular value counts as nonzero when
//! `sigma > rank_eps * sigma_max * max(rows, cols)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Numerical tolerances threaded through rank tests and the Riccati solver.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    /// Relative singular-value cutoff for rank decisions.
    pub rank_eps: f64,
    /// Relative residual cutoff for null-space inclusion tests.
    pub residual_eps: f64,
    /// Fixed-point convergence tolerance for the Riccati solver.
    pub dare_eps: f64,
    /// Iteration cap for the Riccati solver.
    pub dare_max_iter: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rank_eps: 1e-9,
            residual_eps: 1e-7,
            dare_eps: 1e-10,
            dare_max_iter: 10_000,
        }
    }
}

impl Tolerances {
    /// Reject non-positive thresholds and a zero iteration budget.
    pub fn validate(&self) -> Result<()> {
        if self.rank_eps <= 0.0 || self.residual_eps <= 0.0 || self.dare_eps <= 0.0 {
            return Err(Error::Parse("tolerances must be strictly positive".into()));
        }
        if self.dare_max_iter == 0 {
            return Err(Error::Parse("dare_max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidMatrix(format!("{what} has non-finite entries")))
    }
}

/// Singular values of `m` (unordered use sites must sort themselves).
fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let svd = m.clone().svd(false, false);
    svd.singular_values.iter().copied().collect()
}

/// The rank cutoff `rank_eps * sigma_max * max(rows, cols)` for `m`.
fn rank_cutoff(m: &DMatrix<f64>, sigma_max: f64, tol: &Tolerances) -> f64 {
    tol.rank_eps * sigma_max * m.nrows().max(m.ncols()) as f64
}

/// Numerical rank of `m`: singular values above the relative cutoff.
pub fn svd_rank(m: &DMatrix<f64>, tol: &Tolerances) -> Result<usize> {
    tol.validate()?;
    ensure_finite(m, "rank argument")?;
    let sv = singular_values(m);
    let sigma_max = sv.iter().cloned().fold(0.0_f64, f64::max);
    if sigma_max == 0.0 {
        return Ok(0);
    }
    let cut = rank_cutoff(m, sigma_max, tol);
    Ok(sv.iter().filter(|&&s| s > cut).count())
}

/// Orthonormal basis of the null space of `m`, one column per null direction.
///
/// The column count is exactly `cols(m) - svd_rank(m)`. Columns are ordered by
/// increasing singular value of the direction they annihilate and sign-fixed so
/// the entry of largest magnitude is positive, making the basis deterministic.
pub fn null_space_basis(m: &DMatrix<f64>, tol: &Tolerances) -> Result<DMatrix<f64>> {
    tol.validate()?;
    ensure_finite(m, "null-space argument")?;
    let c = m.ncols();
    let rank = svd_rank(m, tol)?;
    let nullity = c - rank;
    if nullity == 0 {
        return Ok(DMatrix::zeros(c, 0));
    }
    if rank == 0 {
        return Ok(DMatrix::identity(c, c));
    }
    // Eigenvectors of the (small) Gram matrix give a complete orthonormal
    // right-singular basis even when m is wide; ascending eigenvalues put the
    // null directions first.
    let gram = m.transpose() * m;
    let eig = nalgebra::SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[i]
            .partial_cmp(&eig.eigenvalues[j])
            .expect("finite eigenvalues")
    });
    let mut basis = DMatrix::zeros(c, nullity);
    for (out_col, &src) in order.iter().take(nullity).enumerate() {
        basis.set_column(out_col, &eig.eigenvectors.column(src));
    }
    fix_column_signs(&mut basis);
    Ok(basis)
}

/// Flip column signs so the largest-magnitude entry of each column is positive.
pub(crate) fn fix_column_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mut best = 0usize;
        let mut best_abs = -1.0f64;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Whether `target` lies in the column span of `others`:
/// true iff appending it does not raise the numerical rank.
pub fn in_span(target: &DVector<f64>, others: &DMatrix<f64>, tol: &Tolerances) -> Result<bool> {
    if others.ncols() > 0 && others.nrows() != target.len() {
        return Err(Error::Shape(format!(
            "span test: target has {} rows, basis has {}",
            target.len(),
            others.nrows()
        )));
    }
    let mut augmented = DMatrix::zeros(target.len(), others.ncols() + 1);
    for (j, col) in others.column_iter().enumerate() {
        augmented.set_column(j, &col);
    }
    augmented.set_column(others.ncols(), target);
    let base_rank = if others.ncols() == 0 {
        0
    } else {
        svd_rank(others, tol)?
    };
    Ok(svd_rank(&augmented, tol)? == base_rank)
}

/// Largest eigenvalue magnitude of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(Error::Shape(format!(
            "spectral radius needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    ensure_finite(m, "spectral-radius argument")?;
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let eigs = m.clone().complex_eigenvalues();
    Ok(eigs.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Minimum-norm least-squares solution X of `A X = B` via the SVD, dropping
/// singular values below the rank cutoff (exposes the null-space ambiguity of
/// rank-deficient regressions deterministically).
pub fn least_squares_min_norm(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    tol: &Tolerances,
) -> Result<DMatrix<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::Shape(format!(
            "least squares: A has {} rows, B has {}",
            a.nrows(),
            b.nrows()
        )));
    }
    ensure_finite(a, "least-squares A")?;
    ensure_finite(b, "least-squares B")?;
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd with U");
    let v_t = svd.v_t.as_ref().expect("svd with V");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let mut x = DMatrix::zeros(a.ncols(), b.ncols());
    if sigma_max == 0.0 {
        return Ok(x);
    }
    let cut = rank_cutoff(a, sigma_max, tol);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cut {
            let coeff = (u.column(i).transpose() * b) / s; // 1 x ncols(B)
            x += v_t.row(i).transpose() * coeff;
        }
    }
    Ok(x)
}

/// Stabilizing solution of the discrete algebraic Riccati equation together
/// with the associated state-feedback gain.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    /// Symmetric PSD fixed point P of
    /// `P = Qx + A'PA - A'PB (R + B'PB)^-1 B'PA`.
    pub p: DMatrix<f64>,
    /// Gain `L = (R + B'PB)^-1 B'PA`; the closed loop is `A - B L`.
    pub gain: DMatrix<f64>,
    /// Fixed-point iterations used.
    pub iterations: usize,
}

/// Solve the discrete algebraic Riccati equation by fixed-point iteration
/// from `P0 = Qx`, symmetrizing each iterate.
///
/// Convergence failure within `dare_max_iter` is reported as
/// [`Error::NotStabilizable`]; a singular `R + B'PB` as [`Error::SingularGain`].
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    qx: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: &Tolerances,
) -> Result<RiccatiSolution> {
    tol.validate()?;
    let p_dim = a.nrows();
    let l_dim = b.ncols();
    if a.ncols() != p_dim || b.nrows() != p_dim {
        return Err(Error::Shape("Riccati: A must be square and B conformable".into()));
    }
    if qx.nrows() != p_dim || qx.ncols() != p_dim || r.nrows() != l_dim || r.ncols() != l_dim {
        return Err(Error::Shape("Riccati: Qx must be p x p and R must be l x l".into()));
    }
    ensure_finite(a, "Riccati A")?;
    ensure_finite(b, "Riccati B")?;
    ensure_finite(qx, "Riccati Qx")?;
    ensure_finite(r, "Riccati R")?;

    let mut p = qx.clone();
    for iter in 0..tol.dare_max_iter {
        let (gain, p_next) = dare_step(a, b, qx, r, &p)?;
        if !p_next.iter().all(|v| v.is_finite()) {
            return Err(Error::NotStabilizable { iters: iter + 1 });
        }
        let delta = (&p_next - &p).norm();
        if delta <= tol.dare_eps * (1.0 + p.norm()) {
            return Ok(RiccatiSolution {
                p: p_next,
                gain,
                iterations: iter + 1,
            });
        }
        p = p_next;
    }
    Err(Error::NotStabilizable {
        iters: tol.dare_max_iter,
    })
}

/// One Riccati iteration: returns the gain at `p` and the next iterate.
fn dare_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    qx: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let btp = b.transpose() * p;
    let denom = r + &btp * b;
    let chol = nalgebra::Cholesky::new(denom).ok_or(Error::SingularGain)?;
    let gain = chol.solve(&(&btp * a));
    let atp = a.transpose() * p;
    let p_next = qx + &atp * a - (&atp * b) * &gain;
    let sym = (&p_next + p_next.transpose()) * 0.5;
    Ok((gain, sym))
}

/// Frobenius norm of the Riccati residual of `(P, gain)` for the given data.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    qx: &DMatrix<f64>,
    sol: &RiccatiSolution,
) -> f64 {
    let atp = a.transpose() * &sol.p;
    let res = &atp * a - (&atp * b) * &sol.gain - &sol.p + qx;
    res.norm()
}
