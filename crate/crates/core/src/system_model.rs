//! Discrete-time LTI systems with a free-parameter mask, trajectory
//! simulation with optional uniform additive noise, Markov parameters, and
//! the JSON / CSV interchange formats used by the command-line tools.
//!
//! The model is `x(t+1) = A x(t) + B u(t) + w(t)`, `y(t) = C x(t) + v(t)`,
//! with the parameter vector theta given by the masked entries of A, B, C in
//! mask order.

use std::collections::HashSet;
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which parameter matrix a mask entry refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatrixId {
    A,
    B,
    C,
}

/// One free parameter: a (matrix, row, col) coordinate.
///
/// Serializes as a JSON array such as `["A", 0, 0]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskEntry(pub MatrixId, pub usize, pub usize);

/// Parameterized LTI system; the mask selects which entries form theta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LtiSystemRaw", into = "LtiSystemRaw")]
pub struct LtiSystem {
    /// State matrix, p x p.
    pub a: DMatrix<f64>,
    /// Input matrix, p x l.
    pub b: DMatrix<f64>,
    /// Output matrix, m x p.
    pub c: DMatrix<f64>,
    /// Free-parameter coordinates, in theta order.
    pub mask: Vec<MaskEntry>,
    /// Initial state (defaults to zero).
    pub x0: DVector<f64>,
}

/// On-disk shape of [`LtiSystem`]: row-major nested arrays keyed
/// `"A"`, `"B"`, `"C"`, plus `"mask"` and optional `"x0"`.
#[derive(Serialize, Deserialize)]
struct LtiSystemRaw {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    mask: Vec<MaskEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x0: Option<Vec<f64>>,
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Shape(format!("{what} has no rows")));
    }
    let ncols = rows[0].len();
    if ncols == 0 {
        return Err(Error::Shape(format!("{what} has empty rows")));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Shape(format!("{what} rows have inconsistent lengths")));
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        ncols,
        rows.iter().flatten().copied(),
    ))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

impl TryFrom<LtiSystemRaw> for LtiSystem {
    type Error = Error;

    fn try_from(raw: LtiSystemRaw) -> Result<Self> {
        let a = rows_to_matrix(&raw.a, "A")?;
        let b = rows_to_matrix(&raw.b, "B")?;
        let c = rows_to_matrix(&raw.c, "C")?;
        let x0 = match raw.x0 {
            Some(v) => DVector::from_vec(v),
            None => DVector::zeros(a.nrows()),
        };
        LtiSystem::new(a, b, c, raw.mask, x0)
    }
}

impl From<LtiSystem> for LtiSystemRaw {
    fn from(sys: LtiSystem) -> Self {
        let x0 = if sys.x0.iter().all(|v| *v == 0.0) {
            None
        } else {
            Some(sys.x0.iter().copied().collect())
        };
        LtiSystemRaw {
            a: matrix_to_rows(&sys.a),
            b: matrix_to_rows(&sys.b),
            c: matrix_to_rows(&sys.c),
            mask: sys.mask,
            x0,
        }
    }
}

impl LtiSystem {
    /// Build a system, validating shapes and the mask.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        mask: Vec<MaskEntry>,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let sys = LtiSystem { a, b, c, mask, x0 };
        sys.validate()?;
        Ok(sys)
    }

    /// A system whose every matrix entry is a free parameter
    /// (mask order: all of A row-major, then B, then C).
    pub fn fully_masked(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let mut mask = Vec::new();
        for (id, m) in [(MatrixId::A, &a), (MatrixId::B, &b), (MatrixId::C, &c)] {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    mask.push(MaskEntry(id, i, j));
                }
            }
        }
        let p = a.nrows();
        LtiSystem::new(a, b, c, mask, DVector::zeros(p))
    }

    fn validate(&self) -> Result<()> {
        let (p, l, m) = (self.a.nrows(), self.b.ncols(), self.c.nrows());
        if self.a.ncols() != p {
            return Err(Error::Shape(format!(
                "A must be square, got {}x{}",
                p,
                self.a.ncols()
            )));
        }
        if self.b.nrows() != p {
            return Err(Error::Shape(format!(
                "B must have {} rows to match A, got {}",
                p,
                self.b.nrows()
            )));
        }
        if self.c.ncols() != p {
            return Err(Error::Shape(format!(
                "C must have {} columns to match A, got {}",
                p,
                self.c.ncols()
            )));
        }
        if self.x0.len() != p {
            return Err(Error::Shape(format!(
                "x0 must have length {}, got {}",
                p,
                self.x0.len()
            )));
        }
        for mat in [&self.a, &self.b, &self.c] {
            if mat.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidMatrix("system matrices must be finite".into()));
            }
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix("x0 must be finite".into()));
        }
        if self.mask.is_empty() {
            return Err(Error::Shape("mask must select at least one parameter".into()));
        }
        let mut seen = HashSet::new();
        for &MaskEntry(id, r, cidx) in &self.mask {
            let (rows, cols) = match id {
                MatrixId::A => (p, p),
                MatrixId::B => (p, l),
                MatrixId::C => (m, p),
            };
            if r >= rows || cidx >= cols {
                return Err(Error::Shape(format!(
                    "mask entry ({id:?},{r},{cidx}) out of range for a {rows}x{cols} matrix"
                )));
            }
            if !seen.insert((id, r, cidx)) {
                return Err(Error::Shape(format!(
                    "duplicate mask entry ({id:?},{r},{cidx})"
                )));
            }
        }
        Ok(())
    }

    /// State dimension.
    pub fn p(&self) -> usize {
        self.a.nrows()
    }

    /// Input dimension.
    pub fn l(&self) -> usize {
        self.b.ncols()
    }

    /// Output dimension.
    pub fn m(&self) -> usize {
        self.c.nrows()
    }

    /// Number of free parameters.
    pub fn n_params(&self) -> usize {
        self.mask.len()
    }

    /// Value at a mask coordinate.
    pub fn entry(&self, e: MaskEntry) -> f64 {
        let MaskEntry(id, r, c) = e;
        match id {
            MatrixId::A => self.a[(r, c)],
            MatrixId::B => self.b[(r, c)],
            MatrixId::C => self.c[(r, c)],
        }
    }

    /// Current theta: masked entries in mask order.
    pub fn extract_params(&self) -> DVector<f64> {
        DVector::from_iterator(self.mask.len(), self.mask.iter().map(|&e| self.entry(e)))
    }

    /// Copy of the system with masked entries replaced by `theta`.
    pub fn apply_params(&self, theta: &DVector<f64>) -> Result<LtiSystem> {
        if theta.len() != self.mask.len() {
            return Err(Error::Shape(format!(
                "theta has length {}, mask selects {} parameters",
                theta.len(),
                self.mask.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix("theta must be finite".into()));
        }
        let mut out = self.clone();
        for (&MaskEntry(id, r, c), &v) in self.mask.iter().zip(theta.iter()) {
            match id {
                MatrixId::A => out.a[(r, c)] = v,
                MatrixId::B => out.b[(r, c)] = v,
                MatrixId::C => out.c[(r, c)] = v,
            }
        }
        Ok(out)
    }

    /// Copy of the system with a different initial state.
    pub fn with_x0(&self, x0: DVector<f64>) -> Result<LtiSystem> {
        let mut out = self.clone();
        out.x0 = x0;
        out.validate()?;
        Ok(out)
    }

    /// Parse from the JSON interchange format.
    pub fn from_json_str(s: &str) -> Result<LtiSystem> {
        Ok(serde_json::from_str(s)?)
    }

    /// Serialize to pretty JSON in the interchange format.
    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Load from a JSON file.
    pub fn load_json(path: &Path) -> Result<LtiSystem> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        LtiSystem::from_json_str(&text)
    }
}

/// Markov parameters `[M_0 .. M_{t-1}]` with `M_k = C A^k B`.
pub fn markov_params(sys: &LtiSystem, t: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(t);
    let mut ca = sys.c.clone();
    for k in 0..t {
        out.push(&ca * &sys.b);
        if k + 1 < t {
            ca *= &sys.a;
        }
    }
    out
}

/// Additive uniform noise on `[-amp, amp]` for process (`w`) and output (`v`)
/// channels, drawn from a seeded stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Process-noise amplitude (applied to each state channel).
    pub w_amp: f64,
    /// Output-noise amplitude (applied to each output channel).
    pub v_amp: f64,
    /// RNG seed; equal seeds give bit-identical noise.
    pub seed: u64,
}

impl NoiseSpec {
    fn validate(&self) -> Result<()> {
        if self.w_amp < 0.0 || self.v_amp < 0.0 || !self.w_amp.is_finite() || !self.v_amp.is_finite()
        {
            return Err(Error::Parse("noise amplitudes must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// A logged input/output run, optionally with states and the noise seed used.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Inputs, T x l.
    pub u: DMatrix<f64>,
    /// Outputs, T x m.
    pub y: DMatrix<f64>,
    /// States, T x p, when recorded.
    pub x: Option<DMatrix<f64>>,
    /// Seed of the noise stream, when the run was noisy.
    pub noise_seed: Option<u64>,
}

impl Trajectory {
    /// Build a trajectory, validating shapes and finiteness.
    pub fn new(
        u: DMatrix<f64>,
        y: DMatrix<f64>,
        x: Option<DMatrix<f64>>,
        noise_seed: Option<u64>,
    ) -> Result<Self> {
        if u.nrows() != y.nrows() {
            return Err(Error::Shape(format!(
                "u has {} steps but y has {}",
                u.nrows(),
                y.nrows()
            )));
        }
        if let Some(x) = &x {
            if x.nrows() != u.nrows() {
                return Err(Error::Shape(format!(
                    "u has {} steps but x has {}",
                    u.nrows(),
                    x.nrows()
                )));
            }
        }
        if u.nrows() == 0 {
            return Err(Error::Shape("trajectory must have at least one step".into()));
        }
        for (name, m) in [("u", Some(&u)), ("y", Some(&y)), ("x", x.as_ref())] {
            if let Some(m) = m {
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidMatrix(format!(
                        "trajectory {name} has non-finite entries"
                    )));
                }
            }
        }
        Ok(Trajectory { u, y, x, noise_seed })
    }

    /// Horizon (number of steps).
    pub fn t(&self) -> usize {
        self.u.nrows()
    }

    /// Input dimension.
    pub fn l(&self) -> usize {
        self.u.ncols()
    }

    /// Output dimension.
    pub fn m(&self) -> usize {
        self.y.ncols()
    }

    /// Write as CSV with header `t,u_1..u_l,y_1..y_m[,x_1..x_p]`.
    ///
    /// Floats use the shortest representation that round-trips exactly, so a
    /// written trajectory reads back bit-identical.
    pub fn write_csv<W: IoWrite>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        for j in 0..self.l() {
            header.push(format!("u_{}", j + 1));
        }
        for j in 0..self.m() {
            header.push(format!("y_{}", j + 1));
        }
        if let Some(x) = &self.x {
            for j in 0..x.ncols() {
                header.push(format!("x_{}", j + 1));
            }
        }
        wtr.write_record(&header)?;
        for step in 0..self.t() {
            let mut record = vec![step.to_string()];
            record.extend(self.u.row(step).iter().map(|v| v.to_string()));
            record.extend(self.y.row(step).iter().map(|v| v.to_string()));
            if let Some(x) = &self.x {
                record.extend(x.row(step).iter().map(|v| v.to_string()));
            }
            wtr.write_record(&record)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Parse from the CSV format written by [`Trajectory::write_csv`].
    pub fn read_csv<R: IoRead>(r: R) -> Result<Trajectory> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let fields: Vec<&str> = headers.iter().collect();
        if fields.first() != Some(&"t") {
            return Err(Error::Parse("trajectory CSV must start with a 't' column".into()));
        }
        let count_prefixed = |prefix: &str, start: usize| -> Result<usize> {
            let mut k = 0;
            while start + k < fields.len() && fields[start + k].starts_with(prefix) {
                let expect = format!("{}{}", prefix, k + 1);
                if fields[start + k] != expect {
                    return Err(Error::Parse(format!(
                        "trajectory CSV column {} should be named {}",
                        start + k + 1,
                        expect
                    )));
                }
                k += 1;
            }
            Ok(k)
        };
        let l = count_prefixed("u_", 1)?;
        let m = count_prefixed("y_", 1 + l)?;
        let p = count_prefixed("x_", 1 + l + m)?;
        if l == 0 || m == 0 {
            return Err(Error::Parse("trajectory CSV needs u_* and y_* columns".into()));
        }
        if 1 + l + m + p != fields.len() {
            return Err(Error::Parse("trajectory CSV has unrecognized columns".into()));
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (idx, record) in rdr.records().enumerate() {
            let record = record?;
            if record.len() != fields.len() {
                return Err(Error::Parse(format!(
                    "trajectory CSV row {} has {} fields, expected {}",
                    idx + 1,
                    record.len(),
                    fields.len()
                )));
            }
            let step: usize = record[0]
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad step index {:?}", &record[0])))?;
            if step != idx {
                return Err(Error::Parse(format!(
                    "trajectory CSV steps must be 0..T-1 in order, got {step} at row {idx}"
                )));
            }
            let vals: Vec<f64> = record
                .iter()
                .skip(1)
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad float {s:?}")))
                })
                .collect::<Result<_>>()?;
            rows.push(vals);
        }
        let t = rows.len();
        if t == 0 {
            return Err(Error::Parse("trajectory CSV has no data rows".into()));
        }
        let grab = |offset: usize, width: usize| -> DMatrix<f64> {
            DMatrix::from_fn(t, width, |i, j| rows[i][offset + j])
        };
        let u = grab(0, l);
        let y = grab(l, m);
        let x = if p > 0 { Some(grab(l + m, p)) } else { None };
        Trajectory::new(u, y, x, None)
    }

    /// Write to a CSV file.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?)
    }

    /// Load from a CSV file.
    pub fn load_csv(path: &Path) -> Result<Trajectory> {
        Trajectory::read_csv(std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?)
    }
}

/// One uniform draw on `[-amp, amp]`.
fn uniform(rng: &mut ChaCha8Rng, amp: f64) -> f64 {
    amp * (2.0 * rng.random::<f64>() - 1.0)
}

/// Run the system recursion over the input sequence `u` (T x l), recording
/// inputs, outputs, and states.
///
/// With a [`NoiseSpec`], each step draws the output noise `v(t)` (m values)
/// and then the process noise `w(t)` (p values) from one seeded stream, so
/// runs are reproducible.
pub fn simulate(sys: &LtiSystem, u: &DMatrix<f64>, noise: Option<&NoiseSpec>) -> Result<Trajectory> {
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
    if let Some(n) = noise {
        n.validate()?;
    }
    let (t, p, m) = (u.nrows(), sys.p(), sys.m());
    let mut rng = noise.map(|n| ChaCha8Rng::seed_from_u64(n.seed));
    let mut x = sys.x0.clone();
    let mut xs = DMatrix::zeros(t, p);
    let mut ys = DMatrix::zeros(t, m);
    for step in 0..t {
        xs.row_mut(step).tr_copy_from(&x);
        let mut y = &sys.c * &x;
        if let (Some(rng), Some(n)) = (rng.as_mut(), noise) {
            for i in 0..m {
                y[i] += uniform(rng, n.v_amp);
            }
        }
        ys.row_mut(step).tr_copy_from(&y);
        let mut x_next = &sys.a * &x + &sys.b * u.row(step).transpose();
        if let (Some(rng), Some(n)) = (rng.as_mut(), noise) {
            for i in 0..p {
                x_next[i] += uniform(rng, n.w_amp);
            }
        }
        x = x_next;
    }
    Trajectory::new(u.clone(), ys, Some(xs), noise.map(|n| n.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> LtiSystem {
        LtiSystem::fully_masked(
            DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.3]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
            DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
        )
        .unwrap()
    }

    #[test]
    fn json_round_trip_preserves_system() {
        let sys = toy();
        let text = sys.to_json_pretty().unwrap();
        let back = LtiSystem::from_json_str(&text).unwrap();
        assert_eq!(sys, back);
    }

    #[test]
    fn mask_round_trip_is_identity() {
        let sys = toy();
        let theta = sys.extract_params();
        assert_eq!(sys.apply_params(&theta).unwrap(), sys);
    }

    #[test]
    fn duplicate_mask_entries_are_rejected() {
        let mut sys = toy();
        sys.mask.push(MaskEntry(MatrixId::A, 0, 0));
        let err = LtiSystem::new(sys.a, sys.b, sys.c, sys.mask, sys.x0).unwrap_err();
        assert_eq!(err.code(), "shape");
    }

    #[test]
    fn zero_input_zero_state_gives_zero_output() {
        let sys = toy();
        let u = DMatrix::zeros(10, 1);
        let traj = simulate(&sys, &u, None).unwrap();
        assert!(traj.y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn first_markov_parameter_is_cb() {
        let sys = toy();
        let ms = markov_params(&sys, 3);
        assert_eq!(ms.len(), 3);
        assert!((&ms[0] - &sys.c * &sys.b).norm() < 1e-15);
        assert!((&ms[1] - &sys.c * &sys.a * &sys.b).norm() < 1e-15);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let sys = toy();
        let u = DMatrix::from_fn(5, 1, |i, _| (i as f64 * 0.7).sin());
        let traj = simulate(&sys, &u, Some(&NoiseSpec { w_amp: 0.01, v_amp: 0.02, seed: 9 })).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let back = Trajectory::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.u, traj.u);
        assert_eq!(back.y, traj.y);
        assert_eq!(back.x, traj.x);
    }
}
