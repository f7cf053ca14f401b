//! Extended dynamic mode decomposition: snapshot data, the finite Koopman
//! matrix, its spectrum, and the realified eigenfunction coordinates.

use std::cmp::Ordering;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::error::{check_len, Error, Result};
use crate::linalg::{self, serde_matrix};
use crate::simulator::{rk4_integrate, Plant};

/// Substeps used when integrating the unforced flow across one sampling interval.
pub const SNAPSHOT_SUBSTEPS: usize = 10;
/// Smallest admissible discrete eigenvalue magnitude.
pub const EIGENVALUE_FLOOR: f64 = 1e-12;
/// Relative tolerance for treating two eigenvalues as a conjugate pair.
pub const CONJUGACY_TOL: f64 = 1e-8;
/// Real parts of continuous eigenvalues closer than this sort as ties.
const SORT_RESOLUTION: f64 = 1e-9;

/// Paired samples `(x_k, y_k)` of the unforced flow.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    /// States, one column per sample (`n × N_t`).
    pub x: DMatrix<f64>,
    /// Successors after `dt`, same layout as `x`.
    pub y: DMatrix<f64>,
    pub dt: f64,
    pub trajectory_ids: Vec<usize>,
    pub times: Vec<f64>,
    /// `G_i(x_k)` per input channel, each `n × N_t`.
    pub control_samples: Option<Vec<DMatrix<f64>>>,
}

impl SnapshotSet {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>, dt: f64) -> Result<Self> {
        let count = x.ncols();
        Self::with_labels(x, y, dt, vec![0; count], (0..count).map(|k| k as f64 * dt).collect())
    }

    pub fn with_labels(
        x: DMatrix<f64>,
        y: DMatrix<f64>,
        dt: f64,
        trajectory_ids: Vec<usize>,
        times: Vec<f64>,
    ) -> Result<Self> {
        if x.shape() != y.shape() {
            return Err(Error::DimensionMismatch {
                context: "snapshot successors",
                expected: x.ncols(),
                actual: y.ncols(),
            });
        }
        if x.ncols() == 0 {
            return Err(Error::Config("snapshot set needs at least one pair".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::Config(format!("snapshot dt must be positive, got {dt}")));
        }
        check_len("snapshot trajectory ids", x.ncols(), trajectory_ids.len())?;
        check_len("snapshot times", x.ncols(), times.len())?;
        Ok(Self {
            x,
            y,
            dt,
            trajectory_ids,
            times,
            control_samples: None,
        })
    }

    pub fn n_states(&self) -> usize {
        self.x.nrows()
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }

    pub fn state(&self, k: usize) -> DVector<f64> {
        self.x.column(k).into_owned()
    }

    pub fn states(&self) -> Vec<DVector<f64>> {
        (0..self.len()).map(|k| self.state(k)).collect()
    }

    /// Writes `trajectory_id, t, x_1..x_n, y_1..y_n`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let n = self.n_states();
        let mut header = vec!["trajectory_id".to_string(), "t".to_string()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.extend((1..=n).map(|i| format!("y_{i}")));
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut rec = vec![self.trajectory_ids[k].to_string(), self.times[k].to_string()];
            rec.extend(self.x.column(k).iter().map(|v| v.to_string()));
            rec.extend(self.y.column(k).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV produced by [`SnapshotSet::write_csv`]. The sampling interval is
    /// not stored in the file and must be supplied.
    pub fn read_csv(path: &Path, dt: f64) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let invalid = |reason: String| Error::InvalidArtifact {
            path: path.display().to_string(),
            reason,
        };
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.len() < 4 || (header.len() - 2) % 2 != 0 || &header[0] != "trajectory_id" || &header[1] != "t" {
            return Err(invalid("unexpected snapshot header".into()));
        }
        let n = (header.len() - 2) / 2;
        let mut ids = Vec::new();
        let mut times = Vec::new();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec[i].parse::<f64>().map_err(|e| invalid(format!("column {i}: {e}")))
            };
            ids.push(rec[0].parse::<usize>().map_err(|e| invalid(format!("trajectory id: {e}")))?);
            times.push(parse(1)?);
            for i in 0..n {
                xs.push(parse(2 + i)?);
            }
            for i in 0..n {
                ys.push(parse(2 + n + i)?);
            }
        }
        let count = ids.len();
        if count == 0 {
            return Err(invalid("no snapshot rows".into()));
        }
        let x = DMatrix::from_column_slice(n, count, &xs);
        let y = DMatrix::from_column_slice(n, count, &ys);
        Self::with_labels(x, y, dt, ids, times)
    }
}

/// Simulates the unforced plant from each initial condition and records
/// `steps_per_trajectory` consecutive pairs per trajectory.
pub fn generate_snapshots(
    plant: &Plant,
    initial_conditions: &[DVector<f64>],
    dt: f64,
    steps_per_trajectory: usize,
) -> Result<SnapshotSet> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("snapshot dt must be positive, got {dt}")));
    }
    let n = plant.n();
    let h = dt / SNAPSHOT_SUBSTEPS as f64;
    let unforced = vec![0.0; plant.m()];
    let field = |x: &DVector<f64>, _: &[f64]| plant.drift(x);

    let per_traj: Vec<Result<Vec<DVector<f64>>>> = initial_conditions
        .par_iter()
        .enumerate()
        .map(|(id, x0)| {
            plant.check_state(x0)?;
            let mut path = Vec::with_capacity(steps_per_trajectory + 1);
            path.push(x0.clone());
            for k in 0..steps_per_trajectory {
                let next = rk4_integrate(field, &path[k], &unforced, h, SNAPSHOT_SUBSTEPS).map_err(|_| {
                    Error::NonFinite(format!("trajectory {id} diverged at step {k}"))
                })?;
                path.push(next);
            }
            Ok(path)
        })
        .collect();

    let total = initial_conditions.len() * steps_per_trajectory;
    let mut x = DMatrix::zeros(n, total);
    let mut y = DMatrix::zeros(n, total);
    let mut ids = Vec::with_capacity(total);
    let mut times = Vec::with_capacity(total);
    let mut col = 0;
    for (id, path) in per_traj.into_iter().enumerate() {
        let path = path?;
        for k in 0..steps_per_trajectory {
            x.set_column(col, &path[k]);
            y.set_column(col, &path[k + 1]);
            ids.push(id);
            times.push(k as f64 * dt);
            col += 1;
        }
    }
    let mut set = SnapshotSet::with_labels(x, y, dt, ids, times)?;
    set.control_samples = Some(control_samples(plant, &set.x));
    Ok(set)
}

/// Evaluates every control field at every column of `x`.
pub fn control_samples(plant: &Plant, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    (0..plant.m())
        .map(|channel| {
            let mut g = DMatrix::zeros(plant.n(), x.ncols());
            for k in 0..x.ncols() {
                g.set_column(k, &plant.control_field(channel, &x.column(k).into_owned()));
            }
            g
        })
        .collect()
}

/// Least-squares Koopman matrix together with fit diagnostics.
#[derive(Debug, Clone)]
pub struct KoopmanFit {
    pub matrix: DMatrix<f64>,
    /// `Σ_i ‖φ(y_i) − K φ(x_i)‖²`.
    pub residual: f64,
    pub effective_rank: usize,
}

/// Fits `K` minimizing `Σ ‖φ(y_i) − K φ(x_i)‖² + ρ ‖K‖²`.
///
/// `ridge` is relative: the absolute penalty is `ridge` times the mean diagonal of
/// `φ_X φ_X^T`. With `ridge == 0` the result is the pseudoinverse solution
/// `K = φ_XY φ_XX^†`.
pub fn fit_koopman_matrix(data: &SnapshotSet, dict: &Dictionary, ridge: f64) -> Result<KoopmanFit> {
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(Error::Config(format!("ridge must be non-negative, got {ridge}")));
    }
    let phi_x = dict.eval_columns(&data.x)?;
    let phi_y = dict.eval_columns(&data.y)?;
    let n = dict.len();
    let mean_diag = phi_x.norm_squared() / n as f64;
    let sol = linalg::lstsq(&phi_x.transpose(), &phi_y.transpose(), ridge * mean_diag);
    if sol.rank < n {
        log::warn!("lifted snapshot matrix has effective rank {} < {}", sol.rank, n);
    }
    let matrix = sol.solution.transpose();
    let residual = (&phi_y - &matrix * &phi_x).norm_squared();
    Ok(KoopmanFit {
        matrix,
        residual,
        effective_rank: sol.rank,
    })
}

/// How lifted coordinates map onto the complex eigenfunctions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RealifyBlock {
    /// `z_j = ψ̃_j`.
    Real { index: usize },
    /// `(z_j, z_{j+1}) = (2 Re ψ̃_j, −2 Im ψ̃_j)`, with `ψ̃_{j+1} = ψ̃_j*`.
    Pair { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplexJson {
    pub re: f64,
    pub im: f64,
}

impl From<Complex64> for ComplexJson {
    fn from(c: Complex64) -> Self {
        Self { re: c.re, im: c.im }
    }
}

impl From<ComplexJson> for Complex64 {
    fn from(c: ComplexJson) -> Self {
        Complex64::new(c.re, c.im)
    }
}

/// Spectrum of the fitted Koopman matrix and the real block-diagonal generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpectrumJson", into = "SpectrumJson")]
pub struct KoopmanSpectrum {
    pub dt: f64,
    pub koopman_matrix: DMatrix<f64>,
    pub discrete_eigenvalues: Vec<Complex64>,
    pub continuous_eigenvalues: Vec<Complex64>,
    /// Eigenvector coefficients `e_j` as columns; `ψ̃_j(x) = φ(x)^T e_j`.
    pub eigenvectors: DMatrix<Complex64>,
    pub blocks: Vec<RealifyBlock>,
    pub lambda: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpectrumJson {
    dt: f64,
    #[serde(with = "serde_matrix")]
    koopman_matrix: DMatrix<f64>,
    discrete_eigenvalues: Vec<ComplexJson>,
    continuous_eigenvalues: Vec<ComplexJson>,
    /// Row-major.
    eigenvectors: Vec<Vec<ComplexJson>>,
    blocks: Vec<RealifyBlock>,
    #[serde(with = "serde_matrix")]
    lambda: DMatrix<f64>,
}

impl From<KoopmanSpectrum> for SpectrumJson {
    fn from(s: KoopmanSpectrum) -> Self {
        Self {
            dt: s.dt,
            koopman_matrix: s.koopman_matrix,
            discrete_eigenvalues: s.discrete_eigenvalues.into_iter().map(Into::into).collect(),
            continuous_eigenvalues: s.continuous_eigenvalues.into_iter().map(Into::into).collect(),
            eigenvectors: s
                .eigenvectors
                .row_iter()
                .map(|r| r.iter().map(|c| (*c).into()).collect())
                .collect(),
            blocks: s.blocks,
            lambda: s.lambda,
        }
    }
}

impl TryFrom<SpectrumJson> for KoopmanSpectrum {
    type Error = String;

    fn try_from(j: SpectrumJson) -> std::result::Result<Self, String> {
        let n = j.koopman_matrix.nrows();
        let square = |m: &DMatrix<f64>| m.nrows() == n && m.ncols() == n;
        if !square(&j.koopman_matrix) || !square(&j.lambda) {
            return Err("spectrum matrices must be N × N".into());
        }
        if j.discrete_eigenvalues.len() != n
            || j.continuous_eigenvalues.len() != n
            || j.eigenvectors.len() != n
            || j.eigenvectors.iter().any(|r| r.len() != n)
        {
            return Err("spectrum arrays must have length N".into());
        }
        let covered: usize = j
            .blocks
            .iter()
            .map(|b| match b {
                RealifyBlock::Real { .. } => 1,
                RealifyBlock::Pair { .. } => 2,
            })
            .sum();
        if covered != n {
            return Err("realification blocks do not cover the spectrum".into());
        }
        Ok(Self {
            dt: j.dt,
            koopman_matrix: j.koopman_matrix,
            discrete_eigenvalues: j.discrete_eigenvalues.into_iter().map(Into::into).collect(),
            continuous_eigenvalues: j.continuous_eigenvalues.into_iter().map(Into::into).collect(),
            eigenvectors: DMatrix::from_fn(n, n, |i, k| j.eigenvectors[i][k].into()),
            blocks: j.blocks,
            lambda: j.lambda,
        })
    }
}

impl KoopmanSpectrum {
    pub fn len(&self) -> usize {
        self.continuous_eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.continuous_eigenvalues.is_empty()
    }

    /// Real `N × N` matrix `M` with `z = M φ(x)`; rows follow the realification
    /// blocks.
    pub fn realified_coefficients(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for block in &self.blocks {
            match *block {
                RealifyBlock::Real { index } => {
                    for i in 0..n {
                        m[(index, i)] = self.eigenvectors[(i, index)].re;
                    }
                }
                RealifyBlock::Pair { index } => {
                    for i in 0..n {
                        let e = self.eigenvectors[(i, index)];
                        m[(index, i)] = 2.0 * e.re;
                        m[(index + 1, i)] = -2.0 * e.im;
                    }
                }
            }
        }
        m
    }

    /// Complex eigenfunction values `ψ̃_j(x)` at a dictionary vector.
    pub fn eigenfunction_values(&self, phi: &DVector<f64>) -> DVector<Complex64> {
        let phic = phi.map(|v| Complex64::new(v, 0.0));
        self.eigenvectors.transpose() * phic
    }

    /// Indices of eigenfunctions that are (numerically) the constant observable.
    pub fn constant_modes(&self, tol: f64) -> Vec<usize> {
        let mut out = Vec::new();
        for block in &self.blocks {
            if let RealifyBlock::Real { index } = *block {
                let col = self.eigenvectors.column(index);
                let off: f64 = col.iter().skip(1).map(|c| c.norm_sqr()).sum::<f64>().sqrt();
                if off <= tol && (col[0].re - 1.0).abs() <= tol {
                    out.push(index);
                }
            }
        }
        out
    }

    /// Replaces near-constant real modes by the exact constant eigenfunction.
    ///
    /// Regularization perturbs the first row of `K` slightly, so the eigenvector
    /// that should be `e_0` comes out with small off-axis entries and an eigenvalue
    /// just off zero. A real mode qualifies when its continuous eigenvalue and its
    /// off-axis coefficient norm are both within `tol`.
    pub fn snap_constant_modes(&mut self, tol: f64) -> Vec<usize> {
        let n = self.len();
        let mut snapped = Vec::new();
        for block in self.blocks.clone() {
            let RealifyBlock::Real { index } = block else { continue };
            let col = self.eigenvectors.column(index);
            let off: f64 = col.iter().skip(1).map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            if off > tol || self.continuous_eigenvalues[index].norm() > tol || col[0].re <= 0.0 {
                continue;
            }
            for i in 0..n {
                self.eigenvectors[(i, index)] = Complex64::new(if i == 0 { 1.0 } else { 0.0 }, 0.0);
            }
            self.continuous_eigenvalues[index] = Complex64::new(0.0, 0.0);
            self.discrete_eigenvalues[index] = Complex64::new(1.0, 0.0);
            self.lambda[(index, index)] = 0.0;
            snapped.push(index);
        }
        snapped
    }
}

/// Eigendecomposes `K`, converts to continuous time and assembles `Λ`.
///
/// Eigenfunction coefficients are the eigenvectors of `K^T`: with
/// `φ(y) ≈ K φ(x)`, an observable `w^T φ` satisfies `w^T φ(y) = λ̃ w^T φ(x)`
/// exactly when `K^T w = λ̃ w`. Modes are sorted by descending real part of
/// `λ_j`, then descending imaginary part; a conjugate pair occupies two adjacent
/// slots with the positive-imaginary member first.
pub fn decompose_and_realify(k: &DMatrix<f64>, dt: f64) -> Result<KoopmanSpectrum> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let n = k.nrows();
    check_len("koopman matrix", n, k.ncols())?;
    let raw = linalg::eig_general(&k.transpose())?;
    for (index, (lambda, _)) in raw.iter().enumerate() {
        if lambda.norm() <= EIGENVALUE_FLOOR {
            return Err(Error::EigenvalueBelowFloor {
                index,
                magnitude: lambda.norm(),
                floor: EIGENVALUE_FLOOR,
            });
        }
    }

    let units = group_conjugates(&raw)?;
    let mut units: Vec<Unit> = units
        .into_iter()
        .map(|u| u.finish(&raw, dt))
        .collect();
    // Real parts are compared on a fixed grid so roundoff cannot reorder ties.
    let grid = |v: f64| (v / SORT_RESOLUTION).round() + 0.0;
    units.sort_by(|a, b| match grid(b.continuous.re).total_cmp(&grid(a.continuous.re)) {
        Ordering::Equal => b.continuous.im.total_cmp(&a.continuous.im),
        other => other,
    });

    let mut discrete = Vec::with_capacity(n);
    let mut continuous = Vec::with_capacity(n);
    let mut eigenvectors = DMatrix::zeros(n, n);
    let mut blocks = Vec::with_capacity(units.len());
    let mut lambda = DMatrix::zeros(n, n);
    for unit in units {
        let j = continuous.len();
        let mu = unit.continuous;
        if unit.paired {
            blocks.push(RealifyBlock::Pair { index: j });
            discrete.push(unit.discrete);
            discrete.push(unit.discrete.conj());
            continuous.push(mu);
            continuous.push(mu.conj());
            eigenvectors.set_column(j, &unit.vector);
            eigenvectors.set_column(j + 1, &unit.vector.map(|c| c.conj()));
            let (magnitude, angle) = (mu.norm(), mu.arg());
            lambda[(j, j)] = magnitude * angle.cos();
            lambda[(j, j + 1)] = magnitude * angle.sin();
            lambda[(j + 1, j)] = -magnitude * angle.sin();
            lambda[(j + 1, j + 1)] = magnitude * angle.cos();
        } else {
            blocks.push(RealifyBlock::Real { index: j });
            discrete.push(unit.discrete);
            continuous.push(mu);
            eigenvectors.set_column(j, &unit.vector);
            lambda[(j, j)] = mu.re;
        }
    }

    Ok(KoopmanSpectrum {
        dt,
        koopman_matrix: k.clone(),
        discrete_eigenvalues: discrete,
        continuous_eigenvalues: continuous,
        eigenvectors,
        blocks,
        lambda,
    })
}

enum Grouping {
    Real(usize),
    Pair { upper: usize },
    NegativeRealPair(usize, usize),
}

struct Unit {
    discrete: Complex64,
    continuous: Complex64,
    vector: DVector<Complex64>,
    paired: bool,
}

impl Grouping {
    fn finish(self, raw: &[(Complex64, DVector<Complex64>)], dt: f64) -> Unit {
        match self {
            Grouping::Real(i) => {
                let lam = Complex64::new(raw[i].0.re, 0.0);
                let v = normalize_phase(&raw[i].1).map(|c| Complex64::new(c.re, 0.0));
                let v = normalize_phase(&v);
                Unit {
                    discrete: lam,
                    continuous: Complex64::new(lam.re.ln() / dt, 0.0),
                    vector: v,
                    paired: false,
                }
            }
            Grouping::Pair { upper } => {
                let lam = raw[upper].0;
                Unit {
                    discrete: lam,
                    continuous: lam.ln() / dt,
                    vector: normalize_phase(&raw[upper].1),
                    paired: true,
                }
            }
            Grouping::NegativeRealPair(a, b) => {
                // Two real eigenvectors sharing one negative eigenvalue combine into a
                // complex pair on the principal branch (imaginary part π/dt).
                let lam = Complex64::new(0.5 * (raw[a].0.re + raw[b].0.re), 0.0);
                let va = normalize_phase(&raw[a].1).map(|c| c.re);
                let vb = normalize_phase(&raw[b].1).map(|c| c.re);
                let v = DVector::from_iterator(
                    va.len(),
                    va.iter().zip(vb.iter()).map(|(&x, &y)| Complex64::new(x, y)),
                );
                Unit {
                    discrete: lam,
                    continuous: Complex64::new(lam.re.abs().ln() / dt, std::f64::consts::PI / dt),
                    vector: normalize_phase(&v),
                    paired: true,
                }
            }
        }
    }
}

fn group_conjugates(raw: &[(Complex64, DVector<Complex64>)]) -> Result<Vec<Grouping>> {
    let n = raw.len();
    let tol = |l: Complex64| CONJUGACY_TOL * l.norm().max(1.0);
    let mut used = vec![false; n];
    let mut out = Vec::new();
    for a in 0..n {
        if used[a] {
            continue;
        }
        let la = raw[a].0;
        if 2.0 * la.im.abs() <= tol(la) {
            used[a] = true;
            if la.re > 0.0 {
                out.push(Grouping::Real(a));
                continue;
            }
            let partner = (0..n).filter(|&b| !used[b]).find(|&b| {
                let lb = raw[b].0;
                2.0 * lb.im.abs() <= tol(lb) && (la - lb).norm() <= tol(la)
            });
            match partner {
                Some(b) => {
                    used[b] = true;
                    out.push(Grouping::NegativeRealPair(a, b));
                }
                None => {
                    return Err(Error::UnpairedEigenvalue { re: la.re, im: la.im });
                }
            }
            continue;
        }
        let partner = (0..n)
            .filter(|&b| b != a && !used[b])
            .map(|b| (b, (la - raw[b].0.conj()).norm()))
            .filter(|&(_, d)| d <= tol(la))
            .min_by(|x, y| x.1.total_cmp(&y.1));
        let Some((b, _)) = partner else {
            return Err(Error::UnpairedEigenvalue { re: la.re, im: la.im });
        };
        used[a] = true;
        used[b] = true;
        let upper = if la.im > 0.0 { a } else { b };
        out.push(Grouping::Pair { upper });
    }
    Ok(out)
}

/// Unit 2-norm with the largest-magnitude entry rotated onto the positive real axis.
fn normalize_phase(v: &DVector<Complex64>) -> DVector<Complex64> {
    let norm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let biggest = v.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let pivot = v
        .iter()
        .position(|c| c.norm() >= biggest * (1.0 - 1e-9))
        .unwrap_or(0);
    let phase = v[pivot].conj() / v[pivot].norm();
    let mut out = v.map(|c| c * phase / norm);
    out[pivot] = Complex64::new(out[pivot].norm(), 0.0);
    out
}

/// Realified eigenfunction coordinates `z = Ψ(x)`.
pub fn eval_eigenfunctions(spectrum: &KoopmanSpectrum, dict: &Dictionary, x: &[f64]) -> Result<DVector<f64>> {
    let phi = dict.eval(x)?;
    check_len("eigenfunction evaluation", spectrum.len(), phi.len())?;
    Ok(realify(spectrum, &spectrum.eigenfunction_values(&phi)))
}

/// Maps complex eigenfunction values to the real lifted coordinates.
pub fn realify(spectrum: &KoopmanSpectrum, values: &DVector<Complex64>) -> DVector<f64> {
    let mut z = DVector::zeros(values.len());
    for block in &spectrum.blocks {
        match *block {
            RealifyBlock::Real { index } => z[index] = values[index].re,
            RealifyBlock::Pair { index } => {
                z[index] = 2.0 * values[index].re;
                z[index + 1] = -2.0 * values[index].im;
            }
        }
    }
    z
}
