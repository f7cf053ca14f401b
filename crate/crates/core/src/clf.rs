//! Quadratic control Lyapunov functions `V(z) = z^T P z` for the bilinear model.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bilinear::{BilinearSystem, KoopmanBilinearModel};
use crate::error::{check_len, Error, Result};
use crate::linalg::{quad_form, serde_matrix, sym_eigen_sorted, symmetrize};

/// Eigenvalues of the symmetric form within this distance of the top one share
/// the subgradient.
const TIE_TOL: f64 = 1e-10;
/// `|L_B V|` at or below this counts as zero in the stabilizability check.
const LBV_ZERO: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClfOptions {
    pub gamma: f64,
    pub c_low: f64,
    pub c_high: f64,
    pub max_iters: usize,
    /// Best-objective improvement below which the run counts as stalled.
    pub tol: f64,
    pub stall_window: usize,
    /// Step size `a = step_scale · c_high` for the `a/√k` schedule.
    pub step_scale: f64,
}

impl Default for ClfOptions {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            c_low: 0.1,
            c_high: 10.0,
            max_iters: 5000,
            tol: 1e-6,
            stall_window: 200,
            step_scale: 0.1,
        }
    }
}

impl ClfOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_low > 0.0 && self.c_low < self.c_high) {
            return Err(Error::Config(format!(
                "clf bounds need 0 < c_low < c_high, got {} and {}",
                self.c_low, self.c_high
            )));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("clf gamma must be >= 0, got {}", self.gamma)));
        }
        if self.max_iters == 0 || self.stall_window == 0 || !(self.step_scale > 0.0) || !(self.tol >= 0.0) {
            return Err(Error::Config("clf solver parameters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisReport {
    /// `λ_max(PΛ + Λ^T P) − γ tr(PB)` at the returned `P`.
    pub objective: f64,
    /// `λ_max(PΛ + Λ^T P)` at the returned `P`.
    pub sigma: f64,
    pub iterations: usize,
    /// False when `max_iters` ran out before the objective stalled.
    pub converged: bool,
    /// Best objective after each iteration, every `trace_stride` iterations.
    pub trace: Vec<f64>,
    pub trace_stride: usize,
}

const TRACE_STRIDE: usize = 50;

fn objective(p: &DMatrix<f64>, lambda: &DMatrix<f64>, b: &DMatrix<f64>, gamma: f64) -> (f64, f64, DMatrix<f64>) {
    let form = p * lambda + lambda.transpose() * p;
    let (values, vectors) = sym_eigen_sorted(&form);
    let n = values.len();
    let top = values[n - 1];
    let mut grad = DMatrix::zeros(n, n);
    let mut ties = 0;
    for i in (0..n).rev() {
        if top - values[i] > TIE_TOL {
            break;
        }
        let v = vectors.column(i);
        let vvt = &v * v.transpose();
        grad += lambda * &vvt + &vvt * lambda.transpose();
        ties += 1;
    }
    grad /= ties as f64;
    grad = symmetrize(&grad);
    let trace_pb = (p * b).trace();
    (top - gamma * trace_pb, top, grad)
}

/// Clamps the eigenvalues of the symmetric part of `m` into `[lo, hi]`.
pub fn project_box(m: &DMatrix<f64>, lo: f64, hi: f64) -> DMatrix<f64> {
    let (values, vectors) = sym_eigen_sorted(m);
    let clamped = DMatrix::from_diagonal(&values.map(|v| v.clamp(lo, hi)));
    symmetrize(&(&vectors * clamped * vectors.transpose()))
}

/// Minimizes `λ_max(PΛ + Λ^T P) − γ tr(PB)` over `c_low I ⪯ P ⪯ c_high I` by
/// projected subgradient descent with normalized steps `a/√k`.
pub fn synthesize_p(
    lambda: &DMatrix<f64>,
    b: &DMatrix<f64>,
    options: &ClfOptions,
) -> Result<(DMatrix<f64>, SynthesisReport)> {
    options.validate()?;
    let n = lambda.nrows();
    check_len("clf lambda columns", n, lambda.ncols())?;
    check_len("clf B rows", n, b.nrows())?;
    check_len("clf B columns", n, b.ncols())?;
    if lambda.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("clf synthesis input".into()));
    }
    let sym_b = symmetrize(b);
    let mid = 0.5 * (options.c_low + options.c_high);
    let a = options.step_scale * options.c_high;

    let mut p = DMatrix::identity(n, n) * mid;
    let (mut f, mut sigma, mut grad) = objective(&p, lambda, b, options.gamma);
    let mut best = (f, sigma, p.clone());
    let mut last_improvement = (0usize, f);
    let mut trace = vec![f];
    let mut converged = false;
    let mut iterations = 0;
    for k in 1..=options.max_iters {
        iterations = k;
        let g = &grad - &sym_b * options.gamma;
        let g_norm = g.norm();
        if g_norm == 0.0 {
            converged = true;
            break;
        }
        let step = a / (k as f64).sqrt() / g_norm;
        p = project_box(&(&p - g * step), options.c_low, options.c_high);
        (f, sigma, grad) = objective(&p, lambda, b, options.gamma);
        if f < best.0 {
            best = (f, sigma, p.clone());
        }
        if last_improvement.1 - best.0 > options.tol {
            last_improvement = (k, best.0);
        } else if k - last_improvement.0 >= options.stall_window {
            converged = true;
            break;
        }
        if k % TRACE_STRIDE == 0 {
            trace.push(best.0);
        }
    }
    if !converged {
        log::warn!("clf synthesis hit max_iters = {} before stalling", options.max_iters);
    }
    let (objective, sigma, p) = best;
    Ok((
        p,
        SynthesisReport {
            objective,
            sigma,
            iterations,
            converged,
            trace,
            trace_stride: TRACE_STRIDE,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Clf {
    #[serde(rename = "P", with = "serde_matrix")]
    pub p: DMatrix<f64>,
    pub r: Option<f64>,
    pub r_hat: Option<f64>,
    pub synthesis_report: SynthesisReport,
    pub level_report: Option<LevelSetReport>,
}

/// Synthesizes `P` for a bare `(Λ, B)` pair; radii stay unset.
pub fn synthesize_clf(lambda: &DMatrix<f64>, b: &DMatrix<f64>, options: &ClfOptions) -> Result<Clf> {
    let (p, synthesis_report) = synthesize_p(lambda, b, options)?;
    Ok(Clf {
        p,
        r: None,
        r_hat: None,
        synthesis_report,
        level_report: None,
    })
}

/// Synthesizes `P` for one input channel of an identified model.
///
/// Constant modes carry no dynamics (`Λ` and `B` vanish on their rows), so the
/// optimization runs on the remaining block and the constant coordinates get
/// `c_low` on the diagonal.
pub fn synthesize_for_model(model: &KoopmanBilinearModel, channel: usize, options: &ClfOptions) -> Result<Clf> {
    let n = model.dim();
    let fixed = model.constant_modes();
    let free: Vec<usize> = (0..n).filter(|i| !fixed.contains(i)).collect();
    let lambda = model.lambda().select_rows(&free).select_columns(&free);
    let b = model.b[channel].select_rows(&free).select_columns(&free);
    let (p_free, synthesis_report) = synthesize_p(&lambda, &b, options)?;
    let mut p = DMatrix::zeros(n, n);
    for (i, &fi) in free.iter().enumerate() {
        for (j, &fj) in free.iter().enumerate() {
            p[(fi, fj)] = p_free[(i, j)];
        }
    }
    for &c in fixed {
        p[(c, c)] = options.c_low;
    }
    Ok(Clf {
        p,
        r: None,
        r_hat: None,
        synthesis_report,
        level_report: None,
    })
}

impl Clf {
    pub fn from_p(p: DMatrix<f64>) -> Self {
        Self {
            p,
            r: None,
            r_hat: None,
            synthesis_report: SynthesisReport {
                objective: f64::NAN,
                sigma: f64::NAN,
                iterations: 0,
                converged: true,
                trace: Vec::new(),
                trace_stride: TRACE_STRIDE,
            },
            level_report: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn r(&self) -> Result<f64> {
        self.r.ok_or_else(|| Error::Config("clf level sets have not been estimated".into()))
    }

    pub fn r_hat(&self) -> Result<f64> {
        self.r_hat.ok_or_else(|| Error::Config("clf level sets have not been estimated".into()))
    }

    pub fn eval_v(&self, z: &DVector<f64>) -> Result<f64> {
        check_len("eval_V", self.dim(), z.len())?;
        Ok(quad_form(&self.p, z))
    }

    /// `z^T (PΛ + Λ^T P) z`.
    pub fn eval_l_lambda_v(&self, lambda: &DMatrix<f64>, z: &DVector<f64>) -> Result<f64> {
        check_len("eval_LLambdaV", self.dim(), z.len())?;
        check_len("eval_LLambdaV", self.dim(), lambda.nrows())?;
        Ok(z.dot(&((&self.p + self.p.transpose()) * (lambda * z))))
    }

    /// `z^T (PB + B^T P) z`.
    pub fn eval_l_b_v(&self, b: &DMatrix<f64>, z: &DVector<f64>) -> Result<f64> {
        check_len("eval_LBV", self.dim(), z.len())?;
        check_len("eval_LBV", self.dim(), b.nrows())?;
        Ok(z.dot(&((&self.p + self.p.transpose()) * (b * z))))
    }

    /// Precomputed symmetric forms for repeated evaluation along one channel.
    pub fn forms(&self, sys: &BilinearSystem) -> LyapunovForms {
        let p = symmetrize(&self.p);
        LyapunovForms {
            q_lambda: &p * &sys.lambda + sys.lambda.transpose() * &p,
            q_b: &p * &sys.b + sys.b.transpose() * &p,
            p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_len("clf P columns", self.p.nrows(), self.p.ncols())?;
        if self.p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("clf P".into()));
        }
        if let (Some(r), Some(r_hat)) = (self.r, self.r_hat) {
            if !(0.0 < r_hat && r_hat < r) {
                return Err(Error::Config(format!("clf radii need 0 < r_hat < r, got {r_hat} and {r}")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path)?;
        let clf: Self = serde_json::from_str(&text).map_err(|e| Error::InvalidArtifact {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        clf.validate()?;
        Ok(clf)
    }
}

/// `V`, `L_Λ V` and `L_B V` as symmetric quadratic forms.
#[derive(Debug, Clone)]
pub struct LyapunovForms {
    pub p: DMatrix<f64>,
    pub q_lambda: DMatrix<f64>,
    pub q_b: DMatrix<f64>,
}

impl LyapunovForms {
    pub fn v(&self, z: &DVector<f64>) -> f64 {
        quad_form(&self.p, z)
    }

    pub fn l_lambda_v(&self, z: &DVector<f64>) -> f64 {
        quad_form(&self.q_lambda, z)
    }

    pub fn l_b_v(&self, z: &DVector<f64>) -> f64 {
        quad_form(&self.q_b, z)
    }

    /// `V̇(z, u) = L_Λ V(z) + u L_B V(z)`.
    pub fn v_dot(&self, z: &DVector<f64>, u: f64) -> f64 {
        self.l_lambda_v(z) + u * self.l_b_v(z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilizabilityReport {
    pub samples: usize,
    pub violations: usize,
    /// Smallest slack over the samples: `−L_Λ V` where that is positive,
    /// otherwise `|L_B V|`. Negative only through a violation.
    pub worst_margin: f64,
}

/// Monte Carlo check of: `L_Λ V(z) < 0` wherever `L_B V(z) = 0`, on unit `z`.
pub fn check_stabilizability(
    p: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    b: &DMatrix<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<StabilizabilityReport> {
    let n = p.nrows();
    check_len("stabilizability lambda", n, lambda.nrows())?;
    check_len("stabilizability B", n, b.nrows())?;
    if n_samples == 0 {
        return Err(Error::Config("stabilizability check needs at least one sample".into()));
    }
    let clf = Clf::from_p(p.clone());
    let forms = clf.forms(&BilinearSystem::new(lambda.clone(), b.clone(), crate::bilinear::InputBounds::new(0.0, 0.0)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    for _ in 0..n_samples {
        let z = random_unit(&mut rng, n, &[]);
        let lv = forms.l_lambda_v(&z);
        let bv = forms.l_b_v(&z);
        if lv >= 0.0 && bv.abs() <= LBV_ZERO {
            violations += 1;
        }
        let margin = if lv < 0.0 { -lv } else { bv.abs() - LBV_ZERO };
        worst = worst.min(margin);
    }
    Ok(StabilizabilityReport {
        samples: n_samples,
        violations,
        worst_margin: worst,
    })
}

/// Standard-normal direction with the `fixed` coordinates zeroed, unit 2-norm.
fn random_unit(rng: &mut ChaCha8Rng, n: usize, fixed: &[usize]) -> DVector<f64> {
    loop {
        let mut z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        for &i in fixed {
            z[i] = 0.0;
        }
        let norm = z.norm();
        if norm > 1e-12 {
            return z / norm;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LevelSetOptions {
    pub directions: usize,
    pub levels: usize,
    /// Smallest and largest sampled excess `V − V(z_eq)`.
    pub min_excess: f64,
    pub max_excess: f64,
    /// Required decay rate: `V̇ ≤ −ρ (V − V(z_eq))` on admissible levels.
    pub rho: f64,
    /// Candidate levels for `r̂` are `V_eq + f (r − V_eq)` with
    /// `f ∈ {1 − 2^{−k}} ∪ {2^{−k}}`, `k = 1..=fraction_depth`.
    pub fraction_depth: usize,
    /// Radius of the state-space ball searched for level crossings when the
    /// problem carries a lift.
    pub state_radius: f64,
    pub seed: u64,
}

impl Default for LevelSetOptions {
    fn default() -> Self {
        Self {
            directions: 64,
            levels: 32,
            min_excess: 1e-4,
            max_excess: 1e4,
            rho: 1e-3,
            fraction_depth: 20,
            state_radius: 2.0,
            seed: 0,
        }
    }
}

impl LevelSetOptions {
    pub fn validate(&self) -> Result<()> {
        if self.directions == 0 || self.levels < 2 || self.fraction_depth == 0 {
            return Err(Error::Config("level-set sampling needs directions >= 1 and levels >= 2".into()));
        }
        if !(self.min_excess > 0.0 && self.min_excess < self.max_excess) {
            return Err(Error::Config("level-set excess range needs 0 < min < max".into()));
        }
        if !(self.rho >= 0.0) {
            return Err(Error::Config("level-set decay margin must be >= 0".into()));
        }
        if !(self.state_radius > 0.0) {
            return Err(Error::Config("level-set state radius must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSetReport {
    pub v_equilibrium: f64,
    pub hold_time: f64,
    pub rho: f64,
    pub sampled_levels: Vec<f64>,
    /// Worst `−V̇ − ρ (V − V_eq)` over the directions at each sampled level.
    pub decay_margins: Vec<f64>,
    /// True when every sampled level passed and `r` sits at the top of the grid.
    pub capped: bool,
}

pub type LiftFn = Arc<dyn Fn(&[f64]) -> Result<DVector<f64>> + Send + Sync>;

/// Where level-set samples come from.
#[derive(Clone)]
pub enum LevelSampling {
    /// Random directions in the lifted space, with the fixed coordinates held.
    Subspace { fixed: Vec<usize> },
    /// Lifts of states on random rays from the state-space origin: only points
    /// the plant can actually produce are sampled.
    Lifted { n_states: usize, lift: LiftFn },
}

impl fmt::Debug for LevelSampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LevelSampling::Subspace { fixed } => f.debug_struct("Subspace").field("fixed", fixed).finish(),
            LevelSampling::Lifted { n_states, .. } => f.debug_struct("Lifted").field("n_states", n_states).finish(),
        }
    }
}

/// Geometry of the sampled level sets for one channel of a model.
#[derive(Debug, Clone)]
pub struct LevelSetProblem {
    pub sys: BilinearSystem,
    pub equilibrium: DVector<f64>,
    pub sampling: LevelSampling,
}

impl LevelSetProblem {
    /// Samples on the lifted state manifold of `model`.
    pub fn from_model(model: &KoopmanBilinearModel, channel: usize) -> Self {
        let owned = model.clone();
        Self {
            sys: model.channel(channel),
            equilibrium: model.equilibrium(),
            sampling: LevelSampling::Lifted {
                n_states: model.n_states(),
                lift: Arc::new(move |x| owned.lift(x)),
            },
        }
    }
}

/// Excess profile of `V ∘ Ψ` along one state-space ray.
struct Ray {
    theta: DVector<f64>,
    radii: Vec<f64>,
    excess: Vec<f64>,
}

const RAY_GRID: usize = 400;
const BISECTIONS: usize = 40;

impl Ray {
    fn new(theta: DVector<f64>, radius: f64, lift: &LiftFn, forms: &LyapunovForms, v_eq: f64) -> Result<Self> {
        let mut radii = Vec::with_capacity(RAY_GRID + 1);
        let mut excess = Vec::with_capacity(RAY_GRID + 1);
        for i in 0..=RAY_GRID {
            let rho = radius * i as f64 / RAY_GRID as f64;
            let x = &theta * rho;
            radii.push(rho);
            excess.push(forms.v(&lift(x.as_slice())?) - v_eq);
        }
        Ok(Self { theta, radii, excess })
    }

    /// Largest excess `e` such that the ray stays below `e` until it first hits it.
    fn reach(&self) -> f64 {
        self.excess.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Lifted point where the ray first reaches excess `e`.
    fn point(&self, e: f64, lift: &LiftFn, forms: &LyapunovForms, v_eq: f64) -> Result<Option<DVector<f64>>> {
        let Some(i) = self.excess.iter().position(|&v| v >= e) else {
            return Ok(None);
        };
        if i == 0 {
            return Ok(Some(lift(vec![0.0; self.theta.len()].as_slice())?));
        }
        let (mut lo, mut hi) = (self.radii[i - 1], self.radii[i]);
        let at = |rho: f64| lift((&self.theta * rho).as_slice());
        for _ in 0..BISECTIONS {
            let mid = 0.5 * (lo + hi);
            if forms.v(&at(mid)?) - v_eq >= e {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(Some(at(hi)?))
    }
}

/// Sample points on the level set `V = V_eq + e`, one per direction.
struct Sampler<'a> {
    problem: &'a LevelSetProblem,
    forms: &'a LyapunovForms,
    v_eq: f64,
    dirs: Vec<DVector<f64>>,
    rays: Vec<Ray>,
}

impl<'a> Sampler<'a> {
    fn new(problem: &'a LevelSetProblem, forms: &'a LyapunovForms, v_eq: f64, options: &LevelSetOptions) -> Result<Self> {
        let n = problem.equilibrium.len();
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let mut dirs = Vec::new();
        let mut rays = Vec::new();
        match &problem.sampling {
            LevelSampling::Subspace { fixed } => {
                // Unit P-norm in the free subspace; the equilibrium is P-orthogonal to
                // these, so `z_eq + √e d` sits exactly at excess `e`.
                for _ in 0..options.directions {
                    let d = random_unit(&mut rng, n, fixed);
                    let pd = forms.v(&d);
                    dirs.push(d / pd.sqrt());
                }
            }
            LevelSampling::Lifted { n_states, lift } => {
                for _ in 0..options.directions {
                    let theta = random_unit(&mut rng, *n_states, &[]);
                    rays.push(Ray::new(theta, options.state_radius, lift, forms, v_eq)?);
                }
            }
        }
        Ok(Self {
            problem,
            forms,
            v_eq,
            dirs,
            rays,
        })
    }

    /// Largest excess whose level set is closed inside the searched region.
    fn cap(&self) -> f64 {
        self.rays.iter().map(Ray::reach).fold(f64::INFINITY, f64::min)
    }

    fn points(&self, e: f64) -> Result<Vec<DVector<f64>>> {
        match &self.problem.sampling {
            LevelSampling::Subspace { .. } => {
                Ok(self.dirs.iter().map(|d| &self.problem.equilibrium + d * e.sqrt()).collect())
            }
            LevelSampling::Lifted { lift, .. } => {
                let mut out = Vec::with_capacity(self.rays.len());
                for ray in &self.rays {
                    if let Some(z) = ray.point(e, lift, self.forms, self.v_eq)? {
                        out.push(z);
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Estimates `(r, r̂)` by sampling level sets of `V` around the equilibrium.
///
/// `r` is the largest sampled level such that it and every lower sampled level
/// satisfy `V̇(z, h(z)) ≤ −ρ (V(z) − V_eq)` in all sampled directions. `r̂` is the
/// largest candidate below `r` such that one hold step of length `dt` under `h`
/// from any sampled point of `Ω_r̂` stays inside `Ω_r̂`.
pub fn estimate_level_sets<H>(
    clf: &Clf,
    problem: &LevelSetProblem,
    h: H,
    dt: f64,
    options: &LevelSetOptions,
) -> Result<(f64, f64, LevelSetReport)>
where
    H: Fn(&DVector<f64>) -> f64 + Sync,
{
    options.validate()?;
    if !(dt > 0.0) {
        return Err(Error::Config(format!("hold time must be positive, got {dt}")));
    }
    let n = clf.dim();
    check_len("level-set equilibrium", n, problem.equilibrium.len())?;
    let forms = clf.forms(&problem.sys);
    let v_eq = forms.v(&problem.equilibrium);
    let sampler = Sampler::new(problem, &forms, v_eq, options)?;

    let max_excess = options.max_excess.min(sampler.cap());
    if !(max_excess > options.min_excess) {
        return Err(Error::NoAdmissibleLevel(format!(
            "level sets inside the sampled region only reach excess {max_excess:e}"
        )));
    }
    let ratio = (max_excess / options.min_excess).ln() / (options.levels - 1) as f64;
    let excesses: Vec<f64> = (0..options.levels)
        .map(|i| options.min_excess * (ratio * i as f64).exp())
        .collect();
    let level_points: Vec<Vec<DVector<f64>>> = excesses
        .par_iter()
        .map(|&e| sampler.points(e))
        .collect::<Result<_>>()?;
    let margins: Vec<f64> = excesses
        .iter()
        .zip(&level_points)
        .map(|(&e, pts)| {
            pts.iter()
                .map(|z| -forms.v_dot(z, h(z)) - options.rho * e)
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    log::debug!(
        "level-set decay margins: {:?}",
        excesses.iter().zip(&margins).map(|(e, m)| format!("{e:.2e}:{m:.2e}")).collect::<Vec<_>>()
    );
    let passing = margins.iter().take_while(|&&m| m > 0.0).count();
    if passing == 0 {
        return Err(Error::NoAdmissibleLevel(format!(
            "decay fails on the lowest sampled level (excess {:e}, margin {:e})",
            excesses[0], margins[0]
        )));
    }
    let r_excess = excesses[passing - 1];
    let r = v_eq + r_excess;

    // Candidate excess fractions for r̂, largest first.
    let mut fractions: Vec<f64> = (1..=options.fraction_depth)
        .flat_map(|k| {
            let t = 0.5f64.powi(k as i32);
            [1.0 - t, t]
        })
        .collect();
    fractions.sort_by(|a, b| b.total_cmp(a));
    fractions.dedup();
    let mut sample_excess: Vec<f64> = excesses[..passing].to_vec();
    sample_excess.extend(fractions.iter().map(|f| f * r_excess));
    sample_excess.sort_by(f64::total_cmp);
    sample_excess.dedup();

    // Per sampled excess: worst V one hold after applying h.
    let steps: Vec<f64> = sample_excess
        .par_iter()
        .map(|&e| {
            let mut worst = f64::NEG_INFINITY;
            for z in sampler.points(e)? {
                worst = worst.max(forms.v(&problem.sys.hold_step(&z, h(&z), dt)));
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    log::debug!(
        "one-hold excess ratios: {:?}",
        sample_excess.iter().zip(&steps).map(|(e, v)| format!("{e:.2e}:{:.3}", (v - v_eq) / e)).collect::<Vec<_>>()
    );
    let admissible = |level_excess: f64| {
        let level = v_eq + level_excess;
        sample_excess
            .iter()
            .zip(&steps)
            .filter(|(&e, _)| e <= level_excess)
            .all(|(_, &v)| v <= level)
    };
    let r_hat_excess = fractions
        .iter()
        .map(|f| f * r_excess)
        .find(|&e| admissible(e))
        .ok_or_else(|| {
            Error::NoAdmissibleLevel(format!("no invariant inner level below r = {r:e} for hold time {dt}"))
        })?;
    let r_hat = v_eq + r_hat_excess;
    let report = LevelSetReport {
        v_equilibrium: v_eq,
        hold_time: dt,
        rho: options.rho,
        sampled_levels: excesses.iter().map(|e| v_eq + e).collect(),
        decay_margins: margins,
        capped: passing == options.levels,
    };
    Ok((r, r_hat, report))
}

impl Clf {
    /// Estimates and stores the radii.
    pub fn with_level_sets<H>(
        mut self,
        problem: &LevelSetProblem,
        h: H,
        dt: f64,
        options: &LevelSetOptions,
    ) -> Result<Self>
    where
        H: Fn(&DVector<f64>) -> f64 + Sync,
    {
        let (r, r_hat, report) = estimate_level_sets(&self, problem, h, dt, options)?;
        self.r = Some(r);
        self.r_hat = Some(r_hat);
        self.level_report = Some(report);
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bilinear::InputBounds;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_synthesis_hits_upper_bound() {
        // f(P) = -2P - 2P on [1, 2]
        let opts = ClfOptions {
            c_low: 1.0,
            c_high: 2.0,
            ..ClfOptions::default()
        };
        let clf = synthesize_clf(&m1(-1.0), &m1(1.0), &opts).unwrap();
        assert!((clf.p[(0, 0)] - 2.0).abs() <= 1e-4);
        assert_relative_eq!(clf.synthesis_report.objective, -8.0, epsilon = 4e-4);
        assert!(clf.synthesis_report.converged);
    }

    #[test]
    fn gamma_zero_stable_lambda_maximizes_smallest_eigenvalue() {
        let n = 3;
        let opts = ClfOptions {
            gamma: 0.0,
            ..ClfOptions::default()
        };
        let clf = synthesize_clf(&(-DMatrix::identity(n, n)), &DMatrix::zeros(n, n), &opts).unwrap();
        let (values, _) = sym_eigen_sorted(&clf.p);
        assert!((values[0] - opts.c_high).abs() <= 1e-4, "{values}");
    }

    #[test]
    fn synthesis_rejects_bad_bounds() {
        let opts = ClfOptions {
            c_low: 2.0,
            c_high: 1.0,
            ..ClfOptions::default()
        };
        assert!(matches!(synthesize_clf(&m1(-1.0), &m1(1.0), &opts), Err(Error::Config(_))));
    }

    #[test]
    fn best_objective_trace_is_monotone() {
        let lambda = DMatrix::from_row_slice(3, 3, &[0.2, 1.0, 0.0, -1.0, 0.2, 0.0, 0.0, 0.0, -0.5]);
        let b = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.5, 0.3, 0.0, 0.0]);
        let clf = synthesize_clf(&lambda, &b, &ClfOptions::default()).unwrap();
        let trace = &clf.synthesis_report.trace;
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(clf.synthesis_report.objective <= trace[0]);
    }

    #[test]
    fn lie_derivative_examples() {
        let clf = Clf::from_p(DMatrix::identity(3, 3));
        let lambda = -DMatrix::identity(3, 3);
        let z = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert_relative_eq!(clf.eval_l_lambda_v(&lambda, &z).unwrap(), -2.0 * z.norm_squared());
        let zero = DVector::zeros(3);
        assert_eq!(clf.eval_v(&zero).unwrap(), 0.0);
        assert_eq!(clf.eval_l_lambda_v(&lambda, &zero).unwrap(), 0.0);
        assert_eq!(clf.eval_l_b_v(&lambda, &zero).unwrap(), 0.0);
        assert!(matches!(clf.eval_v(&DVector::zeros(2)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn l_lambda_v_matches_finite_difference_along_flow() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let lambda = DMatrix::from_row_slice(2, 2, &[-0.1, 1.0, -1.5, -0.2]);
        let clf = Clf::from_p(p);
        let sys = BilinearSystem::new(lambda.clone(), DMatrix::zeros(2, 2), InputBounds::new(-1.0, 1.0));
        let z = DVector::from_vec(vec![0.7, -0.4]);
        let h = 1e-4;
        let fwd = sys.hold_step(&z, 0.0, h);
        let bwd = (&lambda * -h).exp() * &z;
        let fd = (clf.eval_v(&fwd).unwrap() - clf.eval_v(&bwd).unwrap()) / (2.0 * h);
        let exact = clf.eval_l_lambda_v(&lambda, &z).unwrap();
        assert!(((fd - exact) / exact).abs() <= 1e-5);
    }

    #[test]
    fn stabilizability_examples() {
        let rep = check_stabilizability(&m1(1.0), &m1(0.0), &m1(1.0), 100, 1).unwrap();
        assert_eq!(rep.violations, 0);

        let n = 3;
        let unstable = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.1, 0.0]));
        let rep = check_stabilizability(&DMatrix::identity(n, n), &unstable, &DMatrix::zeros(n, n), 50, 2).unwrap();
        assert!(rep.violations > 0);
        assert!(rep.worst_margin < 0.0);

        let b = DMatrix::from_fn(n, n, |i, j| (i + 2 * j) as f64 - 2.0);
        let rep = check_stabilizability(&DMatrix::identity(n, n), &(-DMatrix::identity(n, n)), &b, 500, 3).unwrap();
        assert_eq!(rep.violations, 0);
    }

    fn scalar_problem(bounds: InputBounds) -> LevelSetProblem {
        LevelSetProblem {
            sys: BilinearSystem::new(m1(1.0), m1(1.0), bounds),
            equilibrium: DVector::zeros(1),
            sampling: LevelSampling::Subspace { fixed: vec![] },
        }
    }

    #[test]
    fn scalar_levels_saturate_at_cap() {
        // ż = z + uz with u = -2: V̇ = -2 z² everywhere
        let clf = Clf::from_p(m1(1.0));
        let problem = scalar_problem(InputBounds::new(-2.0, 0.0));
        let opts = LevelSetOptions::default();
        let (r, r_hat, report) = estimate_level_sets(&clf, &problem, |_| -2.0, 0.01, &opts).unwrap();
        assert!(report.capped);
        assert_relative_eq!(r, opts.max_excess, max_relative = 1e-12);
        assert!(0.0 < r_hat && r_hat < r);
    }

    #[test]
    fn unactuated_unstable_has_no_level() {
        let clf = Clf::from_p(m1(1.0));
        let problem = scalar_problem(InputBounds::new(0.0, 0.0));
        let err = estimate_level_sets(&clf, &problem, |_| 0.0, 0.01, &LevelSetOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NoAdmissibleLevel(_)));
    }

    #[test]
    fn r_hat_grows_toward_r_as_hold_time_shrinks() {
        // 2-D oscillator with an unstable linear part and affine actuation through
        // a constant coordinate, like a centered lifted model.
        let lambda = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.1, 1.0, 0.0, -1.0, 0.1]);
        let b = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let problem = LevelSetProblem {
            sys: BilinearSystem::new(lambda, b, InputBounds::new(-1.0, 1.0)),
            equilibrium: DVector::from_vec(vec![1.0, 0.0, 0.0]),
            sampling: LevelSampling::Subspace { fixed: vec![0] },
        };
        // P couples the free coordinates so that L_Λ V < 0 on the line L_B V = 0.
        let clf = Clf::from_p(DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.5, 0.0, 0.5, 1.0]));
        let forms = clf.forms(&problem.sys);
        let h = |z: &DVector<f64>| (-10.0 * forms.l_b_v(z)).clamp(-1.0, 1.0);
        let opts = LevelSetOptions {
            rho: 0.0,
            ..LevelSetOptions::default()
        };
        let mut last = 0.0;
        let mut r0 = None;
        for dt in [0.1, 0.01, 0.001] {
            let (r, r_hat, _) = estimate_level_sets(&clf, &problem, h, dt, &opts).unwrap();
            assert_eq!(*r0.get_or_insert(r), r);
            assert!(r_hat < r);
            assert!(r_hat >= last, "dt {dt}: {r_hat} < {last}");
            last = r_hat;
        }
    }

    #[test]
    fn json_round_trip() {
        let lambda = DMatrix::from_row_slice(2, 2, &[0.1, 1.0, -1.0, 0.1]);
        let b = DMatrix::identity(2, 2);
        let mut clf = synthesize_clf(&lambda, &b, &ClfOptions::default()).unwrap();
        clf.r = Some(3.0);
        clf.r_hat = Some(1.5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.json");
        clf.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"P\""));
        assert_eq!(Clf::load(&path).unwrap(), clf);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn iterates_stay_in_box(entries in proptest::collection::vec(-2.0f64..2.0, 18), c_low in 0.05f64..1.0, width in 0.5f64..5.0) {
            let lambda = DMatrix::from_row_slice(3, 3, &entries[..9]);
            let b = DMatrix::from_row_slice(3, 3, &entries[9..]);
            let opts = ClfOptions { c_low, c_high: c_low + width, max_iters: 300, ..ClfOptions::default() };
            let clf = synthesize_clf(&lambda, &b, &opts).unwrap();
            let (values, _) = sym_eigen_sorted(&clf.p);
            prop_assert!(values[0] >= c_low - 1e-8);
            prop_assert!(values[2] <= c_low + width + 1e-8);
            prop_assert_eq!(&clf.p, &clf.p.transpose());
        }

        #[test]
        fn forms_are_homogeneous_and_symmetric(entries in proptest::collection::vec(-2.0f64..2.0, 12), z in proptest::collection::vec(-1.0f64..1.0, 2)) {
            let p = DMatrix::from_row_slice(2, 2, &entries[..4]);
            let lambda = DMatrix::from_row_slice(2, 2, &entries[4..8]);
            let b = DMatrix::from_row_slice(2, 2, &entries[8..]);
            let z = DVector::from_vec(z);
            let clf = Clf::from_p(p.clone());
            let sym = Clf::from_p(symmetrize(&p));
            let z2 = &z * 2.0;
            for (a, s, a2) in [
                (clf.eval_v(&z).unwrap(), sym.eval_v(&z).unwrap(), clf.eval_v(&z2).unwrap()),
                (clf.eval_l_lambda_v(&lambda, &z).unwrap(), sym.eval_l_lambda_v(&lambda, &z).unwrap(), clf.eval_l_lambda_v(&lambda, &z2).unwrap()),
                (clf.eval_l_b_v(&b, &z).unwrap(), sym.eval_l_b_v(&b, &z).unwrap(), clf.eval_l_b_v(&b, &z2).unwrap()),
            ] {
                prop_assert!((a - s).abs() <= 1e-12);
                prop_assert!((a2 - 4.0 * a).abs() <= 1e-12);
            }
        }
    }
}
