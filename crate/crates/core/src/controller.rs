//! Explicit bounded feedback laws and the Lyapunov-based MPC.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bilinear::{BilinearSystem, InputBounds};
use crate::clf::{Clf, LyapunovForms};
use crate::error::{check_len, Error, Result};
use crate::linalg::quad_form;

/// `|L_B V|` at or below this is treated as zero by Sontag's formula.
pub const LBV_FLOOR: f64 = 1e-10;
/// Allowed constraint violation for an accepted LMPC solution.
pub const CONSTRAINT_TOL: f64 = 1e-6;

/// Unsaturated Sontag feedback from the two Lie derivatives.
pub fn sontag_law(l_lambda_v: f64, l_b_v: f64) -> f64 {
    if l_b_v.abs() <= LBV_FLOOR {
        return 0.0;
    }
    -(l_lambda_v + (l_lambda_v * l_lambda_v + l_b_v.powi(4)).sqrt()) / l_b_v
}

pub fn sontag_control(forms: &LyapunovForms, z: &DVector<f64>, bounds: InputBounds) -> f64 {
    bounds.clamp(sontag_law(forms.l_lambda_v(z), forms.l_b_v(z)))
}

/// `clamp(−k L_B V(z))`.
pub fn gain_control(forms: &LyapunovForms, z: &DVector<f64>, k: f64, bounds: InputBounds) -> f64 {
    bounds.clamp(-k * forms.l_b_v(z))
}

/// Explicit stabilizing law `h` used for the guess and the contraction bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExplicitLaw {
    Sontag,
    Gain { k: f64 },
}

impl ExplicitLaw {
    pub fn eval(&self, forms: &LyapunovForms, z: &DVector<f64>, bounds: InputBounds) -> f64 {
        match *self {
            ExplicitLaw::Sontag => sontag_control(forms, z, bounds),
            ExplicitLaw::Gain { k } => gain_control(forms, z, k, bounds),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ExplicitLaw::Gain { k } if !(k > 0.0) => Err(Error::Config(format!("gain k must be positive, got {k}"))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub max_outer_iters: usize,
    /// Weight of the squared `V − r̂` excess in safe-region mode.
    pub penalty_weight: f64,
    /// First trial step of the projected-gradient line search.
    pub step_size: f64,
    /// Values of `u_0` tried when the gradient iterations make no progress; 0 disables.
    pub grid_fallback_points: usize,
    /// Iterations stop once an accepted step improves the merit by less than
    /// this fraction.
    pub rel_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_outer_iters: 20,
            penalty_weight: 1e3,
            step_size: 1.0,
            grid_fallback_points: 16,
            rel_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmpcConfig {
    pub horizon: usize,
    pub dt: f64,
    pub w: DMatrix<f64>,
    pub r: f64,
    pub bounds: InputBounds,
    pub explicit: ExplicitLaw,
    pub solver: SolverOptions,
}

impl LmpcConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("lmpc horizon must be at least 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("lmpc dt must be positive, got {}", self.dt)));
        }
        if !(self.r > 0.0) {
            return Err(Error::Config(format!("lmpc input weight must be positive, got {}", self.r)));
        }
        if !(self.bounds.min < self.bounds.max) {
            return Err(Error::Config("lmpc input bounds need u_min < u_max".into()));
        }
        check_len("lmpc state weight", dim, self.w.nrows())?;
        check_len("lmpc state weight", dim, self.w.ncols())?;
        if !self.w.clone().cholesky().is_some() {
            return Err(Error::Config("lmpc state weight must be positive definite".into()));
        }
        self.explicit.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SafeRegion,
    Contraction,
    ExplicitFallback,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::SafeRegion => "safe_region",
            Mode::Contraction => "contraction",
            Mode::ExplicitFallback => "explicit_fallback",
        }
    }
}

/// Which Lyapunov constraint was active; set even when the guess is returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActiveConstraint {
    SafeRegion,
    Contraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlDecision {
    pub u_sequence: Vec<f64>,
    pub applied_u: f64,
    pub mode: Mode,
    pub constraint: ActiveConstraint,
    pub cost: f64,
    pub guess_cost: f64,
    pub v: f64,
    /// Violation of the active constraint by the returned sequence (0 when met).
    pub constraint_residual: f64,
    pub iterations: usize,
}

/// Single-channel LMPC with everything that does not depend on `z_k` precomputed.
#[derive(Debug, Clone)]
pub struct Lmpc {
    sys: BilinearSystem,
    forms: LyapunovForms,
    config: LmpcConfig,
    r: f64,
    r_hat: f64,
}

struct Rollout {
    states: Vec<DVector<f64>>,
    cost: f64,
    /// Largest `V(z_j) − r̂` over knots 1..=N_p.
    excess: f64,
    penalty: f64,
}

impl Lmpc {
    pub fn new(sys: BilinearSystem, clf: &Clf, mut config: LmpcConfig) -> Result<Self> {
        config.validate(sys.dim())?;
        check_len("lmpc clf", sys.dim(), clf.dim())?;
        config.bounds = InputBounds::new(
            config.bounds.min.max(sys.bounds.min),
            config.bounds.max.min(sys.bounds.max),
        );
        let forms = clf.forms(&sys);
        Ok(Self {
            r: clf.r()?,
            r_hat: clf.r_hat()?,
            sys,
            forms,
            config,
        })
    }

    pub fn forms(&self) -> &LyapunovForms {
        &self.forms
    }

    pub fn config(&self) -> &LmpcConfig {
        &self.config
    }

    pub fn explicit(&self, z: &DVector<f64>) -> f64 {
        self.config.explicit.eval(&self.forms, z, self.config.bounds)
    }

    fn rollout(&self, z0: &DVector<f64>, u: &[f64], safe: bool) -> Rollout {
        let dt = self.config.dt;
        let mut states = Vec::with_capacity(u.len() + 1);
        states.push(z0.clone());
        let mut cost = 0.0;
        let mut excess = f64::NEG_INFINITY;
        let mut penalty = 0.0;
        for (j, &uj) in u.iter().enumerate() {
            let z = &states[j];
            cost += (quad_form(&self.config.w, z) + self.config.r * uj * uj) * dt;
            let next = self.sys.hold_step(z, uj, dt);
            if safe {
                let e = self.forms.v(&next) - self.r_hat;
                excess = excess.max(e);
                if e > 0.0 {
                    penalty += e * e;
                }
            }
            states.push(next);
        }
        Rollout {
            states,
            cost,
            excess: if safe { excess } else { 0.0 },
            penalty: self.config.solver.penalty_weight * penalty,
        }
    }

    /// Gradient of cost plus penalty through the adjoint recursion.
    fn gradient(&self, roll: &Rollout, u: &[f64], safe: bool) -> Vec<f64> {
        let dt = self.config.dt;
        let n_p = u.len();
        let w2 = (&self.config.w + self.config.w.transpose()) * dt;
        let p2 = &self.forms.p * 2.0;
        let mu2 = 2.0 * self.config.solver.penalty_weight;
        let mut grad = vec![0.0; n_p];
        let mut costate = DVector::zeros(self.sys.dim());
        for j in (0..n_p).rev() {
            let next = &roll.states[j + 1];
            if safe {
                let e = self.forms.v(next) - self.r_hat;
                if e > 0.0 {
                    costate += &p2 * next * (mu2 * e);
                }
            }
            let z = &roll.states[j];
            let (_, dz_du) = self.sys.hold_step_with_sensitivity(z, u[j], dt);
            grad[j] = 2.0 * self.config.r * u[j] * dt + costate.dot(&dz_du);
            costate = self.sys.hold_step_adjoint(&costate, u[j], dt) + &w2 * z;
        }
        grad
    }

    /// Feasible interval for `u_0` under the contraction constraint.
    fn first_input_interval(&self, z: &DVector<f64>, h0: f64) -> (f64, f64) {
        let b = self.config.bounds;
        let lbv = self.forms.l_b_v(z);
        if lbv > LBV_FLOOR {
            (b.min, h0)
        } else if lbv < -LBV_FLOOR {
            (h0, b.max)
        } else {
            (b.min, b.max)
        }
    }

    pub fn step(&self, z: &DVector<f64>) -> Result<ControlDecision> {
        self.step_from(z, None)
    }

    /// Like [`Self::step`], additionally trying `warm` (typically the previous
    /// solution shifted by one hold) as a starting point. The returned sequence
    /// still has to beat the explicit-law rollout.
    pub fn step_from(&self, z: &DVector<f64>, warm: Option<&[f64]>) -> Result<ControlDecision> {
        check_len("lmpc state", self.sys.dim(), z.len())?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("lmpc initial state".into()));
        }
        let v = self.forms.v(z);
        if v > self.r {
            return Err(Error::OutsideStabilityRegion { value: v, radius: self.r });
        }
        let safe = v <= self.r_hat;
        let constraint = if safe {
            ActiveConstraint::SafeRegion
        } else {
            ActiveConstraint::Contraction
        };
        let n_p = self.config.horizon;
        let dt = self.config.dt;
        let bounds = self.config.bounds;

        // Explicit-law rollout: always feasible for the contraction constraint.
        let mut guess = Vec::with_capacity(n_p);
        let mut zz = z.clone();
        for _ in 0..n_p {
            let u = self.explicit(&zz);
            zz = self.sys.hold_step(&zz, u, dt);
            guess.push(u);
        }
        let h0 = guess[0];
        let (lo0, hi0) = if safe { (bounds.min, bounds.max) } else { self.first_input_interval(z, h0) };
        let project = |u: &mut [f64]| {
            for (j, x) in u.iter_mut().enumerate() {
                *x = if j == 0 { x.clamp(lo0, hi0) } else { bounds.clamp(*x) };
            }
        };
        let guess_roll = self.rollout(z, &guess, safe);
        if guess_roll.states.iter().flat_map(|s| s.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("lmpc prediction".into()));
        }
        let guess_cost = guess_roll.cost;
        let residual = |roll: &Rollout| roll.excess.max(0.0);
        let guess_residual = residual(&guess_roll);

        let mut best: Option<(Vec<f64>, f64, f64)> = None;
        let accept = |best: &mut Option<(Vec<f64>, f64, f64)>, u: &[f64], roll: &Rollout| {
            if residual(roll) <= CONSTRAINT_TOL && roll.cost <= guess_cost && roll.cost.is_finite() {
                if best.as_ref().is_none_or(|b| roll.cost < b.1) {
                    *best = Some((u.to_vec(), roll.cost, residual(roll)));
                }
            }
        };

        let (mut u, mut roll) = (guess.clone(), guess_roll);
        if let Some(w) = warm.filter(|w| w.len() == n_p) {
            let mut start = w.to_vec();
            project(&mut start);
            let start_roll = self.rollout(z, &start, safe);
            accept(&mut best, &start, &start_roll);
            if start_roll.cost + start_roll.penalty < roll.cost + roll.penalty {
                u = start;
                roll = start_roll;
            }
        }
        let mut alpha = self.config.solver.step_size;
        let mut iterations = 0;
        for _ in 0..self.config.solver.max_outer_iters {
            iterations += 1;
            let merit = roll.cost + roll.penalty;
            let grad = self.gradient(&roll, &u, safe);
            let mut moved = false;
            let mut stalled = false;
            for _ in 0..30 {
                let mut trial: Vec<f64> = u.iter().zip(&grad).map(|(x, g)| x - alpha * g).collect();
                project(&mut trial);
                let dist2: f64 = trial.iter().zip(&u).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist2 < 1e-24 {
                    break;
                }
                let trial_roll = self.rollout(z, &trial, safe);
                if trial_roll.cost + trial_roll.penalty <= merit - 1e-4 / alpha * dist2 {
                    stalled = merit - (trial_roll.cost + trial_roll.penalty) <= self.config.solver.rel_tol * merit.abs();
                    u = trial;
                    roll = trial_roll;
                    moved = true;
                    alpha *= 2.0;
                    break;
                }
                alpha *= 0.5;
            }
            accept(&mut best, &u, &roll);
            if !moved || stalled {
                break;
            }
        }

        let points = self.config.solver.grid_fallback_points;
        if best.is_none() && points > 1 {
            for i in 0..points {
                let mut trial = guess.clone();
                trial[0] = lo0 + (hi0 - lo0) * i as f64 / (points - 1) as f64;
                let trial_roll = self.rollout(z, &trial, safe);
                accept(&mut best, &trial, &trial_roll);
            }
        }

        let (u_sequence, cost, constraint_residual, mode) = match best {
            Some((u, cost, res)) => (
                u,
                cost,
                res,
                if safe { Mode::SafeRegion } else { Mode::Contraction },
            ),
            None => (guess, guess_cost, guess_residual, Mode::ExplicitFallback),
        };
        Ok(ControlDecision {
            applied_u: u_sequence[0],
            u_sequence,
            mode,
            constraint,
            cost,
            guess_cost,
            v,
            constraint_residual,
            iterations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn forms_for(p: DMatrix<f64>, lambda: DMatrix<f64>, b: DMatrix<f64>) -> LyapunovForms {
        Clf::from_p(p).forms(&BilinearSystem::new(lambda, b, InputBounds::new(-1.0, 1.0)))
    }

    #[test]
    fn sontag_examples() {
        assert_eq!(sontag_law(3.0, 0.0), 0.0);
        assert_eq!(sontag_law(3.0, 1e-11), 0.0);
        assert_relative_eq!(sontag_law(0.0, 1.0), -1.0);
        let bounds = InputBounds::new(-1.0, 1.0);
        assert_eq!(bounds.clamp(sontag_law(0.0, 5.0)), -1.0);
        // z = 0 has L_B V = 0
        let f = forms_for(DMatrix::identity(2, 2), DMatrix::identity(2, 2), DMatrix::identity(2, 2));
        assert_eq!(sontag_control(&f, &DVector::zeros(2), bounds), 0.0);
    }

    #[test]
    fn gain_examples() {
        // L_B V = 2 z^T z for P = B = I
        let f = forms_for(DMatrix::identity(2, 2), DMatrix::zeros(2, 2), DMatrix::identity(2, 2));
        let z = DVector::from_vec(vec![0.1f64.sqrt(), 0.0]);
        assert_relative_eq!(gain_control(&f, &z, 10.0, InputBounds::new(-5.0, 5.0)), -2.0, epsilon = 1e-12);
        assert_eq!(gain_control(&f, &DVector::zeros(2), 10.0, InputBounds::new(-5.0, 5.0)), 0.0);
        assert_eq!(gain_control(&f, &z, 10.0, InputBounds::new(-1.0, 1.0)), -1.0);
    }

    fn toy(horizon: usize, r: f64, r_hat: f64) -> Lmpc {
        let lambda = DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, -1.0]));
        let bounds = InputBounds::new(-1.0, 1.0);
        let sys = BilinearSystem::new(lambda, DMatrix::identity(2, 2), bounds);
        let mut clf = Clf::from_p(DMatrix::identity(2, 2));
        clf.r = Some(r);
        clf.r_hat = Some(r_hat);
        let config = LmpcConfig {
            horizon,
            dt: 0.01,
            w: DMatrix::identity(2, 2),
            r: 1.0,
            bounds,
            explicit: ExplicitLaw::Sontag,
            solver: SolverOptions::default(),
        };
        Lmpc::new(sys, &clf, config).unwrap()
    }

    #[test]
    fn origin_gives_zero_inputs() {
        let lmpc = toy(10, 4.0, 1.0);
        let d = lmpc.step(&DVector::zeros(2)).unwrap();
        assert!(d.u_sequence.iter().all(|&u| u == 0.0));
        assert_eq!(d.cost, 0.0);
    }

    #[test]
    fn outside_region_is_an_error() {
        let lmpc = toy(5, 1.0, 0.5);
        let err = lmpc.step(&DVector::from_vec(vec![1.0, 1.0])).unwrap_err();
        assert!(matches!(err, Error::OutsideStabilityRegion { .. }));
    }

    // With N_p = 1 the left-rectangle cost is (z^T W z + u²) dt, so the grid oracle
    // only needs the feasible set for u_0.
    #[test]
    fn single_step_matches_grid_oracle() {
        let lmpc = toy(1, 4.0, 0.5);
        for z in [[0.3, 0.2], [1.0, -0.9], [-1.2, 0.4], [0.6, 0.0]] {
            let z = DVector::from_vec(z.to_vec());
            let d = lmpc.step(&z).unwrap();
            let v = lmpc.forms().v(&z);
            let h0 = lmpc.explicit(&z);
            let lbv = lmpc.forms().l_b_v(&z);
            let grid = 10_000;
            let mut best = f64::INFINITY;
            for i in 0..=grid {
                let u = -1.0 + 2.0 * i as f64 / grid as f64;
                let feasible = if v <= 0.5 {
                    lmpc.forms().v(&lmpc.sys.hold_step(&z, u, 0.01)) <= 0.5 + CONSTRAINT_TOL
                } else {
                    lbv * (u - h0) <= 1e-12
                };
                if feasible {
                    best = best.min((z.norm_squared() + u * u) * 0.01);
                }
            }
            let spacing_cost = 2.0 / grid as f64 * 2.0 * 0.01;
            assert!(d.cost <= best + spacing_cost, "z {z}: {} vs {}", d.cost, best);
            assert!(d.cost <= d.guess_cost);
        }
    }

    #[test]
    fn mode_tracks_level() {
        let lmpc = toy(20, 4.0, 0.5);
        let inner = lmpc.step(&DVector::from_vec(vec![0.3, 0.3])).unwrap();
        assert_eq!(inner.constraint, ActiveConstraint::SafeRegion);
        assert_ne!(inner.mode, Mode::Contraction);
        let outer = lmpc.step(&DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(outer.constraint, ActiveConstraint::Contraction);
        assert_ne!(outer.mode, Mode::SafeRegion);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let lmpc = toy(6, 4.0, 0.05);
        let z = DVector::from_vec(vec![0.2, -0.1]);
        let u = vec![0.3, -0.2, 0.5, 0.1, -0.7, 0.9];
        let roll = lmpc.rollout(&z, &u, true);
        assert!(roll.penalty > 0.0);
        let g = lmpc.gradient(&roll, &u, true);
        for j in 0..u.len() {
            let eps = 1e-6;
            let mut up = u.clone();
            let mut dn = u.clone();
            up[j] += eps;
            dn[j] -= eps;
            let f = |v: &[f64]| {
                let r = lmpc.rollout(&z, v, true);
                r.cost + r.penalty
            };
            let fd = (f(&up) - f(&dn)) / (2.0 * eps);
            assert!((fd - g[j]).abs() <= 1e-6 * (1.0 + fd.abs()), "j {j}: {fd} vs {}", g[j]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn sontag_decrease_when_unsaturated(a in -5.0f64..5.0, b in prop_oneof![-3.0f64..-0.01, 0.01f64..3.0]) {
            let u = sontag_law(a, b);
            let v_dot = a + u * b;
            prop_assert!((v_dot + (a * a + b.powi(4)).sqrt()).abs() <= 1e-8 * (1.0 + a.abs()));
            prop_assert!(v_dot < 0.0);
        }

        #[test]
        fn gain_is_dissipative(k in 0.1f64..20.0, z in proptest::collection::vec(-2.0f64..2.0, 2)) {
            let b = DMatrix::from_row_slice(2, 2, &[0.3, -1.0, 0.5, 0.2]);
            let f = forms_for(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]), DMatrix::zeros(2, 2), b);
            let z = DVector::from_vec(z);
            let u = gain_control(&f, &z, k, InputBounds::new(-3.0, 3.0));
            prop_assert!(u * f.l_b_v(&z) <= 0.0);
        }

        #[test]
        fn lmpc_dominates_guess_and_meets_constraint(z in proptest::collection::vec(-1.4f64..1.4, 2)) {
            let lmpc = toy(15, 4.0, 0.5);
            let z = DVector::from_vec(z);
            prop_assume!(lmpc.forms().v(&z) <= 4.0);
            let d = lmpc.step(&z).unwrap();
            prop_assert!(d.cost <= d.guess_cost);
            prop_assert!(d.u_sequence.iter().all(|&u| (-1.0..=1.0).contains(&u)));
            if d.constraint == ActiveConstraint::Contraction {
                let h0 = lmpc.explicit(&z);
                let f = lmpc.forms();
                prop_assert!(f.v_dot(&z, d.applied_u) <= f.v_dot(&z, h0) + CONSTRAINT_TOL);
            } else if d.mode == Mode::SafeRegion {
                prop_assert!(d.constraint_residual <= CONSTRAINT_TOL);
            }
        }
    }
}
