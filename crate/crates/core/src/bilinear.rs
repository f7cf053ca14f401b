//! Control matrices, inverse map and the assembled Koopman bilinear model
//! `ż = Λz + Σ_i u_i B_i z`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::edmd::{self, eval_eigenfunctions, KoopmanSpectrum, SnapshotSet};
use crate::error::{check_len, Error, Result};
use crate::linalg::{self, serde_matrix, serde_vector};

/// Tolerance for recognizing the constant eigenfunction.
pub const CONSTANT_MODE_TOL: f64 = 1e-8;
/// A mode this close to the constant one is snapped onto it before fitting.
pub const CONSTANT_SNAP_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputBounds {
    pub min: f64,
    pub max: f64,
}

impl InputBounds {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn clamp(&self, u: f64) -> f64 {
        u.clamp(self.min, self.max)
    }

    pub fn max_abs(&self) -> f64 {
        self.min.abs().max(self.max.abs())
    }
}

/// Per-sample residual norms of a least-squares fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualStats {
    /// Root mean square of the per-sample residual norm.
    pub rms: f64,
    pub max: f64,
}

impl ResidualStats {
    fn from_columns(residuals: &DMatrix<f64>) -> Self {
        let norms: Vec<f64> = residuals.column_iter().map(|c| c.norm()).collect();
        let count = norms.len().max(1) as f64;
        Self {
            rms: (norms.iter().map(|v| v * v).sum::<f64>() / count).sqrt(),
            max: norms.iter().cloned().fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverseFitReport {
    /// RMS error per state coordinate.
    pub coordinate_rms: Vec<f64>,
    pub coordinate_max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitReport {
    pub koopman_residual: f64,
    pub koopman_rank: usize,
    /// One entry per input channel.
    pub control: Vec<ResidualStats>,
    pub inverse: InverseFitReport,
    /// Indices of lifted coordinates that are the constant eigenfunction.
    pub constant_modes: Vec<usize>,
    /// `‖Λ Ψ(0)‖`, the generator drift discarded when the lift is centered at the
    /// origin. Zero when no centering was applied.
    pub origin_drift: f64,
}

/// `B` minimizing `Σ_k ‖B Ψ(x_k) − E^T (∂φ/∂x)(x_k) G(x_k)‖²`, with the right-hand
/// side realified exactly like the eigenfunctions.
pub fn fit_control_matrix(
    spectrum: &KoopmanSpectrum,
    dict: &Dictionary,
    states: &[DVector<f64>],
    g_values: &[DVector<f64>],
) -> Result<(DMatrix<f64>, ResidualStats)> {
    check_len("control samples", states.len(), g_values.len())?;
    let n = spectrum.len();
    check_len("spectrum vs dictionary", dict.len(), n)?;
    let coeffs = spectrum.realified_coefficients();
    let mut regressor = DMatrix::zeros(states.len(), n);
    let mut target = DMatrix::zeros(states.len(), n);
    for (k, (x, g)) in states.iter().zip(g_values).enumerate() {
        check_len("control field", dict.n_states(), g.len())?;
        let z = eval_eigenfunctions(spectrum, dict, x.as_slice())?;
        let lie = &coeffs * (dict.jacobian(x.as_slice())? * g);
        regressor.set_row(k, &z.transpose());
        target.set_row(k, &lie.transpose());
    }
    let sol = linalg::lstsq(&regressor, &target, 0.0);
    if sol.rank < n {
        return Err(Error::RankDeficient {
            context: "control-matrix regressor",
            rank: sol.rank,
            required: n,
        });
    }
    let b = sol.solution.transpose();
    let residual = (&b * regressor.transpose()) - target.transpose();
    Ok((b, ResidualStats::from_columns(&residual)))
}

/// `C` minimizing `Σ_k ‖x_k − C Ψ(x_k)‖²`.
pub fn fit_inverse_map(
    spectrum: &KoopmanSpectrum,
    dict: &Dictionary,
    states: &[DVector<f64>],
) -> Result<(DMatrix<f64>, InverseFitReport)> {
    let n = spectrum.len();
    let n_states = dict.n_states();
    let mut regressor = DMatrix::zeros(states.len(), n);
    let mut target = DMatrix::zeros(states.len(), n_states);
    for (k, x) in states.iter().enumerate() {
        let z = eval_eigenfunctions(spectrum, dict, x.as_slice())?;
        regressor.set_row(k, &z.transpose());
        target.set_row(k, &x.transpose());
    }
    let sol = linalg::lstsq(&regressor, &target, 0.0);
    if sol.rank < n {
        return Err(Error::RankDeficient {
            context: "inverse-map regressor",
            rank: sol.rank,
            required: n,
        });
    }
    let c = sol.solution.transpose();
    let residual = &regressor * c.transpose() - &target;
    let count = states.len().max(1) as f64;
    let report = InverseFitReport {
        coordinate_rms: residual
            .column_iter()
            .map(|col| (col.norm_squared() / count).sqrt())
            .collect(),
        coordinate_max: residual.column_iter().map(|col| col.amax()).collect(),
    };
    Ok((c, report))
}

/// Identified surrogate: spectrum, control matrices, inverse map and input bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KoopmanBilinearModel {
    pub spectrum: KoopmanSpectrum,
    pub dictionary: Dictionary,
    #[serde(with = "serde_matrix::list")]
    pub b: Vec<DMatrix<f64>>,
    #[serde(with = "serde_matrix")]
    pub c: DMatrix<f64>,
    pub input_bounds: Vec<InputBounds>,
    /// Subtracted from the raw eigenfunction coordinates by [`Self::lift`].
    #[serde(with = "serde_vector")]
    pub lift_offset: DVector<f64>,
    pub fit_report: FitReport,
}

pub fn assemble_model(
    spectrum: KoopmanSpectrum,
    dictionary: Dictionary,
    b: Vec<DMatrix<f64>>,
    c: DMatrix<f64>,
    input_bounds: Vec<InputBounds>,
    fit_report: FitReport,
) -> Result<KoopmanBilinearModel> {
    let n = spectrum.len();
    let model = KoopmanBilinearModel {
        lift_offset: DVector::zeros(n),
        spectrum,
        dictionary,
        b,
        c,
        input_bounds,
        fit_report,
    };
    model.validate()?;
    Ok(model)
}

impl KoopmanBilinearModel {
    pub fn validate(&self) -> Result<()> {
        let n = self.spectrum.len();
        check_len("dictionary size", n, self.dictionary.len())?;
        check_len("lambda rows", n, self.spectrum.lambda.nrows())?;
        check_len("input bounds", self.b.len(), self.input_bounds.len())?;
        check_len("control fits", self.b.len(), self.fit_report.control.len())?;
        for b in &self.b {
            check_len("control matrix rows", n, b.nrows())?;
            check_len("control matrix cols", n, b.ncols())?;
        }
        check_len("inverse map rows", self.dictionary.n_states(), self.c.nrows())?;
        check_len("inverse map cols", n, self.c.ncols())?;
        check_len("lift offset", n, self.lift_offset.len())?;
        for bounds in &self.input_bounds {
            if !(bounds.min < bounds.max) {
                return Err(Error::Config(format!(
                    "input bounds need min < max, got [{}, {}]",
                    bounds.min, bounds.max
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.spectrum.len()
    }

    pub fn n_states(&self) -> usize {
        self.dictionary.n_states()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.len()
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.spectrum.lambda
    }

    /// Lifted state used for prediction and control.
    pub fn lift(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(eval_eigenfunctions(&self.spectrum, &self.dictionary, x)? - &self.lift_offset)
    }

    /// Linear reconstruction `x̂ = C z`.
    pub fn reconstruct(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.c * z
    }

    /// Lifted image of the state-space origin.
    pub fn equilibrium(&self) -> DVector<f64> {
        self.lift(&vec![0.0; self.n_states()]).expect("origin has the right dimension")
    }

    pub fn constant_modes(&self) -> &[usize] {
        &self.fit_report.constant_modes
    }

    /// Single-input view used by the controllers.
    pub fn channel(&self, channel: usize) -> BilinearSystem {
        BilinearSystem::new(self.spectrum.lambda.clone(), self.b[channel].clone(), self.input_bounds[channel])
    }

    /// Shifts the lifted coordinates so the origin maps to the constant mode alone.
    ///
    /// With `o = Ψ(0)` restricted to the non-constant coordinates and `c` the
    /// constant mode, `Ψ(x) = z' + o z'_c` for the shifted `z' = Ψ(x) − o`, so every
    /// input matrix and the inverse map absorb the factor `I + o e_c^T`. The
    /// generator keeps its block-diagonal form; the discarded drift `Λ o` is recorded.
    pub fn center_at_origin(mut self) -> Self {
        let modes = self.fit_report.constant_modes.clone();
        let [constant] = modes.as_slice() else {
            log::warn!("cannot center lift: found {} constant modes", modes.len());
            return self;
        };
        let raw = self.equilibrium() + &self.lift_offset;
        let mut offset = raw;
        offset[*constant] = 0.0;
        let n = self.dim();
        let mut shift = DMatrix::identity(n, n);
        for i in 0..n {
            shift[(i, *constant)] += offset[i];
        }
        self.b = self.b.iter().map(|b| b * &shift).collect();
        self.c = &self.c * &shift;
        self.fit_report.origin_drift = (&self.spectrum.lambda * &offset).norm();
        self.lift_offset = offset;
        self
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
        let model: Self = serde_json::from_str(&text).map_err(|e| Error::InvalidArtifact {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        model.dictionary.validate()?;
        model.validate()?;
        Ok(model)
    }
}

/// Options for [`identify`].
#[derive(Debug, Clone)]
pub struct IdentifyOptions {
    pub ridge: f64,
    pub input_bounds: Vec<InputBounds>,
    pub center_at_origin: bool,
}

/// Full identification: Koopman matrix, spectrum, control matrices from the
/// analytic control fields stored in the snapshots, and the inverse map.
pub fn identify(data: &SnapshotSet, dict: &Dictionary, options: &IdentifyOptions) -> Result<KoopmanBilinearModel> {
    let fit = edmd::fit_koopman_matrix(data, dict, options.ridge)?;
    let mut spectrum = edmd::decompose_and_realify(&fit.matrix, data.dt)?;
    spectrum.snap_constant_modes(CONSTANT_SNAP_TOL);
    let states = data.states();
    let channels = data
        .control_samples
        .as_ref()
        .ok_or_else(|| Error::Config("snapshot set carries no control-field samples".into()))?;
    check_len("input bounds", channels.len(), options.input_bounds.len())?;
    let mut bs = Vec::with_capacity(channels.len());
    let mut control = Vec::with_capacity(channels.len());
    for g in channels {
        let g_values: Vec<DVector<f64>> = g.column_iter().map(|c| c.into_owned()).collect();
        let (b, stats) = fit_control_matrix(&spectrum, dict, &states, &g_values)?;
        bs.push(b);
        control.push(stats);
    }
    let (c, inverse) = fit_inverse_map(&spectrum, dict, &states)?;
    let report = FitReport {
        koopman_residual: fit.residual,
        koopman_rank: fit.effective_rank,
        control,
        inverse,
        constant_modes: spectrum.constant_modes(CONSTANT_MODE_TOL),
        origin_drift: 0.0,
    };
    let model = assemble_model(spectrum, dict.clone(), bs, c, options.input_bounds.clone(), report)?;
    Ok(if options.center_at_origin {
        model.center_at_origin()
    } else {
        model
    })
}

/// Single-input bilinear system `ż = (Λ + u B) z` with bounded input.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearSystem {
    pub lambda: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub bounds: InputBounds,
    lambda_t: DMatrix<f64>,
    b_t: DMatrix<f64>,
    lambda_norm: f64,
    b_norm: f64,
}

/// Largest `h ‖Λ + uB‖` allowed in one internal RK4 substep.
const MAX_STEP_RATE: f64 = 0.5;

impl BilinearSystem {
    pub fn new(lambda: DMatrix<f64>, b: DMatrix<f64>, bounds: InputBounds) -> Self {
        let lambda_norm = spectral_norm(&lambda);
        let b_norm = spectral_norm(&b);
        Self {
            lambda_t: lambda.transpose(),
            b_t: b.transpose(),
            lambda,
            b,
            bounds,
            lambda_norm,
            b_norm,
        }
    }

    pub fn dim(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn field(&self, z: &DVector<f64>, u: f64) -> DVector<f64> {
        let mut dz = &self.lambda * z;
        if u != 0.0 {
            dz.gemv(u, &self.b, z, 1.0);
        }
        dz
    }

    /// RK4 substeps needed to integrate over `h` with input `u`.
    pub fn substeps(&self, h: f64, u: f64) -> usize {
        let rate = h * (self.lambda_norm + u.abs() * self.b_norm);
        ((rate / MAX_STEP_RATE).ceil() as usize).max(1)
    }

    // The substep count only depends on the input bounds, so the hold map is a
    // smooth function of u inside them.
    fn hold_grid(&self, h: f64, u: f64) -> (usize, f64) {
        let steps = self.substeps(h, self.bounds.max_abs().max(u.abs()));
        (steps, h / steps as f64)
    }

    /// Holds `u` for `h` time units.
    pub fn hold_step(&self, z: &DVector<f64>, u: f64, h: f64) -> DVector<f64> {
        let (steps, dh) = self.hold_grid(h, u);
        let mut state = z.clone();
        for _ in 0..steps {
            state = rk4(|v| self.field(v, u), &state, dh);
        }
        state
    }

    /// [`Self::hold_step`] together with the derivative of the result in `u`.
    ///
    /// RK4 commutes with differentiation, so integrating the variational system
    /// `ṡ = (Λ + uB) s + B z` alongside gives the exact derivative of the discrete map.
    pub fn hold_step_with_sensitivity(&self, z: &DVector<f64>, u: f64, h: f64) -> (DVector<f64>, DVector<f64>) {
        let (steps, dh) = self.hold_grid(h, u);
        let n = self.dim();
        let mut aug = DVector::zeros(2 * n);
        aug.rows_mut(0, n).copy_from(z);
        let field = |v: &DVector<f64>| {
            let zz = v.rows(0, n).into_owned();
            let ss = v.rows(n, n).into_owned();
            let bz = &self.b * &zz;
            let mut out = DVector::zeros(2 * n);
            out.rows_mut(0, n).copy_from(&(&self.lambda * &zz + &bz * u));
            out.rows_mut(n, n).copy_from(&(self.field(&ss, u) + bz));
            out
        };
        for _ in 0..steps {
            aug = rk4(field, &aug, dh);
        }
        (aug.rows(0, n).into_owned(), aug.rows(n, n).into_owned())
    }

    /// `M(u)^T w`, where `M(u)` is the linear map of [`Self::hold_step`].
    pub fn hold_step_adjoint(&self, w: &DVector<f64>, u: f64, h: f64) -> DVector<f64> {
        let (steps, dh) = self.hold_grid(h, u);
        let field = |v: &DVector<f64>| {
            let mut dv = &self.lambda_t * v;
            if u != 0.0 {
                dv.gemv(u, &self.b_t, v, 1.0);
            }
            dv
        };
        let mut state = w.clone();
        for _ in 0..steps {
            state = rk4(field, &state, dh);
        }
        state
    }
}

fn rk4<F: Fn(&DVector<f64>) -> DVector<f64>>(field: F, z: &DVector<f64>, h: f64) -> DVector<f64> {
    let k1 = field(z);
    let k2 = field(&(z + &k1 * (0.5 * h)));
    let k3 = field(&(z + &k2 * (0.5 * h)));
    let k4 = field(&(z + &k3 * h));
    z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edmd::{decompose_and_realify, generate_snapshots};
    use crate::simulator::Plant;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn decay_spectrum() -> KoopmanSpectrum {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, (-0.01f64).exp()]);
        decompose_and_realify(&k, 0.01).unwrap()
    }

    fn samples(values: &[f64]) -> Vec<DVector<f64>> {
        values.iter().map(|&v| DVector::from_vec(vec![v])).collect()
    }

    #[test]
    fn control_matrix_for_unit_field() {
        let s = decay_spectrum();
        let dict = Dictionary::new(1, 1);
        let xs = samples(&[-1.0, -0.2, 0.5, 1.5]);
        let gs = samples(&[1.0; 4]);
        let (b, stats) = fit_control_matrix(&s, &dict, &xs, &gs).unwrap();
        assert_relative_eq!(b, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]), epsilon = 1e-12);
        assert!(stats.max < 1e-12);
    }

    #[test]
    fn zero_field_gives_zero_matrix() {
        let s = decay_spectrum();
        let dict = Dictionary::new(1, 1);
        let xs = samples(&[-1.0, 0.3, 2.0]);
        let gs = samples(&[0.0; 3]);
        let (b, stats) = fit_control_matrix(&s, &dict, &xs, &gs).unwrap();
        assert_eq!(b.norm(), 0.0);
        assert_eq!(stats.rms, 0.0);
    }

    #[test]
    fn control_matrix_rank_deficiency() {
        let s = decay_spectrum();
        let dict = Dictionary::new(1, 1);
        let err = fit_control_matrix(&s, &dict, &samples(&[0.5]), &samples(&[1.0])).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));
    }

    #[test]
    fn inverse_map_recovers_coordinates() {
        let s = decay_spectrum();
        let dict = Dictionary::new(1, 1);
        let (c, report) = fit_inverse_map(&s, &dict, &samples(&[-2.0, 0.1, 0.9])).unwrap();
        assert!(report.coordinate_max[0] <= 1e-10);
        assert_relative_eq!(c, DMatrix::from_row_slice(1, 2, &[0.0, 1.0]), epsilon = 1e-10);
        assert!(matches!(
            fit_inverse_map(&s, &dict, &samples(&[0.4])),
            Err(Error::RankDeficient { .. })
        ));
    }

    fn decay_model() -> KoopmanBilinearModel {
        let plant = Plant::control_affine(
            "decay",
            1,
            Arc::new(|x| -x),
            vec![Arc::new(|_| DVector::from_vec(vec![1.0]))],
        );
        let ics = samples(&[-1.0, -0.4, 0.3, 1.0]);
        let data = generate_snapshots(&plant, &ics, 0.01, 40).unwrap();
        let options = IdentifyOptions {
            ridge: 0.0,
            input_bounds: vec![InputBounds::new(-1.0, 1.0)],
            center_at_origin: true,
        };
        identify(&data, &Dictionary::new(1, 2), &options).unwrap()
    }

    #[test]
    fn model_json_round_trip_is_exact() {
        let model = decay_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let back = KoopmanBilinearModel::load(&path).unwrap();
        assert_eq!(back, model);
        let again = dir.path().join("model2.json");
        back.save(&again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn assemble_rejects_mismatched_b() {
        let model = decay_model();
        let bad_b = vec![DMatrix::zeros(2, 2)];
        let err = assemble_model(
            model.spectrum.clone(),
            model.dictionary.clone(),
            bad_b,
            model.c.clone(),
            model.input_bounds.clone(),
            model.fit_report.clone(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn centering_maps_origin_to_constant_mode() {
        let model = decay_model();
        let eq = model.equilibrium();
        let c = model.constant_modes()[0];
        for i in 0..model.dim() {
            let want = if i == c { 1.0 } else { 0.0 };
            assert_relative_eq!(eq[i], want, epsilon = 1e-12);
        }
        // reconstruction is unchanged by centering
        for x in [-0.7, 0.0, 0.4] {
            let z = model.lift(&[x]).unwrap();
            assert_relative_eq!(model.reconstruct(&z)[0], x, epsilon = 1e-8);
        }
    }

    #[test]
    fn zero_input_prediction_is_matrix_exponential() {
        let model = decay_model();
        let sys = model.channel(0);
        let z0 = model.lift(&[0.8]).unwrap();
        let mut z = z0.clone();
        for _ in 0..50 {
            z = sys.hold_step(&z, 0.0, 0.01);
        }
        let exact = (model.lambda() * 0.5).exp() * z0;
        assert_relative_eq!(z, exact, epsilon = 1e-8);
    }

    fn toy_system() -> BilinearSystem {
        let lambda = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.2, 3.0, 0.0, -3.0, 0.2]);
        let b = DMatrix::from_fn(3, 3, |i, j| ((i * 3 + j) as f64 * 0.7).sin());
        BilinearSystem::new(lambda, b, InputBounds::new(-2.0, 2.0))
    }

    #[test]
    fn sensitivity_matches_central_difference() {
        let sys = toy_system();
        let z = DVector::from_vec(vec![1.0, 0.4, -0.3]);
        let (next, ds) = sys.hold_step_with_sensitivity(&z, 0.7, 0.05);
        assert_relative_eq!(next, sys.hold_step(&z, 0.7, 0.05), epsilon = 1e-14);
        let eps = 1e-6;
        let fd = (sys.hold_step(&z, 0.7 + eps, 0.05) - sys.hold_step(&z, 0.7 - eps, 0.05)) / (2.0 * eps);
        assert_relative_eq!(ds, fd, epsilon = 1e-8);
    }

    #[test]
    fn adjoint_is_transpose_of_hold_map() {
        let sys = toy_system();
        let z = DVector::from_vec(vec![0.3, -1.0, 0.5]);
        let w = DVector::from_vec(vec![-0.2, 0.8, 1.1]);
        let lhs = w.dot(&sys.hold_step(&z, -1.3, 0.1));
        let rhs = sys.hold_step_adjoint(&w, -1.3, 0.1).dot(&z);
        assert_relative_eq!(lhs, rhs, epsilon = 1e-13);
    }

    #[test]
    fn bilinear_prediction_tracks_decay_with_input() {
        let model = decay_model();
        let sys = model.channel(0);
        let mut z = model.lift(&[0.5]).unwrap();
        for _ in 0..100 {
            z = sys.hold_step(&z, 0.3, 0.01);
        }
        // ẋ = −x + 0.3 from 0.5 over 1 s
        let exact = 0.3 + 0.2 * (-1.0f64).exp();
        assert!((model.reconstruct(&z)[0] - exact).abs() < 1e-3);
    }
}
