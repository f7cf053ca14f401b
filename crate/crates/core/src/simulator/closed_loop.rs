use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::bilinear::{BilinearSystem, InputBounds, KoopmanBilinearModel};
use crate::clf::{Clf, LyapunovForms};
use crate::controller::{gain_control, sontag_control, Lmpc, LmpcConfig, Mode};
use crate::error::{check_len, Error, Result};

use super::plant::Plant;
use super::rk4::rk4_step;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerKind {
    Lmpc,
    Sontag,
    Gain { k: f64 },
    OpenLoop,
}

impl ControllerKind {
    pub fn needs_clf(&self) -> bool {
        !matches!(self, ControllerKind::OpenLoop)
    }

    pub fn label(&self) -> &'static str {
        match self {
            ControllerKind::Lmpc => "lmpc",
            ControllerKind::Sontag => "sontag",
            ControllerKind::Gain { .. } => "gain",
            ControllerKind::OpenLoop => "open_loop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationOptions {
    /// Hold interval `Δ`.
    pub dt: f64,
    /// RK4 substeps per hold interval.
    pub substeps: usize,
    pub horizon: f64,
    /// Half-width of the box `[−b, b]^n` the state must stay in.
    pub box_half_width: f64,
    /// Leaving the box is an error when set; otherwise the run stops with a flag.
    pub strict_box: bool,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            dt: 0.01,
            substeps: 10,
            horizon: 10.0,
            box_half_width: 5.0,
            strict_box: true,
        }
    }
}

impl SimulationOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.horizon > 0.0 && self.box_half_width > 0.0) || self.substeps == 0 {
            return Err(Error::Config("simulation dt, horizon, box and substeps must be positive".into()));
        }
        Ok(())
    }

    pub fn holds(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

/// Recorded closed-loop run on the integrator grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub controller: ControllerKind,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Lift of the measured state.
    pub lifted: Vec<DVector<f64>>,
    /// `C z` for the open-loop bilinear prediction from `Ψ(x0)` under the applied inputs.
    pub predicted: Vec<DVector<f64>>,
    /// Input in force on `[t_i, t_{i+1})`; the last entry repeats the final hold.
    pub inputs: Vec<f64>,
    pub v: Vec<Option<f64>>,
    pub modes: Vec<&'static str>,
    /// Substeps per hold, so hold instants are every `substeps`-th row.
    pub substeps: usize,
    /// First hold time at which the lift was outside `Ω_r`.
    pub region_exit: Option<f64>,
    /// Time at which the state left the box, ending the run.
    pub box_exit: Option<f64>,
    pub fallback_holds: usize,
    pub solver: SolverStats,
}

/// Per-run summary of the LMPC decisions; all zero for explicit laws.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub steps: usize,
    /// Steps whose returned cost exceeded the explicit-law rollout cost.
    pub dominance_violations: usize,
    pub max_constraint_residual: f64,
}

impl Trajectory {
    pub fn n_states(&self) -> usize {
        self.states.first().map_or(0, |x| x.len())
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one sample")
    }

    /// `(t_k, V(z(t_k)))` at hold instants.
    pub fn hold_values(&self) -> Vec<(f64, f64)> {
        (0..self.times.len())
            .step_by(self.substeps)
            .filter_map(|i| self.v[i].map(|v| (self.times[i], v)))
            .collect()
    }

    /// Hold instants with `V > r̂` where the next hold value did not drop.
    pub fn lyapunov_increases(&self, r_hat: f64) -> Vec<f64> {
        self.hold_values()
            .windows(2)
            .filter(|w| w[0].1 > r_hat && w[1].1 >= w[0].1)
            .map(|w| w[0].0)
            .collect()
    }

    /// Consecutive pieces spanning `length` time units each, sharing endpoints.
    /// A trailing piece shorter than `length` is dropped.
    pub fn segments(&self, length: f64) -> Vec<Trajectory> {
        let Some(h) = self.times.get(1).map(|t1| t1 - self.times[0]) else {
            return Vec::new();
        };
        let rows = (length / h).round() as usize;
        if rows == 0 {
            return Vec::new();
        }
        let slice = |start: usize| {
            let r = start..start + rows + 1;
            let lifted = if self.lifted.len() == self.times.len() { self.lifted[r.clone()].to_vec() } else { Vec::new() };
            Trajectory {
                controller: self.controller,
                times: self.times[r.clone()].to_vec(),
                states: self.states[r.clone()].to_vec(),
                lifted,
                predicted: self.predicted[r.clone()].to_vec(),
                inputs: self.inputs[r.clone()].to_vec(),
                v: self.v[r.clone()].to_vec(),
                modes: self.modes[r].to_vec(),
                substeps: self.substeps,
                region_exit: None,
                box_exit: None,
                fallback_holds: 0,
                solver: SolverStats::default(),
            }
        };
        (0..)
            .map(|k| k * rows)
            .take_while(|&start| start + rows < self.times.len())
            .map(slice)
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let n = self.n_states();
        let mut wtr = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.extend((1..=n).map(|i| format!("xhat_{i}")));
        header.extend(["u", "V", "mode"].map(String::from));
        wtr.write_record(&header)?;
        for i in 0..self.times.len() {
            let mut row = vec![self.times[i].to_string()];
            row.extend(self.states[i].iter().map(|v| v.to_string()));
            row.extend(self.predicted[i].iter().map(|v| v.to_string()));
            row.push(self.inputs[i].to_string());
            row.push(self.v[i].map_or(String::new(), |v| v.to_string()));
            row.push(self.modes[i].to_string());
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads a CSV written by [`Self::write_csv`]. Lifted states are not stored,
    /// so `lifted` comes back empty.
    pub fn read_csv(path: &Path, controller: ControllerKind, substeps: usize) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let invalid = |reason: String| Error::InvalidArtifact {
            path: path.display().to_string(),
            reason,
        };
        let mut rdr = csv::Reader::from_path(path)?;
        let width = rdr.headers()?.len();
        if width < 6 || (width - 4) % 2 != 0 {
            return Err(invalid(format!("unexpected column count {width}")));
        }
        let n = (width - 4) / 2;
        let mut traj = Trajectory {
            controller,
            times: Vec::new(),
            states: Vec::new(),
            lifted: Vec::new(),
            predicted: Vec::new(),
            inputs: Vec::new(),
            v: Vec::new(),
            modes: Vec::new(),
            substeps,
            region_exit: None,
            box_exit: None,
            fallback_holds: 0,
            solver: SolverStats::default(),
        };
        for record in rdr.records() {
            let record = record?;
            let num = |i: usize| -> Result<f64> {
                record[i].parse().map_err(|_| invalid(format!("bad number {:?}", &record[i])))
            };
            traj.times.push(num(0)?);
            traj.states.push(DVector::from_iterator(n, (1..=n).map(num).collect::<Result<Vec<_>>>()?));
            traj.predicted.push(DVector::from_iterator(n, (n + 1..=2 * n).map(num).collect::<Result<Vec<_>>>()?));
            traj.inputs.push(num(2 * n + 1)?);
            traj.v.push(if record[2 * n + 2].is_empty() { None } else { Some(num(2 * n + 2)?) });
            traj.modes.push(mode_label(&record[2 * n + 3]).ok_or_else(|| invalid(format!("unknown mode {:?}", &record[2 * n + 3])))?);
        }
        if traj.times.is_empty() {
            return Err(invalid("no rows".into()));
        }
        Ok(traj)
    }
}

fn mode_label(s: &str) -> Option<&'static str> {
    [
        "open_loop",
        "sontag",
        "gain",
        Mode::SafeRegion.as_str(),
        Mode::Contraction.as_str(),
        Mode::ExplicitFallback.as_str(),
    ]
    .into_iter()
    .find(|m| *m == s)
}

enum Law {
    OpenLoop,
    Sontag(LyapunovForms, InputBounds),
    Gain(LyapunovForms, f64, InputBounds),
    Lmpc(Box<Lmpc>),
}

/// Sample-and-hold loop: plant, lift, controller.
pub struct ClosedLoop<'a> {
    plant: &'a Plant,
    model: &'a KoopmanBilinearModel,
    sys: BilinearSystem,
    law: Law,
    kind: ControllerKind,
    radius: Option<f64>,
    forms: Option<LyapunovForms>,
    options: SimulationOptions,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(
        plant: &'a Plant,
        model: &'a KoopmanBilinearModel,
        clf: Option<&Clf>,
        lmpc: Option<&LmpcConfig>,
        kind: ControllerKind,
        options: SimulationOptions,
    ) -> Result<Self> {
        options.validate()?;
        check_len("plant vs model states", plant.n(), model.n_states())?;
        check_len("plant vs model inputs", plant.m(), model.n_inputs())?;
        if plant.m() != 1 {
            return Err(Error::Config("closed-loop simulation supports a single input".into()));
        }
        let sys = model.channel(0);
        let bounds = sys.bounds;
        let forms = clf.map(|c| c.forms(&sys));
        let need = || clf.ok_or_else(|| Error::MissingArtifact(format!("{} controller needs a clf", kind.label())));
        let law = match kind {
            ControllerKind::OpenLoop => Law::OpenLoop,
            ControllerKind::Sontag => Law::Sontag(need()?.forms(&sys), bounds),
            ControllerKind::Gain { k } => {
                if !(k > 0.0) {
                    return Err(Error::Config(format!("gain k must be positive, got {k}")));
                }
                Law::Gain(need()?.forms(&sys), k, bounds)
            }
            ControllerKind::Lmpc => {
                let config = lmpc.ok_or_else(|| Error::Config("lmpc controller needs an lmpc config".into()))?;
                Law::Lmpc(Box::new(Lmpc::new(sys.clone(), need()?, config.clone())?))
            }
        };
        let radius = if kind.needs_clf() { Some(need()?.r()?) } else { None };
        Ok(Self {
            plant,
            model,
            sys,
            law,
            kind,
            radius,
            forms,
            options,
        })
    }

    fn control(
        &self,
        z: &DVector<f64>,
        warm: &mut Option<Vec<f64>>,
        stats: &mut SolverStats,
    ) -> Result<(f64, &'static str, bool)> {
        Ok(match &self.law {
            Law::OpenLoop => (0.0, "open_loop", false),
            Law::Sontag(f, b) => (sontag_control(f, z, *b), "sontag", false),
            Law::Gain(f, k, b) => (gain_control(f, z, *k, *b), "gain", false),
            Law::Lmpc(lmpc) => match lmpc.step_from(z, warm.as_deref()) {
                Ok(d) => {
                    stats.steps += 1;
                    stats.dominance_violations += (d.cost > d.guess_cost) as usize;
                    stats.max_constraint_residual = stats.max_constraint_residual.max(d.constraint_residual);
                    // Shift by one hold and repeat the last input.
                    let mut next = d.u_sequence[1..].to_vec();
                    next.push(*d.u_sequence.last().expect("horizon is at least one"));
                    *warm = Some(next);
                    (d.applied_u, d.mode.as_str(), d.mode == Mode::ExplicitFallback)
                }
                Err(Error::OutsideStabilityRegion { .. }) => {
                    *warm = None;
                    (lmpc.explicit(z), Mode::ExplicitFallback.as_str(), true)
                }
                Err(e) => return Err(e),
            },
        })
    }

    pub fn run(&self, x0: &[f64]) -> Result<Trajectory> {
        let n = self.plant.n();
        check_len("initial state", n, x0.len())?;
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial state".into()));
        }
        let opts = &self.options;
        let z0 = self.model.lift(x0)?;
        if let (Some(r), Some(f)) = (self.radius, &self.forms) {
            let v0 = f.v(&z0);
            if v0 > r {
                return Err(Error::OutsideStabilityRegion { value: v0, radius: r });
            }
        }
        let h = opts.dt / opts.substeps as f64;
        let field = |x: &DVector<f64>, u: &[f64]| self.plant.rhs(x, u);
        let mut x = DVector::from_column_slice(x0);
        let mut z_model = z0;
        let mut traj = Trajectory {
            controller: self.kind,
            times: Vec::new(),
            states: Vec::new(),
            lifted: Vec::new(),
            predicted: Vec::new(),
            inputs: Vec::new(),
            v: Vec::new(),
            modes: Vec::new(),
            substeps: opts.substeps,
            region_exit: None,
            box_exit: None,
            fallback_holds: 0,
            solver: SolverStats::default(),
        };
        let holds = opts.holds();
        let mut warm = None;
        for k in 0..holds {
            let t_k = k as f64 * opts.dt;
            let z = self.model.lift(x.as_slice())?;
            if let (Some(r), Some(f), None) = (self.radius, &self.forms, traj.region_exit) {
                if f.v(&z) > r {
                    log::warn!("lift left the stability region at t = {t_k}");
                    traj.region_exit = Some(t_k);
                }
            }
            let (u, mode, fallback) = self.control(&z, &mut warm, &mut traj.solver)?;
            traj.fallback_holds += fallback as usize;
            for s in 0..opts.substeps {
                let t = t_k + s as f64 * h;
                let lifted = if s == 0 { z.clone() } else { self.model.lift(x.as_slice())? };
                traj.v.push(self.forms.as_ref().map(|f| f.v(&lifted)));
                traj.times.push(t);
                traj.predicted.push(self.model.reconstruct(&z_model));
                traj.states.push(x.clone());
                traj.lifted.push(lifted);
                traj.inputs.push(u);
                traj.modes.push(mode);
                x = rk4_step(field, &x, &[u], h)?;
                z_model = self.sys.hold_step(&z_model, u, h);
                if x.amax() > opts.box_half_width {
                    let t_exit = t + h;
                    if opts.strict_box {
                        return Err(Error::LeftSimulationBox { time: t_exit });
                    }
                    log::warn!("state left the simulation box at t = {t_exit}");
                    traj.box_exit = Some(t_exit);
                    return Ok(traj);
                }
            }
        }
        let z = self.model.lift(x.as_slice())?;
        traj.v.push(self.forms.as_ref().map(|f| f.v(&z)));
        traj.times.push(holds as f64 * opts.dt);
        traj.predicted.push(self.model.reconstruct(&z_model));
        traj.states.push(x);
        traj.lifted.push(z);
        traj.inputs.push(*traj.inputs.last().unwrap_or(&0.0));
        traj.modes.push(traj.modes.last().copied().unwrap_or("open_loop"));
        Ok(traj)
    }
}

/// One-shot convenience wrapper around [`ClosedLoop`].
pub fn run_closed_loop(
    plant: &Plant,
    model: &KoopmanBilinearModel,
    clf: Option<&Clf>,
    lmpc: Option<&LmpcConfig>,
    kind: ControllerKind,
    x0: &[f64],
    options: &SimulationOptions,
) -> Result<Trajectory> {
    ClosedLoop::new(plant, model, clf, lmpc, kind, options.clone())?.run(x0)
}
