//! Stage runner behind the CLI: every stage reads its inputs from the output
//! directory and writes its artifact there, so stages can be rerun one by one.

use std::path::{Path, PathBuf};

use nalgebra::{DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bilinear::{identify, IdentifyOptions, KoopmanBilinearModel};
use crate::clf::{check_stabilizability, synthesize_for_model, Clf, LevelSetOptions, LevelSetProblem, StabilizabilityReport};
use crate::config::{ExperimentConfig, PlantKind};
use crate::dictionary::Dictionary;
use crate::edmd::{control_samples, generate_snapshots, SnapshotSet};
use crate::error::{Error, Result};
use crate::simulator::{
    check_error_bound, rk4_integrate, ClosedLoop, ControllerKind, ErrorBoundReport, Plant, SolverStats, Trajectory,
};

pub const SNAPSHOTS: &str = "snapshots.csv";
pub const MODEL: &str = "model.json";
pub const CLF: &str = "clf.json";
pub const SIMULATION: &str = "simulation.json";
pub const REPORT: &str = "report.json";

/// Samples drawn by the stabilizability check the report runs on the CLF.
pub const STABILIZABILITY_SAMPLES: usize = 10_000;

/// Summary of one simulated run, as stored in `simulation.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub index: usize,
    pub controller: ControllerKind,
    pub x0: Vec<f64>,
    pub csv: String,
    pub final_norm: f64,
    pub region_exit: Option<f64>,
    pub box_exit: Option<f64>,
    pub fallback_holds: usize,
    pub solver: SolverStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationRecord {
    pub closed_loop: Vec<RunRecord>,
    pub open_loop: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub dim: usize,
    pub koopman_residual: f64,
    pub koopman_rank: usize,
    pub control_residual_rms: Vec<f64>,
    pub inverse_residual_rms: Vec<f64>,
    pub constant_modes: Vec<usize>,
    pub continuous_eigenvalues: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClfSummary {
    pub p_eigen_min: f64,
    pub p_eigen_max: f64,
    pub objective: f64,
    pub sigma: f64,
    pub iterations: usize,
    pub converged: bool,
    pub r: f64,
    pub r_hat: f64,
    pub stabilizability: StabilizabilityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub index: usize,
    pub x0: Vec<f64>,
    pub final_norm: f64,
    pub converged: bool,
    /// Hold instants with `V > r̂` where `V` did not decrease by the next hold.
    pub lyapunov_increases: usize,
    pub region_exit: Option<f64>,
    pub box_exit: Option<f64>,
    pub fallback_holds: usize,
    /// Whether the run stayed inside the plant's reference region.
    pub inside_reference_region: Option<bool>,
    pub solver: SolverStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopMetrics {
    pub index: usize,
    pub x0: Vec<f64>,
    /// Range of `‖x‖` over the final window.
    pub tail_norm_min: f64,
    pub tail_norm_max: f64,
    pub within_band: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopSummary {
    /// Radius range `[min ‖x‖, max ‖x‖]` along the reference limit cycle.
    pub band: Option<[f64; 2]>,
    pub band_margin: f64,
    pub tail_window: f64,
    pub runs: Vec<OpenLoopMetrics>,
    pub all_within_band: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundSummary {
    pub window: f64,
    pub windows_checked: usize,
    pub nu: f64,
    pub l_x: f64,
    pub e0: f64,
    /// Largest `measured / bound` after the window start, where both equal `e0`.
    pub worst_ratio: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub converged_runs: usize,
    pub max_final_norm: f64,
    pub lyapunov_increases: usize,
    pub region_exits: usize,
    pub dominance_violations: usize,
    pub max_constraint_residual: f64,
    pub all_inside_reference_region: Option<bool>,
}

/// Contents of `report.json`. Everything here is a function of the config and
/// seed; wall-clock timings are deliberately left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub seed: u64,
    pub plant: PlantKind,
    pub controller: ControllerKind,
    pub target_norm: f64,
    pub model: ModelSummary,
    pub clf: Option<ClfSummary>,
    pub runs: Vec<RunMetrics>,
    pub open_loop: Option<OpenLoopSummary>,
    pub error_bound: Option<ErrorBoundSummary>,
    pub summary: Summary,
}

pub struct Pipeline {
    config: ExperimentConfig,
    out: PathBuf,
    plant: Plant,
}

impl Pipeline {
    /// `out` overrides the config's output directory, which in turn defaults
    /// to `out/<name>`.
    pub fn new(config: ExperimentConfig, out: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let out = out
            .or_else(|| config.output_dir.clone())
            .unwrap_or_else(|| Path::new("out").join(&config.name));
        std::fs::create_dir_all(&out)?;
        let plant = config.plant.build();
        Ok(Self { config, out, plant })
    }

    pub fn from_path(config: &Path, out: Option<PathBuf>) -> Result<Self> {
        Self::new(ExperimentConfig::load(config)?, out)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if !path.exists() {
            return Err(Error::MissingArtifact(format!(
                "{} (run the stage that produces it first)",
                path.display()
            )));
        }
        Ok(path)
    }

    pub fn gen_data(&self) -> Result<SnapshotSet> {
        let d = &self.config.data;
        let ics = self.data_initial_conditions()?;
        let set = generate_snapshots(&self.plant, &ics, d.dt, d.steps)?;
        set.write_csv(&self.path(SNAPSHOTS))?;
        log::info!("wrote {} snapshot pairs", set.len());
        Ok(set)
    }

    /// Initial conditions of the training trajectories. With `max_abs_state`
    /// set, candidates are drawn in seeded batches and kept only if their
    /// unforced trajectory stays in the box.
    fn data_initial_conditions(&self) -> Result<Vec<DVector<f64>>> {
        const MAX_BATCHES: u64 = 100;
        let d = &self.config.data;
        let seed = self.config.stage_seed("data");
        let Some(bound) = d.max_abs_state else {
            return Ok(d.sampler.sample(d.trajectories, seed));
        };
        let mut kept = Vec::with_capacity(d.trajectories);
        for batch in 0..MAX_BATCHES {
            let candidates = d.sampler.sample(d.trajectories, seed.wrapping_add(batch));
            let paths = generate_snapshots(&self.plant, &candidates, d.dt, d.steps)?;
            for (i, x0) in candidates.into_iter().enumerate() {
                let cols = paths.y.columns(i * d.steps, d.steps);
                if x0.amax() <= bound && cols.amax() <= bound {
                    kept.push(x0);
                    if kept.len() == d.trajectories {
                        return Ok(kept);
                    }
                }
            }
        }
        Err(Error::Config(format!(
            "only {} of {} training trajectories stay within |x| <= {bound}",
            kept.len(),
            d.trajectories
        )))
    }

    pub fn load_snapshots(&self) -> Result<SnapshotSet> {
        let mut set = SnapshotSet::read_csv(&self.require(SNAPSHOTS)?, self.config.data.dt)?;
        if set.n_states() != self.plant.n() {
            return Err(Error::InvalidArtifact {
                path: self.path(SNAPSHOTS).display().to_string(),
                reason: format!("{} state columns, plant has {}", set.n_states(), self.plant.n()),
            });
        }
        // The control fields are known; only the drift is learned from data.
        set.control_samples = Some(control_samples(&self.plant, &set.x));
        Ok(set)
    }

    pub fn identify(&self) -> Result<KoopmanBilinearModel> {
        let data = self.load_snapshots()?;
        let dict = Dictionary::new(self.plant.n(), self.config.dictionary.max_degree);
        let options = IdentifyOptions {
            ridge: self.config.identification.ridge,
            input_bounds: vec![self.config.controller.bounds(); self.plant.m()],
            center_at_origin: self.config.identification.center_at_origin,
        };
        let model = identify(&data, &dict, &options)?;
        model.save(&self.path(MODEL))?;
        log::info!(
            "identified a {}-dimensional model, koopman residual {:e}",
            model.dim(),
            model.fit_report.koopman_residual
        );
        Ok(model)
    }

    pub fn load_model(&self) -> Result<KoopmanBilinearModel> {
        KoopmanBilinearModel::load(&self.require(MODEL)?)
    }

    /// Synthesizes `P`, then estimates `r` and `r̂` under the configured explicit law.
    pub fn synthesize_clf(&self) -> Result<Clf> {
        let model = self.load_model()?;
        let c = &self.config;
        let clf = synthesize_for_model(&model, 0, &c.clf.synthesis)?;
        let sys = model.channel(0);
        let forms = clf.forms(&sys);
        let (law, bounds) = (c.controller.explicit, sys.bounds);
        let level_options = LevelSetOptions {
            seed: c.stage_seed("levels"),
            ..c.clf.level_sets.clone()
        };
        let problem = LevelSetProblem::from_model(&model, 0);
        let clf = clf.with_level_sets(&problem, |z: &DVector<f64>| law.eval(&forms, z, bounds), c.data.dt, &level_options)?;
        clf.save(&self.path(CLF))?;
        log::info!("clf: r = {:e}, r_hat = {:e}", clf.r()?, clf.r_hat()?);
        Ok(clf)
    }

    pub fn load_clf(&self) -> Result<Clf> {
        Clf::load(&self.require(CLF)?)
    }

    pub fn initial_conditions(&self) -> Vec<DVector<f64>> {
        let s = &self.config.simulation;
        s.x0.sample(s.runs, self.config.stage_seed("x0"))
    }

    /// Closed-loop runs, plus open-loop runs from the same initial conditions
    /// when configured. Open-loop-only configs need no CLF.
    pub fn simulate(&self) -> Result<SimulationRecord> {
        let c = &self.config;
        let model = self.load_model()?;
        let kind = c.controller.kind;
        let clf = if kind.needs_clf() { Some(self.load_clf()?) } else { None };
        let lmpc = match kind {
            ControllerKind::Lmpc => Some(c.controller.lmpc(model.dim(), c.simulation.options.dt)?),
            _ => None,
        };
        let x0s = self.initial_conditions();
        let closed = ClosedLoop::new(&self.plant, &model, clf.as_ref(), lmpc.as_ref(), kind, c.simulation.options.clone())?;
        let closed_loop = self.run_all(&closed, kind, &x0s, "run")?;
        let open_loop = if c.simulation.open_loop && kind != ControllerKind::OpenLoop {
            let open = ClosedLoop::new(
                &self.plant,
                &model,
                None,
                None,
                ControllerKind::OpenLoop,
                c.simulation.options.clone(),
            )?;
            self.run_all(&open, ControllerKind::OpenLoop, &x0s, "open_loop")?
        } else {
            Vec::new()
        };
        let record = SimulationRecord { closed_loop, open_loop };
        std::fs::write(self.path(SIMULATION), serde_json::to_string_pretty(&record)?)?;
        Ok(record)
    }

    fn run_all(&self, driver: &ClosedLoop, kind: ControllerKind, x0s: &[DVector<f64>], prefix: &str) -> Result<Vec<RunRecord>> {
        x0s.par_iter()
            .enumerate()
            .map(|(index, x0)| {
                let traj = driver.run(x0.as_slice())?;
                let csv = format!("{prefix}_{index:02}.csv");
                traj.write_csv(&self.path(&csv))?;
                log::info!("{csv}: final |x| = {:.3e}", traj.final_state().norm());
                Ok(RunRecord {
                    index,
                    controller: kind,
                    x0: x0.iter().copied().collect(),
                    csv,
                    final_norm: traj.final_state().norm(),
                    region_exit: traj.region_exit,
                    box_exit: traj.box_exit,
                    fallback_holds: traj.fallback_holds,
                    solver: traj.solver,
                })
            })
            .collect()
    }

    pub fn load_simulation(&self) -> Result<SimulationRecord> {
        let path = self.require(SIMULATION)?;
        serde_json::from_str(&std::fs::read_to_string(&path)?).map_err(|e| Error::InvalidArtifact {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn load_trajectory(&self, run: &RunRecord) -> Result<Trajectory> {
        Trajectory::read_csv(&self.require(&run.csv)?, run.controller, self.config.simulation.options.substeps)
    }

    pub fn report(&self) -> Result<Report> {
        let c = &self.config;
        let model = self.load_model()?;
        let sim = self.load_simulation()?;
        let clf = if c.controller.kind.needs_clf() { Some(self.load_clf()?) } else { None };
        let clf_summary = clf.as_ref().map(|clf| self.clf_summary(&model, clf)).transpose()?;
        let r_hat = clf.as_ref().map(|c| c.r_hat()).transpose()?;
        let target = c.report.target_norm;

        let trajectories: Vec<Trajectory> = sim.closed_loop.iter().map(|r| self.load_trajectory(r)).collect::<Result<_>>()?;
        let runs: Vec<RunMetrics> = sim
            .closed_loop
            .iter()
            .zip(&trajectories)
            .map(|(rec, traj)| RunMetrics {
                index: rec.index,
                x0: rec.x0.clone(),
                final_norm: rec.final_norm,
                converged: rec.box_exit.is_none() && rec.final_norm <= target,
                lyapunov_increases: r_hat.map_or(0, |r| traj.lyapunov_increases(r).len()),
                region_exit: rec.region_exit,
                box_exit: rec.box_exit,
                fallback_holds: rec.fallback_holds,
                inside_reference_region: self.inside_reference_region(traj),
                solver: rec.solver,
            })
            .collect();

        let open_loop = if sim.open_loop.is_empty() {
            None
        } else {
            Some(self.open_loop_summary(&sim.open_loop)?)
        };

        let error_bound = if trajectories.is_empty() {
            None
        } else {
            let window = c.error_bound.window;
            let segments: Vec<Trajectory> = trajectories.iter().flat_map(|t| t.segments(window)).collect();
            if segments.is_empty() {
                None
            } else {
                let eb = check_error_bound(
                    &self.plant,
                    &model,
                    &segments,
                    window,
                    c.error_bound.lipschitz_pairs,
                    c.stage_seed("error_bound"),
                )?;
                Some(error_bound_summary(&eb, window, segments.len()))
            }
        };

        let regions: Vec<bool> = runs.iter().filter_map(|r| r.inside_reference_region).collect();
        let summary = Summary {
            runs: runs.len(),
            converged_runs: runs.iter().filter(|r| r.converged).count(),
            max_final_norm: runs.iter().map(|r| r.final_norm).fold(0.0, f64::max),
            lyapunov_increases: runs.iter().map(|r| r.lyapunov_increases).sum(),
            region_exits: runs.iter().filter(|r| r.region_exit.is_some()).count(),
            dominance_violations: runs.iter().map(|r| r.solver.dominance_violations).sum(),
            max_constraint_residual: runs.iter().map(|r| r.solver.max_constraint_residual).fold(0.0, f64::max),
            all_inside_reference_region: (!regions.is_empty()).then(|| regions.iter().all(|&b| b)),
        };
        let report = Report {
            name: c.name.clone(),
            seed: c.seed,
            plant: c.plant,
            controller: c.controller.kind,
            target_norm: target,
            model: model_summary(&model),
            clf: clf_summary,
            runs,
            open_loop,
            error_bound,
            summary,
        };
        std::fs::write(self.path(REPORT), serde_json::to_string_pretty(&report)?)?;
        Ok(report)
    }

    /// Every stage in order.
    pub fn run(&self) -> Result<Report> {
        self.gen_data()?;
        self.identify()?;
        if self.config.controller.kind.needs_clf() {
            self.synthesize_clf()?;
        }
        self.simulate()?;
        self.report()
    }

    fn clf_summary(&self, model: &KoopmanBilinearModel, clf: &Clf) -> Result<ClfSummary> {
        let eig = SymmetricEigen::new(clf.p.clone()).eigenvalues;
        let stabilizability = check_stabilizability(
            &clf.p,
            model.lambda(),
            &model.b[0],
            STABILIZABILITY_SAMPLES,
            self.config.stage_seed("stabilizability"),
        )?;
        let s = &clf.synthesis_report;
        Ok(ClfSummary {
            p_eigen_min: eig.min(),
            p_eigen_max: eig.max(),
            objective: s.objective,
            sigma: s.sigma,
            iterations: s.iterations,
            converged: s.converged,
            r: clf.r()?,
            r_hat: clf.r_hat()?,
            stabilizability,
        })
    }

    /// Pendulum runs must stay below the separatrix energy. Van der Pol runs
    /// must stay inside the outer edge of the limit-cycle band.
    fn inside_reference_region(&self, traj: &Trajectory) -> Option<bool> {
        match self.config.plant {
            PlantKind::Pendulum => Some(traj.states.iter().all(|x| pendulum_energy(x) < PENDULUM_SEPARATRIX)),
            PlantKind::VanDerPol => {
                let outer = limit_cycle_band(&self.plant).ok()?[1];
                Some(traj.states.iter().all(|x| x.norm() < outer))
            }
        }
    }

    fn open_loop_summary(&self, records: &[RunRecord]) -> Result<OpenLoopSummary> {
        let r = &self.config.report;
        let band = match self.config.plant {
            PlantKind::VanDerPol => Some(limit_cycle_band(&self.plant)?),
            PlantKind::Pendulum => None,
        };
        let runs: Vec<OpenLoopMetrics> = records
            .iter()
            .map(|rec| {
                let traj = self.load_trajectory(rec)?;
                let end = *traj.times.last().expect("non-empty trajectory");
                let tail: Vec<f64> = traj
                    .times
                    .iter()
                    .zip(&traj.states)
                    .filter(|(t, _)| **t >= end - r.tail_window - 1e-9)
                    .map(|(_, x)| x.norm())
                    .collect();
                let lo = tail.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = tail.iter().copied().fold(0.0, f64::max);
                Ok(OpenLoopMetrics {
                    index: rec.index,
                    x0: rec.x0.clone(),
                    tail_norm_min: lo,
                    tail_norm_max: hi,
                    within_band: band.map(|[a, b]| rec.box_exit.is_none() && lo >= a - r.band_margin && hi <= b + r.band_margin),
                })
            })
            .collect::<Result<_>>()?;
        let all_within_band = band.map(|_| runs.iter().all(|m| m.within_band == Some(true)));
        Ok(OpenLoopSummary {
            band,
            band_margin: r.band_margin,
            tail_window: r.tail_window,
            runs,
            all_within_band,
        })
    }
}

/// Energy of the separatrix through the upright position.
pub const PENDULUM_SEPARATRIX: f64 = 2.0;

/// `1 − cos x₁ + x₂²/2`, zero at the origin.
pub fn pendulum_energy(x: &DVector<f64>) -> f64 {
    1.0 - x[0].cos() + 0.5 * x[1] * x[1]
}

/// Range of `‖x‖` along the attracting limit cycle of the unforced plant,
/// found by integrating from outside it until transients have died out.
pub fn limit_cycle_band(plant: &Plant) -> Result<[f64; 2]> {
    const H: f64 = 1e-3;
    let field = |x: &DVector<f64>, _: &[f64]| plant.drift(x);
    let u = vec![0.0; plant.m()];
    let mut x = DVector::from_vec(vec![2.5, 0.0]);
    x = rk4_integrate(field, &x, &u, H, 60_000)?;
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    // Two periods of the μ = 1 cycle are about 13.3 s.
    for _ in 0..15_000 {
        x = rk4_integrate(field, &x, &u, H, 1)?;
        lo = lo.min(x.norm());
        hi = hi.max(x.norm());
    }
    Ok([lo, hi])
}

fn model_summary(model: &KoopmanBilinearModel) -> ModelSummary {
    let f = &model.fit_report;
    ModelSummary {
        dim: model.dim(),
        koopman_residual: f.koopman_residual,
        koopman_rank: f.koopman_rank,
        control_residual_rms: f.control.iter().map(|s| s.rms).collect(),
        inverse_residual_rms: f.inverse.coordinate_rms.clone(),
        constant_modes: f.constant_modes.clone(),
        continuous_eigenvalues: model.spectrum.continuous_eigenvalues.iter().map(|l| [l.re, l.im]).collect(),
    }
}

fn error_bound_summary(eb: &ErrorBoundReport, window: f64, windows: usize) -> ErrorBoundSummary {
    let worst_ratio = eb
        .measured_curve
        .iter()
        .zip(&eb.bound_curve)
        .skip(1)
        .filter(|(_, b)| **b > 0.0)
        .map(|(m, b)| m / b)
        .fold(0.0, f64::max);
    ErrorBoundSummary {
        window,
        windows_checked: windows,
        nu: eb.nu,
        l_x: eb.l_x,
        e0: eb.e0,
        worst_ratio,
        satisfied: eb.satisfied,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn van_der_pol_band_brackets_known_amplitude() {
        // The μ = 1 cycle reaches |x₁| ≈ 2.01 and |x₂| ≈ 2.67.
        let [lo, hi] = limit_cycle_band(&Plant::van_der_pol()).unwrap();
        assert!(lo > 1.0 && lo < 2.01, "lo = {lo}");
        assert!(hi > 2.67 && hi < 2.9, "hi = {hi}");
    }

    #[test]
    fn pendulum_energy_is_zero_at_rest() {
        assert_eq!(pendulum_energy(&DVector::from_vec(vec![0.0, 0.0])), 0.0);
        let top = pendulum_energy(&DVector::from_vec(vec![std::f64::consts::PI, 0.0]));
        assert!((top - PENDULUM_SEPARATRIX).abs() < 1e-12);
    }
}
