//! Experiment configuration: one JSON document drives every pipeline stage.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bilinear::InputBounds;
use crate::clf::{ClfOptions, LevelSetOptions};
use crate::controller::{ExplicitLaw, LmpcConfig, SolverOptions};
use crate::error::{Error, Result};
use crate::simulator::{ControllerKind, Plant, SimulationOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    VanDerPol,
    Pendulum,
}

impl PlantKind {
    pub fn build(self) -> Plant {
        match self {
            PlantKind::VanDerPol => Plant::van_der_pol(),
            PlantKind::Pendulum => Plant::pendulum(),
        }
    }
}

/// Where initial conditions come from. Every sampler draws from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateSampler {
    /// `count` points evenly spaced on the circle of `radius`.
    Circle { radius: f64 },
    /// Uniform in the disk of `radius`.
    Disk { radius: f64 },
    /// Uniform in the box `[low, high]`.
    Box { low: Vec<f64>, high: Vec<f64> },
    Points { points: Vec<Vec<f64>> },
}

impl StateSampler {
    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            StateSampler::Circle { radius } | StateSampler::Disk { radius } => {
                if n != 2 {
                    return Err(Error::Config("circle and disk samplers need a 2-state plant".into()));
                }
                if !(*radius > 0.0 && radius.is_finite()) {
                    return Err(Error::Config(format!("sampler radius must be positive, got {radius}")));
                }
            }
            StateSampler::Box { low, high } => {
                if low.len() != n || high.len() != n {
                    return Err(Error::Config(format!("sampler box needs {n} bounds per side")));
                }
                if low.iter().zip(high).any(|(l, h)| !(l < h)) {
                    return Err(Error::Config("sampler box needs low < high".into()));
                }
            }
            StateSampler::Points { points } => {
                if points.iter().any(|p| p.len() != n || p.iter().any(|v| !v.is_finite())) {
                    return Err(Error::Config(format!("sampler points must be finite {n}-vectors")));
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, count: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            StateSampler::Circle { radius } => (0..count)
                .map(|k| {
                    let t = std::f64::consts::TAU * k as f64 / count as f64;
                    DVector::from_vec(vec![radius * t.cos(), radius * t.sin()])
                })
                .collect(),
            StateSampler::Disk { radius } => (0..count)
                .map(|_| {
                    // Square root of a uniform radius fraction gives uniform area density.
                    let rho = radius * rng.random::<f64>().sqrt();
                    let t = rng.random_range(0.0..std::f64::consts::TAU);
                    DVector::from_vec(vec![rho * t.cos(), rho * t.sin()])
                })
                .collect(),
            StateSampler::Box { low, high } => (0..count)
                .map(|_| DVector::from_fn(low.len(), |i, _| rng.random_range(low[i]..high[i])))
                .collect(),
            StateSampler::Points { points } => {
                points.iter().take(count).map(|p| DVector::from_column_slice(p)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub trajectories: usize,
    pub sampler: StateSampler,
    pub dt: f64,
    pub steps: usize,
    /// Trajectories that leave `[−b, b]^n` are discarded and redrawn.
    #[serde(default)]
    pub max_abs_state: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionaryConfig {
    pub max_degree: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentificationConfig {
    pub ridge: f64,
    pub center_at_origin: bool,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        Self {
            ridge: 1e-10,
            center_at_origin: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClfConfig {
    #[serde(default)]
    pub synthesis: ClfOptions,
    #[serde(default)]
    pub level_sets: LevelSetOptions,
}

/// State weight of the MPC stage cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightSpec {
    Identity { scale: f64 },
    Diagonal { values: Vec<f64> },
}

impl WeightSpec {
    pub fn matrix(&self, dim: usize) -> Result<DMatrix<f64>> {
        match self {
            WeightSpec::Identity { scale } => Ok(DMatrix::identity(dim, dim) * *scale),
            WeightSpec::Diagonal { values } => {
                if values.len() != dim {
                    return Err(Error::Config(format!(
                        "diagonal weight has {} entries, lifted dimension is {dim}",
                        values.len()
                    )));
                }
                Ok(DMatrix::from_diagonal(&DVector::from_column_slice(values)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    /// Prediction horizon `N_p` in holds.
    pub horizon: usize,
    pub w: WeightSpec,
    pub r: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Law used as the LMPC reference and for level-set estimation.
    pub explicit: ExplicitLaw,
    #[serde(default)]
    pub solver: SolverOptions,
}

impl ControllerConfig {
    pub fn bounds(&self) -> InputBounds {
        InputBounds::new(self.u_min, self.u_max)
    }

    pub fn lmpc(&self, dim: usize, dt: f64) -> Result<LmpcConfig> {
        let config = LmpcConfig {
            horizon: self.horizon,
            dt,
            w: self.w.matrix(dim)?,
            r: self.r,
            bounds: self.bounds(),
            explicit: self.explicit,
            solver: self.solver.clone(),
        };
        config.validate(dim)?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub x0: StateSampler,
    pub runs: usize,
    #[serde(default)]
    pub options: SimulationOptions,
    /// Also simulate every initial condition with `u = 0`.
    #[serde(default)]
    pub open_loop: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBoundConfig {
    /// Length of the prediction windows the bound is checked over.
    pub window: f64,
    /// Random state pairs used to estimate the Lipschitz constant.
    pub lipschitz_pairs: usize,
}

impl Default for ErrorBoundConfig {
    fn default() -> Self {
        Self {
            window: 1.0,
            lipschitz_pairs: 2000,
        }
    }
}

/// Thresholds the report judges runs against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// A closed-loop run counts as converged when `‖x(T)‖` is at most this.
    pub target_norm: f64,
    /// Open-loop tails may leave the limit-cycle radius band by this much.
    pub band_margin: f64,
    /// Length of the open-loop tail compared against the band.
    pub tail_window: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            target_norm: 0.05,
            band_margin: 0.2,
            tail_window: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Root seed; every random draw in the pipeline derives from it.
    pub seed: u64,
    pub plant: PlantKind,
    pub data: DataConfig,
    pub dictionary: DictionaryConfig,
    #[serde(default)]
    pub identification: IdentificationConfig,
    pub clf: ClfConfig,
    pub controller: ControllerConfig,
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub error_bound: ErrorBoundConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.plant.build().n();
        let d = &self.data;
        if d.trajectories == 0 || d.steps == 0 || !(d.dt > 0.0) {
            return Err(Error::Config("data needs trajectories, steps and dt > 0".into()));
        }
        d.sampler.validate(n)?;
        if d.max_abs_state.is_some_and(|b| !(b > 0.0)) {
            return Err(Error::Config("data max_abs_state must be positive".into()));
        }
        if self.dictionary.max_degree == 0 {
            return Err(Error::Config("dictionary max_degree must be at least 1".into()));
        }
        if !(self.identification.ridge >= 0.0) {
            return Err(Error::Config("ridge must be non-negative".into()));
        }
        self.clf.synthesis.validate()?;
        self.clf.level_sets.validate()?;
        let c = &self.controller;
        if !(c.u_min < c.u_max) || !c.u_min.is_finite() || !c.u_max.is_finite() {
            return Err(Error::Config(format!("need finite u_min < u_max, got [{}, {}]", c.u_min, c.u_max)));
        }
        if !(c.u_min <= 0.0 && c.u_max >= 0.0) {
            return Err(Error::Config("input bounds must contain u = 0".into()));
        }
        if c.horizon == 0 || !(c.r > 0.0) {
            return Err(Error::Config("controller needs horizon >= 1 and r > 0".into()));
        }
        c.explicit.validate()?;
        if let ControllerKind::Gain { k } = c.kind {
            if !(k > 0.0) {
                return Err(Error::Config(format!("gain k must be positive, got {k}")));
            }
        }
        let s = &self.simulation;
        s.options.validate()?;
        s.x0.validate(n)?;
        if s.runs == 0 {
            return Err(Error::Config("simulation needs at least one run".into()));
        }
        if let StateSampler::Points { points } = &s.x0 {
            if points.len() < s.runs {
                return Err(Error::Config(format!("{} runs but only {} points", s.runs, points.len())));
            }
        }
        if (s.options.dt - d.dt).abs() > 1e-12 {
            return Err(Error::Config("simulation dt must equal the data sampling time".into()));
        }
        if !(self.error_bound.window > 0.0) {
            return Err(Error::Config("error-bound window must be positive".into()));
        }
        let r = &self.report;
        if !(r.target_norm > 0.0 && r.band_margin >= 0.0 && r.tail_window > 0.0) {
            return Err(Error::Config("report thresholds must be positive".into()));
        }
        Ok(())
    }

    /// Seed for one named pipeline stage, derived from the root seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        // FNV-1a keeps the derivation stable across platforms and releases.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed;
        for b in stage.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> serde_json::Value {
        serde_json::json!({
            "name": "t",
            "seed": 3,
            "plant": "van_der_pol",
            "data": {"trajectories": 4, "sampler": {"kind": "circle", "radius": 1.0}, "dt": 0.01, "steps": 10},
            "dictionary": {"max_degree": 2},
            "clf": {"synthesis": {"gamma": 2.0, "c_low": 0.1, "c_high": 10.0}},
            "controller": {
                "kind": {"kind": "lmpc"}, "horizon": 5, "w": {"kind": "identity", "scale": 1.0},
                "r": 1.0, "u_min": -5.0, "u_max": 5.0, "explicit": {"kind": "sontag"}
            },
            "simulation": {"x0": {"kind": "disk", "radius": 1.0}, "runs": 2, "options": {"horizon": 1.0}}
        })
    }

    #[test]
    fn parses_minimal_config() {
        let c: ExperimentConfig = serde_json::from_value(base()).unwrap();
        c.validate().unwrap();
        assert_eq!(c.simulation.options.dt, 0.01);
        assert_eq!(c.clf.synthesis.max_iters, 5000);
    }

    #[test]
    fn rejects_unknown_fields() {
        let mut v = base();
        v["data"]["radius"] = serde_json::json!(1.0);
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }

    #[test]
    fn seed_is_mandatory() {
        let mut v = base();
        v.as_object_mut().unwrap().remove("seed");
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }

    #[test]
    fn rejects_inverted_bounds() {
        let mut v = base();
        v["controller"]["u_min"] = serde_json::json!(6.0);
        let c: ExperimentConfig = serde_json::from_value(v).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn samplers_are_seeded() {
        let s = StateSampler::Disk { radius: 1.0 };
        let a = s.sample(10, 7);
        assert_eq!(a, s.sample(10, 7));
        assert_ne!(a, s.sample(10, 8));
        assert!(a.iter().all(|x| x.norm() <= 1.0));
        let c = StateSampler::Circle { radius: 2.0 }.sample(8, 0);
        assert!(c.iter().all(|x| (x.norm() - 2.0).abs() < 1e-12));
    }

    #[test]
    fn stage_seeds_differ() {
        let c: ExperimentConfig = serde_json::from_value(base()).unwrap();
        assert_ne!(c.stage_seed("x0"), c.stage_seed("levels"));
        assert_eq!(c.stage_seed("x0"), c.stage_seed("x0"));
    }
}
