//! Plants, the RK4 integrator, the sample-and-hold loop and the prediction-error
//! diagnostic.

mod closed_loop;
mod error_bound;
mod plant;
mod rk4;

pub use closed_loop::{run_closed_loop, ClosedLoop, ControllerKind, SimulationOptions, SolverStats, Trajectory};
pub use error_bound::{check_error_bound, error_bound, ErrorBoundReport};
pub use plant::{Plant, PlantSpec, VectorField};
pub use rk4::{rk4_integrate, rk4_step};
