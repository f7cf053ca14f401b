use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("eigenvalue {index} has magnitude {magnitude:e}, below the floor {floor:e}")]
    EigenvalueBelowFloor {
        index: usize,
        magnitude: f64,
        floor: f64,
    },

    #[error("eigenvalue {re} + {im}i has no conjugate partner")]
    UnpairedEigenvalue { re: f64, im: f64 },

    #[error("{context}: regressor has effective rank {rank}, need {required}")]
    RankDeficient {
        context: &'static str,
        rank: usize,
        required: usize,
    },

    #[error("lifted state outside the stability region: V = {value} > r = {radius}")]
    OutsideStabilityRegion { value: f64, radius: f64 },

    #[error("no admissible level set: {0}")]
    NoAdmissibleLevel(String),

    #[error("state left the simulation box at t = {time}")]
    LeftSimulationBox { time: f64 },

    #[error("eigendecomposition failed to converge")]
    EigenFailure,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("invalid artifact {path}: {reason}")]
    InvalidArtifact { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Validation problems (bad config, missing or malformed inputs) as opposed
    /// to failures of the numerics themselves.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::MissingArtifact(_)
                | Error::InvalidArtifact { .. }
                | Error::Json(_)
                | Error::Csv(_)
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::EigenvalueBelowFloor { .. } => "eigenvalue_below_floor",
            Error::UnpairedEigenvalue { .. } => "unpaired_eigenvalue",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::OutsideStabilityRegion { .. } => "outside_stability_region",
            Error::NoAdmissibleLevel(_) => "no_admissible_level",
            Error::LeftSimulationBox { .. } => "left_simulation_box",
            Error::EigenFailure => "eigen_failure",
            Error::Config(_) => "config",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::InvalidArtifact { .. } => "invalid_artifact",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
