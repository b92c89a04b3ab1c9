use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("gradient requested for a non-scalar output of shape {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },

    #[error("invalid constraint: {0}")]
    InvalidConstraint(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("size guard exceeded: {0}")]
    SizeGuard(String),

    #[error("empty selection")]
    EmptySelection,

    #[error("soft objective has no facility mass (sum of x is zero)")]
    NoFacilityMass,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("no feasible sample was produced during search")]
    NoFeasibleSample,

    #[error("instance schema violation: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
