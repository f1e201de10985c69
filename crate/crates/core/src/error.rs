use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("triangle {triangle} references vertex {index} but the mesh has {n_vertices} vertices")]
    IndexOutOfRange { triangle: usize, index: usize, n_vertices: usize },

    #[error("triangle {triangle} is degenerate (area {area:e} mm^2)")]
    DegenerateTriangle { triangle: usize, area: f64 },

    #[error("edge ({0}, {1}) is shared by more than two triangles")]
    NonManifold(usize, usize),

    #[error("mask selects no triangles")]
    EmptyMask,

    #[error("matrix not positive definite at pivot {pivot} ({context})")]
    NotPositiveDefinite { context: String, pivot: usize },

    #[error("rank-deficient design: columns {columns:?} are linearly dependent on earlier columns")]
    RankDeficient { columns: Vec<usize> },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("vertex {vertex}: temporal mean {mean:e} is not usable for percent signal change")]
    BadVertexMean { vertex: usize, mean: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures of the numerical kernels rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NotPositiveDefinite { .. })
    }
}
