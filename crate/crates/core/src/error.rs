use std::fmt;

use thiserror::Error;

/// Which LayerNorm call a degenerate row was found at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    Standalone,
    /// `Y = LayerNorm(X + F)`
    Y,
    /// `Z = LayerNorm(S)`
    Z,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Standalone => write!(f, "layernorm"),
            Site::Y => write!(f, "Y"),
            Site::Z => write!(f, "Z"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("fractional power of non-positive entry at ({row}, {col})")]
    NonPositiveEntry { row: usize, col: usize },
    #[error("diagonal entry {index} is below the singularity threshold")]
    SingularDiagonal { index: usize },
    #[error("matrix is singular (pivot below threshold)")]
    SingularMatrix,
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("degenerate row {row} at {site}: variance at or below floor")]
    DegenerateRow { site: Site, row: usize },
    #[error("ReLU preactivation within {margin:e} of the kink")]
    KinkProximity { margin: f64 },
    #[error("power iteration did not converge in {iterations} iterations")]
    ConvergenceFailure { iterations: usize },
    #[error("non-finite value encountered")]
    NonFiniteOutput,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_check(
    ok: bool,
    op: &'static str,
    left: (usize, usize),
    right: (usize, usize),
) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { op, left, right })
    }
}
