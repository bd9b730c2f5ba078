use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("degenerate 6D rotation parameters{}", node.map(|n| format!(" at node {n}")).unwrap_or_default())]
    DegenerateRotation { node: Option<usize> },

    #[error("neighbourhood graph has {count} connected components (component sizes {sizes:?})")]
    Disconnected { count: usize, sizes: Vec<usize> },

    #[error("system is not positive definite: pivot {pivot} has value {value:e} (diagonal scale {scale:e})")]
    NotPositiveDefinite { pivot: usize, value: f64, scale: f64 },

    #[error("infinite geodesic distance between {from} and {to}")]
    InfiniteGeodesic { from: usize, to: usize },

    #[error("non-finite loss at outer iteration {outer}, inner step {inner}: {detail}")]
    NonFiniteLoss {
        outer: usize,
        inner: usize,
        detail: String,
    },

    #[error("gradient check failed at outer iteration {outer}: component {component} analytic {analytic:e} vs numeric {numeric:e}")]
    GradientCheck {
        outer: usize,
        component: usize,
        analytic: f64,
        numeric: f64,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
