use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    InvalidSpec(String),

    #[error("size mismatch: expected {expected}, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("operands live on different lattices")]
    SpecMismatch,

    #[error("small divisor at l={l:?}, j={j:?}: |divisor| = {divisor:.3e} <= bound {bound:.3e}")]
    Diophantine {
        l: Vec<i64>,
        j: Vec<i64>,
        divisor: f64,
        bound: f64,
    },

    #[error("Melnikov condition violated at l={l:?}, j={j:?}, j'={jp:?} (margin {margin:.3e})")]
    Melnikov {
        l: Vec<i64>,
        j: Vec<i64>,
        jp: Vec<i64>,
        margin: f64,
    },

    #[error("Neumann series refused: norm of X is {norm:.3e} (needs < 1)")]
    NeumannGuard { norm: f64 },

    #[error("{what} did not converge after {iterations} iterations (last residual {residual:.3e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("Jacobian margin violated: sup |grad alpha| = {0:.3e}")]
    Jacobian(f64),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
