use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the support or domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate conditional variance at w = {w}")]
    DegenerateVariance { w: f64 },

    /// The GLARMA recursion produced a non-finite state or residual.
    #[error("recursion diverged at t = {t}: {detail}")]
    Divergence { t: usize, detail: String },

    #[error("dimension mismatch: {0}")]
    Contract(String),

    #[error("inner mode failure: {0}")]
    InnerFailure(String),

    #[error("inner mode did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    InnerNonConvergence { iterations: usize, grad_norm: f64 },

    #[error("series {index} ({id}): {source}")]
    Series {
        index: usize,
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("quadrature: {0}")]
    Quadrature(String),

    /// The negated Hessian is not positive definite. Each entry of
    /// `null_directions` lists the parameter names loading on one
    /// near-null eigenvector.
    #[error("singular information matrix; null directions: {null_directions:?}")]
    SingularInformation { null_directions: Vec<String> },

    #[error("model specification: {0}")]
    Spec(String),

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn in_series(self, index: usize, id: &str) -> Error {
        Error::Series {
            index,
            id: id.to_string(),
            source: Box::new(self),
        }
    }
}
