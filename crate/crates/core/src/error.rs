use core::convert::Infallible;

/// Rejected input data or generator specification.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DataError {
    #[error("feature count must be in 1..={max}, got {got}")]
    Features { got: usize, max: usize },
    #[error("at least one cluster is required")]
    NoClusters,
    #[error("cluster {index} has size zero")]
    EmptyCluster { index: usize },
    #[error("data length {len} is not a multiple of the feature count {features}")]
    Shape { len: usize, features: usize },
    #[error("dataset contains a non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("dataset is empty")]
    Empty,
}

/// Failure of a clustering run. `E` is the error type of the backend that
/// performs the distance work (`Infallible` for the in-process scan).
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClusterError<E = Infallible> {
    #[error("run aborted by cancellation")]
    Aborted,
    #[error("invalid parameters: {0}")]
    InvalidParams(&'static str),
    #[error("cluster id space exhausted: more than {max} clusters")]
    Capacity { max: u16 },
    #[error("backend failure: {0}")]
    Backend(E),
}

impl ClusterError<Infallible> {
    /// Widens an error from an infallible backend into any backend error type.
    pub fn widen<E>(self) -> ClusterError<E> {
        match self {
            ClusterError::Aborted => ClusterError::Aborted,
            ClusterError::InvalidParams(m) => ClusterError::InvalidParams(m),
            ClusterError::Capacity { max } => ClusterError::Capacity { max },
            ClusterError::Backend(never) => match never {},
        }
    }
}
