use thiserror::Error;

/// Every failure the pruning toolkit can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("bad shape for tensor `{name}`: {reason}")]
    BadShape { name: String, reason: String },
    #[error("not an OBSD container")]
    NotAContainer,
    #[error("truncated container: {0}")]
    Truncated(String),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("bad metadata: {0}")]
    BadMetadata(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("step {step} out of range 1..={steps}")]
    BadStep { step: usize, steps: usize },
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("bad sparsity spec: {0}")]
    BadSpec(String),
    #[error("inverse factor for `{0}` has not been finalized")]
    NotFinalized(String),
    #[error("layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable tag used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DuplicateName(_) => "DuplicateName",
            Error::BadShape { .. } => "BadShape",
            Error::NotAContainer => "NotAContainer",
            Error::Truncated(_) => "Truncated",
            Error::UnknownDtype(_) => "UnknownDtype",
            Error::BadMetadata(_) => "BadMetadata",
            Error::BadConfig(_) => "BadConfig",
            Error::BadStep { .. } => "BadStep",
            Error::UnknownLayer(_) => "UnknownLayer",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NotPositiveDefinite { .. } => "NotPositiveDefinite",
            Error::BadSpec(_) => "BadSpec",
            Error::NotFinalized(_) => "NotFinalized",
            Error::Layer { source, .. } => source.kind(),
            Error::Io(_) => "Io",
        }
    }

    /// Layer id attached by the pipeline, if any.
    pub fn layer(&self) -> Option<&str> {
        match self {
            Error::Layer { layer, .. } => Some(layer),
            _ => None,
        }
    }

    pub(crate) fn in_layer(self, layer: &str) -> Error {
        match self {
            e @ Error::Layer { .. } => e,
            e => Error::Layer {
                layer: layer.to_string(),
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
