use thiserror::Error;

/// Errors raised anywhere in the engine.
///
/// The variants map onto the CLI exit codes: configuration problems exit with
/// 2, data/format problems with 3 and numeric failures with 4.
#[derive(Debug, Error)]
pub enum HexaError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numeric failure in {context}: {detail}")]
    Numeric { context: String, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<HexaError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HexaError>;

impl HexaError {
    pub fn contract(msg: impl Into<String>) -> Self {
        HexaError::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        HexaError::Config(msg.into())
    }

    pub fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        HexaError::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        HexaError::Format {
            offset,
            detail: detail.into(),
        }
    }

    /// Wraps the error with a description of what was running.
    pub fn context(self, context: impl Into<String>) -> Self {
        HexaError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping context wrappers.
    pub fn root(&self) -> &HexaError {
        match self {
            HexaError::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit status used by the command line front-end.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            HexaError::Config(_) => 2,
            HexaError::Format { .. } | HexaError::Io(_) => 3,
            HexaError::Numeric { .. } => 4,
            // Contract and shape violations surface from bad inputs or settings.
            HexaError::Shape { .. } | HexaError::Contract(_) | HexaError::Architecture(_) => 2,
            HexaError::Context { .. } => unreachable!(),
        }
    }
}

/// Attaches run context to a fallible result.
pub trait ResultExt<T> {
    fn context(self, context: impl Into<String>) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, context: impl Into<String>) -> Result<T> {
        self.map_err(|e| e.context(context))
    }
}
