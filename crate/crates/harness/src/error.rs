use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error("run {framework} / {samples} per class / repetition {repetition} failed: {source}")]
    Cell {
        framework: String,
        samples: usize,
        repetition: usize,
        #[source]
        source: Box<HarnessError>,
    },

    #[error(transparent)]
    Core(#[from] segxfer::Error),
}

impl HarnessError {
    /// Process exit code: 2 configuration, 3 data, 4 numeric failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use segxfer::Error as E;
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Cell { source, .. } => source.exit_code(),
            HarnessError::Core(e) => match e {
                E::Param(_) | E::Shape { .. } => 2,
                E::Data(_) | E::Format(_) | E::Truncated { .. } | E::SpecMismatch(_) | E::Io { .. } => 3,
                E::Numeric(_) | E::Degenerate { .. } => 4,
                E::State(_) => 1,
            },
        }
    }
}

pub(crate) fn io_error(path: &std::path::Path, e: std::io::Error) -> HarnessError {
    HarnessError::Core(segxfer::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
