use gmflow_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<FlowError>,
    },

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("loss error: {0}")]
    Loss(String),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("training diverged at iteration {iteration}: loss is {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = FlowError> = std::result::Result<T, E>;

impl FlowError {
    pub fn config(msg: impl Into<String>) -> Self {
        FlowError::Config(msg.into())
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        FlowError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Attaches a pipeline stage name to an error.
pub(crate) trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<FlowError>> StageContext<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| FlowError::Stage {
            stage,
            source: Box::new(e.into()),
        })
    }
}
