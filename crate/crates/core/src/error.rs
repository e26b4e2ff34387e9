use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("clamp initialization failed: {0}")]
    Initialization(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("scale {0:e} is outside the dyadic range [2^-32, 256]")]
    Range(f64),

    #[error("lowering failed: {0}")]
    Lowering(String),

    #[error("accumulator overflow in layer {layer} ({node})")]
    Overflow { layer: usize, node: String },

    #[error("data format error: {0}")]
    Format(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("training diverged at epoch {epoch}, stage {stage}, layer {layer}: non-finite {what}")]
    Divergence {
        epoch: usize,
        stage: usize,
        layer: String,
        what: String,
    },

    #[error("statistical test precondition violated: {0}")]
    Test(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
