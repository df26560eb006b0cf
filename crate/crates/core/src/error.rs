use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty dataset after filtering")]
    EmptyDataset,

    #[error("not found: {0}")]
    NotFound(String),

    #[error("budget infeasible: requested {got_bytes} bytes, minimum feasible is {min_bytes} bytes")]
    BudgetInfeasible { min_bytes: u64, got_bytes: u64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("corrupt file {path}: {msg}")]
    Corrupt { path: String, msg: String },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
