use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid environment spec: {0}")]
    InvalidEnv(String),

    #[error("state is terminal; {0} is undefined there")]
    TerminalState(&'static str),

    #[error("state is not terminal; reward is undefined")]
    NotTerminal,

    #[error("the initial state has no parents")]
    InitialState,

    #[error("action {action} is not valid in state {state}")]
    InvalidAction { action: usize, state: String },

    #[error("enumeration exceeded the cap of {cap} states")]
    EnumerationCap { cap: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("no valid actions to choose from")]
    EmptyActionSet,

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("inconsistent run state: {0}")]
    InvalidState(String),

    #[error("non-finite training loss at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
