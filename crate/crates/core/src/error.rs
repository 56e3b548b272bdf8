use thiserror::Error;

#[derive(Debug, Error)]
pub enum UliError {
    #[error("unknown symbol {symbol:?} in {text:?}")]
    UnknownSymbol { symbol: char, text: String },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid concept: {0}")]
    InvalidConcept(String),
    #[error("duplicate category {0:?}")]
    DuplicateCategory(String),
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("invalid coordinate {0}")]
    InvalidCoordinate(f64),
    #[error("offset {offset} outside [-{range}, {range}]")]
    OffsetOverflow { offset: f64, range: f64 },
    #[error("degenerate instance: {0}")]
    DegenerateInstance(String),
    #[error("schedule violation at step {step}: token {token} outside {expected}")]
    ScheduleViolation { step: usize, token: usize, expected: String },
    #[error("geometry error: {0}")]
    GeometryError(String),
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("{boxes} boxes exceed {points} grid points")]
    CapacityExceeded { boxes: usize, points: usize },
    #[error("polygon center lies outside the polygon")]
    CenterOutside,
    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: usize, loss: f64 },
    #[error("parse error at line {line}, column {column}: {message}")]
    ParseError { line: usize, column: usize, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, UliError>;
