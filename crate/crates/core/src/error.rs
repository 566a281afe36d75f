use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {shapes}")]
    Shape { op: &'static str, shapes: String },

    #[error("backward target must be a scalar, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("context overflow: sequence of {len} tokens exceeds context length {ctx_len}")]
    ContextOverflow { len: usize, ctx_len: usize },

    #[error("utterances are not sorted by start time (index {0})")]
    Unsorted(usize),

    #[error("empty dialog")]
    EmptyDialog,

    #[error("invalid utterance: {0}")]
    InvalidUtterance(String),

    #[error("line {line}: {msg}")]
    Record { line: usize, msg: String },

    #[error("too few dialogs to split: {0} (need at least 3)")]
    TooFewDialogs(usize),

    #[error("invalid split ratios: {0}")]
    BadRatios(String),

    #[error("degenerate grammar: {0}")]
    Grammar(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("vocabulary size {requested} leaves no room: need more than {minimum}")]
    VocabTooSmall { requested: usize, minimum: usize },

    #[error("token id {0} out of range")]
    TokenOutOfRange(u32),

    #[error("dialog {0}: missing POS tags")]
    MissingTags(String),

    #[error("bAcc undefined: labels contain a single class")]
    SingleClass,

    #[error("length mismatch: {0}")]
    Length(String),

    #[error("empty threshold grid")]
    EmptyGrid,

    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),

    #[error("no qualifying turns: {0}")]
    NoQualifyingTurns(String),

    #[error("no qualifying targets: {0}")]
    NoTargets(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("prefix must end mid-turn (last token is a speaker token)")]
    PrefixAtTurnStart,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
