use std::path::PathBuf;

/// Errors produced by the toolkit.
///
/// Variants are split along the line the CLI uses for exit codes:
/// [`Error::is_config`] marks problems with configuration or usage, all
/// other variants are data or I/O problems.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}, line {line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("lexicon has no classes")]
    EmptyLexicon,

    #[error("surface form {form:?} maps to both {first:?} and {second:?}")]
    AmbiguousSynonym {
        form: String,
        first: String,
        second: String,
    },

    #[error("invalid lexicon: {0}")]
    InvalidLexicon(String),

    #[error("class {0:?} is not in the lexicon")]
    UnknownClass(String),

    #[error("image id {0:?} has no ground truth")]
    UnknownImage(String),

    #[error("cannot aggregate an empty list of samples")]
    EmptySamples,

    #[error("micro CHAIR_i is undefined: no object mentions in any sample")]
    NoMentions,

    #[error("coverage is undefined: every sample has an empty ground-truth set")]
    NoGroundTruth,

    #[error("dialogue {0:?} has no human turn")]
    EmptyDialogue(String),

    #[error("dialogue {id:?} is malformed: {reason}")]
    MalformedDialogue { id: String, reason: String },

    #[error("holdout {holdout} must be smaller than the dataset size {size}")]
    HoldoutTooLarge { holdout: usize, size: usize },

    #[error("token {0:?} is not in the policy vocabulary")]
    OutOfVocabulary(String),

    #[error("invalid token sequence: {0}")]
    InvalidSequence(String),

    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("non-finite gradient at parameter {index} ({feature} -> {token}): {value}")]
    NonFiniteGradient {
        index: usize,
        feature: String,
        token: String,
        value: f64,
    },

    #[error("training split is empty")]
    EmptyTrainingSet,

    #[error("world config names {classes} classes but scenes need at least {min_size}")]
    TooFewClasses { classes: usize, min_size: usize },

    #[error("pretraining corpus is empty")]
    EmptyCorpus,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for configuration/usage problems as opposed to bad input data.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::TooFewClasses { .. }
                | Error::HoldoutTooLarge { .. }
                | Error::StepOutOfRange { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
