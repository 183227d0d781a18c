use std::fmt;
use std::process::ExitCode;

/// Failure category; the discriminant is the process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Internal = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    VocabMismatch = 5,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        CliError::new(Kind::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError::new(Kind::Data, message)
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.kind as u8)
    }

    /// Same error, re-tagged as a configuration problem.
    pub fn as_config(self) -> Self {
        CliError {
            kind: Kind::Config,
            ..self
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<hybridseq::Error> for CliError {
    fn from(e: hybridseq::Error) -> Self {
        use hybridseq::Error as E;
        let kind = match &e {
            E::InvalidArgument(_) => Kind::Config,
            E::NonFinite(_) => Kind::Numeric,
            E::VocabMismatch { .. } => Kind::VocabMismatch,
            E::Io { .. }
            | E::Record { .. }
            | E::UnknownLabel(_)
            | E::Dimension(_)
            | E::InvalidState(_)
            | E::MissingVector { .. }
            | E::Checkpoint(_)
            | E::Json(_) => Kind::Data,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(Kind::Internal, e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::data(e.to_string())
    }
}
