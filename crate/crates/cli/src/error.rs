use std::fmt;
use std::process::ExitCode;

/// Failure classes and their process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    /// Missing, unreadable or malformed inputs and bad arguments (exit 2).
    Input,
    /// An output failed one of its invariant checks (exit 3).
    Invariant,
    /// A configured resource guard refused the job (exit 4).
    Resource,
}

impl ExitKind {
    pub fn code(self) -> u8 {
        match self {
            ExitKind::Input => 2,
            ExitKind::Invariant => 3,
            ExitKind::Resource => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub error: anyhow::Error,
    silent: bool,
}

impl CliError {
    pub fn new(kind: ExitKind, message: impl Into<String>) -> Self {
        Self::from_anyhow(kind, anyhow::anyhow!(message.into()))
    }

    pub fn from_anyhow(kind: ExitKind, error: anyhow::Error) -> Self {
        Self {
            kind,
            error,
            silent: false,
        }
    }

    /// Marks a non-failure early exit, such as printing `--help`.
    pub(crate) fn silent(mut self) -> Self {
        self.silent = true;
        self
    }

    pub fn is_silent(&self) -> bool {
        self.silent
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.kind.code())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl std::error::Error for CliError {}

impl From<neuseg::Error> for CliError {
    fn from(e: neuseg::Error) -> Self {
        let kind = match e {
            neuseg::Error::Assembly(_) => ExitKind::Invariant,
            _ => ExitKind::Input,
        };
        Self::from_anyhow(kind, e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<neuseg::Error>() {
            Ok(inner) => inner.into(),
            Err(e) => Self::from_anyhow(ExitKind::Input, e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::from_anyhow(ExitKind::Input, e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::from_anyhow(ExitKind::Input, e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Fails with [`ExitKind::Invariant`] unless `ok`.
pub fn ensure_invariant(ok: bool, message: impl FnOnce() -> String) -> CliResult<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::new(ExitKind::Invariant, message()))
    }
}
