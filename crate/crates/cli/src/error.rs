use std::fmt;

/// Failure category, mapped to the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Checkpoint,
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl fmt::Display) -> Self {
        Self {
            kind,
            message: message.to_string(),
        }
    }

    pub fn config(message: impl fmt::Display) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    pub fn data(message: impl fmt::Display) -> Self {
        Self::new(ErrorKind::Data, message)
    }

    pub fn checkpoint(message: impl fmt::Display) -> Self {
        Self::new(ErrorKind::Checkpoint, message)
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Checkpoint => 4,
            ErrorKind::Runtime => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<adkit_core::Error> for CliError {
    fn from(e: adkit_core::Error) -> Self {
        use adkit_core::Error as E;
        let kind = match &e {
            E::Manifest { .. } | E::Image { .. } => ErrorKind::Data,
            E::Load(_) => ErrorKind::Config,
            _ => ErrorKind::Runtime,
        };
        Self::new(kind, e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(ErrorKind::Runtime, e)
    }
}

/// Reclassifies a core error.
pub trait Context<T> {
    fn or_kind(self, kind: ErrorKind) -> Result<T, CliError>;
}

impl<T, E: fmt::Display> Context<T> for Result<T, E> {
    fn or_kind(self, kind: ErrorKind) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(kind, e))
    }
}
