use std::fmt;

/// Bad flags, configuration or inputs that contradict each other.
pub const EXIT_USAGE: u8 = 2;
/// Unreadable, unwritable or missing artifacts.
pub const EXIT_IO: u8 = 3;
/// Non-finite values during training or evaluation.
pub const EXIT_NUMERIC: u8 = 4;

/// An error together with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(msg: impl fmt::Display) -> Self {
        Self {
            code: EXIT_USAGE,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn context(mut self, what: impl fmt::Display + Send + Sync + 'static) -> Self {
        self.error = self.error.context(what);
        self
    }
}

impl From<tritower::Error> for Failure {
    fn from(e: tritower::Error) -> Self {
        use tritower::Error as E;
        let code = match &e {
            E::Io(_) | E::Json(_) | E::BadMagic | E::BadVersion(_) | E::TruncatedFile | E::Malformed(_) => EXIT_IO,
            E::NonFiniteLoss { .. } | E::ZeroRow { .. } | E::NotNormalized { .. } | E::NotAProbability { .. } => {
                EXIT_NUMERIC
            }
            _ => EXIT_USAGE,
        };
        Self { code, error: e.into() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: EXIT_IO,
            error: e.into(),
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Attaches a description to any error convertible into a [`Failure`].
pub trait Context<T> {
    fn with(self, what: impl fmt::Display + Send + Sync + 'static) -> CliResult<T>;
}

impl<T, E: Into<Failure>> Context<T> for Result<T, E> {
    fn with(self, what: impl fmt::Display + Send + Sync + 'static) -> CliResult<T> {
        self.map_err(|e| e.into().context(what))
    }
}
