use gmp::GmpError;

/// Command failure, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or missing inputs: exit 2.
    Usage(String),
    /// Unreadable or malformed data: exit 3.
    Data(String),
    /// Training objective rose beyond tolerance or went non-finite: exit 4.
    Numerical(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<GmpError> for CliError {
    fn from(e: GmpError) -> Self {
        match e {
            GmpError::InvalidArgument(m) => CliError::Usage(m),
            GmpError::Numerical(m) => CliError::Numerical(m),
            other => CliError::Data(other.to_string()),
        }
    }
}
