use qntrpo::driver::DriverError;
use qntrpo::policy::PolicyError;
use qntrpo::trustregion::TrustRegionError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Unreadable, malformed or invalid configuration.
    #[error("configuration error: {0}")]
    Parse(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("environment error: {0}")]
    Environment(String),
    #[error("incompatible configurations: {0}")]
    Incompatible(String),
    #[error("cannot write output: {0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Parse(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Environment(_) => 4,
            CliError::Incompatible(_) => 5,
            CliError::Output(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

impl From<TrustRegionError> for CliError {
    fn from(e: TrustRegionError) -> Self {
        match e {
            TrustRegionError::InvalidConfig(_) | TrustRegionError::DimensionMismatch { .. } => {
                CliError::Parse(e.to_string())
            }
            TrustRegionError::ObjectiveNonFinite(_) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<DriverError> for CliError {
    fn from(e: DriverError) -> Self {
        match e {
            DriverError::Config(_) => CliError::Parse(e.to_string()),
            DriverError::Env(_) => CliError::Environment(e.to_string()),
            DriverError::TrustRegion(t) => t.into(),
            DriverError::ConfigMismatch(_) => CliError::Incompatible(e.to_string()),
            DriverError::Policy(PolicyError::DimensionMismatch { .. } | PolicyError::BadObservation(_) | PolicyError::BadAction(_)) => {
                CliError::Environment(e.to_string())
            }
            DriverError::Policy(_) => CliError::Numerical(e.to_string()),
        }
    }
}
