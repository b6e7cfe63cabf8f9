use thiserror::Error;

#[derive(Debug, Error)]
pub enum Failure {
    #[error("{0}")]
    Config(String),
    #[error("crafting stopped after {rounds} rounds without reaching error {target}; artifacts written to {out}")]
    NotConverged { rounds: usize, target: f32, out: String },
    #[error("{0} (pass --force to proceed anyway)")]
    Fingerprint(learnlock::Error),
    #[error(transparent)]
    Runtime(learnlock::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Config(_) => 2,
            Failure::NotConverged { .. } => 3,
            Failure::Fingerprint(_) => 4,
        }
    }
}

impl From<learnlock::Error> for Failure {
    fn from(e: learnlock::Error) -> Self {
        match e {
            learnlock::Error::FingerprintMismatch { .. } => Failure::Fingerprint(e),
            learnlock::Error::Config(m) => Failure::Config(m),
            other => Failure::Runtime(other),
        }
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;
