use std::path::PathBuf;

use crate::gmm::Frame;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("state too close to a primary (r1 = {r1:e}, r2 = {r2:e})")]
    DegenerateState { r1: f64, r2: f64 },
    #[error("integrator step size underflow at t = {t}")]
    StepSizeUnderflow { t: f64 },
    #[error("integrator exceeded {max_steps} steps at t = {t}")]
    TooManySteps { t: f64, max_steps: usize },
    #[error("non-finite state encountered during propagation at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("observer-target range {range_km:e} km is too small to define angles")]
    ZeroRange { range_km: f64 },
    #[error("covariance is not positive definite ({context})")]
    NotPositiveDefinite { context: &'static str },
    #[error("cluster has no members")]
    EmptyCluster,
    #[error("need at least {needed} particles, got {got}")]
    TooFewParticles { needed: usize, got: usize },
    #[error("frame mismatch: expected {expected:?}, found {found:?}")]
    FrameMismatch { expected: Frame, found: Frame },
    #[error("every likelihood is zero; the filter has diverged")]
    AllLikelihoodsZero,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("no MCMC start with finite target density in {attempts} prior draws")]
    InitializationFailed { attempts: usize },
    #[error("MCMC initial state lies outside the target support")]
    InitOutsideSupport,
    #[error("particle {index}: {source}")]
    Particle {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("mixture component {index}: {source}")]
    Component {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("loss of custody at step {step}: {reason}")]
    LossOfCustody { step: usize, reason: String },
    #[error("target never visible within {searched_steps} cadence steps from epoch 0")]
    NeverVisible { searched_steps: usize },
    #[error("stored NRHO fails closure check ({closure:e} > {limit:e})")]
    InvalidNrho { closure: f64, limit: f64 },
    #[error("differential correction did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("unknown config key: {0}")]
    ConfigUnknownKey(String),
    #[error("config value out of range: {key}: {message}")]
    ConfigRange { key: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed input: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn particle(index: usize, source: Error) -> Self {
        Error::Particle {
            index,
            source: Box::new(source),
        }
    }

    pub(crate) fn component(index: usize, source: Error) -> Self {
        Error::Component {
            index,
            source: Box::new(source),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors that mean the estimate no longer explains the data.
    pub fn is_loss_of_custody(&self) -> bool {
        match self {
            Error::AllLikelihoodsZero | Error::LossOfCustody { .. } => true,
            Error::Component { source, .. } => source.is_loss_of_custody(),
            _ => false,
        }
    }
}
