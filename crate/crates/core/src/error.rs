use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("degenerate spectrum: repeated eigenvalue {0}")]
    DegenerateSpectrum(f64),
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("blow-up: sup norm exceeded {bound} at t = {time}")]
    BlowUp { time: f64, bound: f64 },
    #[error("newton did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonDiverged { iterations: usize, residual: f64 },
    #[error("singular jacobian in newton iteration {0}")]
    SingularJacobian(usize),
    #[error("state is {distance:e} from the manifold, beyond the projection radius {radius:e}")]
    OutOfTube { distance: f64, radius: f64 },
    #[error("no convergence to the manifold before t = {t_cap} (distance {distance:e})")]
    BasinEscape { t_cap: f64, distance: f64 },
    #[error("noise is not trace class: {0}")]
    NoiseNotTraceClass(String),
    #[error("at t = {time}: {source}")]
    AtTime { time: f64, source: Box<Error> },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn at(self, time: f64) -> Error {
        Error::AtTime { time, source: Box::new(self) }
    }

    /// Numerical failures as opposed to invalid requests.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::BlowUp { .. }
            | Error::NewtonDiverged { .. }
            | Error::SingularJacobian(_)
            | Error::OutOfTube { .. }
            | Error::BasinEscape { .. }
            | Error::DegenerateSpectrum(_) => true,
            Error::AtTime { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
