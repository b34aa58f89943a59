use thiserror::Error;

/// Errors raised by geometry, sampling, estimation and analysis routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point {0} lies outside the simulated patch")]
    OutOfDomain(String),
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("invalid cutoff delta = {delta} (must exceed spacing {spacing})")]
    InvalidDelta { delta: f64, spacing: f64 },
    #[error("invalid insertion point: {0}")]
    InvalidPoint(String),
    #[error("domain too small: {0}")]
    DomainTooSmall(String),
    #[error("spin correlator with an odd number of points ({0})")]
    OddPointCount(usize),
    #[error("coincident points: {0}")]
    CoincidentPoints(String),
    #[error("geometry too tight: {0}")]
    GeometryTooTight(String),
    #[error("annulus margin too small: {0}")]
    MarginTooSmall(String),
    #[error("invalid annulus: {0}")]
    InvalidAnnulus(String),
    #[error("point is not inside the allowed region")]
    PointOutsideRegion,
    #[error("inconsistent inputs: {0}")]
    InconsistentInputs(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("missing sweep: {0}")]
    MissingSweep(String),
    #[error("patch has {sites} sites, more than the enumeration limit {limit}")]
    PatchTooLarge { sites: usize, limit: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
