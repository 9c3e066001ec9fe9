use thiserror::Error;

/// Errors raised while validating a model description or scenario document.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown state `{label}` in species `{species}`")]
    UnknownState { species: String, label: String },
    #[error("unknown species `{0}`")]
    UnknownSpecies(String),
    #[error("negative rate parameter: {0}")]
    NegativeRate(String),
    #[error(
        "cross section of {species}:{from}->{to} is non-zero at {wavelength_nm} nm \
         ({photon_ev:.3} eV), below the {threshold_ev} eV threshold"
    )]
    ThresholdViolation {
        species: String,
        from: String,
        to: String,
        wavelength_nm: f64,
        photon_ev: f64,
        threshold_ev: f64,
    },
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
}

impl ModelError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        ModelError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        match self {
            ModelError::UnknownState { .. } => "UnknownState",
            ModelError::UnknownSpecies(_) => "UnknownSpecies",
            ModelError::NegativeRate(_) => "NegativeRate",
            ModelError::ThresholdViolation { .. } => "ThresholdViolation",
            ModelError::DuplicateLabel(_) => "DuplicateLabel",
            ModelError::Invalid(_) => "InvalidModel",
            ModelError::Config { .. } => "ConfigError",
        }
    }
}

/// Errors raised by the simulation engine and protocol runner.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("kinetics sub-cycling needs more than {max_substeps} substeps (rate bound {max_rate:.3e} 1/s)")]
    StabilityViolation { max_substeps: usize, max_rate: f64 },
    #[error("Poisson solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("step {index} is out of bounds: {message}")]
    StepOutOfBounds { index: usize, message: String },
    #[error("unknown readout channel `{0}`")]
    UnknownChannel(String),
    #[error("invalid step: {0}")]
    InvalidStep(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("malformed artifact: {0}")]
    Format(String),
}

impl EngineError {
    pub fn code(&self) -> &'static str {
        match self {
            EngineError::StabilityViolation { .. } => "StabilityViolation",
            EngineError::NonConvergence { .. } => "NonConvergence",
            EngineError::StepOutOfBounds { .. } => "StepOutOfBounds",
            EngineError::UnknownChannel(_) => "UnknownChannel",
            EngineError::InvalidStep(_) => "InvalidStep",
            EngineError::Io(_) => "IOError",
            EngineError::Format(_) => "FormatError",
        }
    }
}

impl From<std::io::Error> for EngineError {
    fn from(e: std::io::Error) -> Self {
        EngineError::Io(e.to_string())
    }
}

/// Errors raised by the analysis routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("annulus {index} at r = {radius:.3} µm contains no pixels")]
    EmptyAnnulus { index: usize, radius: f64 },
    #[error("profile never exceeds the threshold")]
    NoCrossing,
    #[error("profile stays above the threshold out to its last radius")]
    EdgeOutsideProfile,
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("fit did not converge: {0}")]
    NonConvergence(String),
    #[error("zero variance in {0}")]
    ZeroVariance(String),
    #[error("insufficient switching events: {found} < {required}")]
    InsufficientEvents { found: usize, required: usize },
    #[error("missing artifact `{0}`")]
    MissingArtifact(String),
}

impl AnalysisError {
    pub fn code(&self) -> &'static str {
        match self {
            AnalysisError::EmptyAnnulus { .. } => "EmptyAnnulus",
            AnalysisError::NoCrossing => "NoCrossing",
            AnalysisError::EdgeOutsideProfile => "EdgeOutsideProfile",
            AnalysisError::DegenerateInput(_) => "DegenerateInput",
            AnalysisError::NonConvergence(_) => "NonConvergence",
            AnalysisError::ZeroVariance(_) => "ZeroVariance",
            AnalysisError::InsufficientEvents { .. } => "InsufficientEvents",
            AnalysisError::MissingArtifact(_) => "MissingArtifact",
        }
    }
}
