//! Deterministic reaction-diffusion engine for defect charge-state conversion
//! by photoactivated itinerant carriers, with a stochastic single-emitter
//! companion and the image/trace analysis used to characterize both.
//!
//! The crate is organized bottom-up:
//!
//! - [`units`] and [`model`]: declarative species/transition description,
//!   validated into an immutable [`model::ModelRegistry`].
//! - [`photophysics`]: beams, local rates and the single-cell kinetics step.
//! - [`transport`]: carrier diffusion, optional Poisson/drift, and the
//!   operator-split macro step over the whole grid.
//! - [`protocol`]: timed illumination, raster, dark, readout and snapshot steps,
//!   plus the on-disk artifact formats.
//! - [`analysis`]: radial profiles, edge extraction and the curve fitters.
//! - [`stochastic`]: Gillespie telegraph simulation and its estimators.
//! - [`scenario`], [`presets`] and [`pipeline`]: configuration documents,
//!   bundled scenarios and the run/analyze drivers used by the CLI.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod model;
pub mod photophysics;
pub mod pipeline;
pub mod presets;
pub mod protocol;
pub mod scenario;
pub mod state;
pub mod stochastic;
pub mod transport;
pub mod units;

pub use error::{AnalysisError, EngineError, ModelError};
pub use model::{GridSpec, ModelRegistry};
pub use photophysics::Beam;
pub use protocol::{ReadoutImage, ScheduleStep};
pub use scenario::Scenario;
pub use state::SimulationState;

/// Engine version recorded in run manifests.
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
