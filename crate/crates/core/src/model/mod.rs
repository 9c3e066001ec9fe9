//! Declarative physical model: species, charge states, photo-transitions,
//! capture channels and traps, plus the simulation grid.
//!
//! The `*Spec` types mirror the configuration document one-to-one and are
//! what gets (de)serialized. [`ModelRegistry::validate`] checks them and
//! compiles the flat channel tables the engine iterates over.

mod registry;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::units::{self, DIAMOND_ATOM_DENSITY};

pub use registry::{
    CaptureChannel, ModelRegistry, PhotoChannel, ReleaseChannel, Slot, Transfer, TransferKind, TunnelChannel,
};

/// Itinerant carrier type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Carrier {
    Electron,
    Hole,
}

impl Carrier {
    /// Charge in units of e.
    pub fn charge(self) -> i32 {
        match self {
            Carrier::Electron => -1,
            Carrier::Hole => 1,
        }
    }

    /// Index into `[electrons, holes]` pairs.
    pub fn index(self) -> usize {
        match self {
            Carrier::Electron => 0,
            Carrier::Hole => 1,
        }
    }
}

/// One charge state of a defect species.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChargeStateSpec {
    pub label: String,
    /// Charge relative to the neutral lattice, in units of e.
    pub charge: i32,
    /// Emission coefficient per detection channel, kcps per (µm⁻³ · mW/µm²).
    #[serde(default)]
    pub brightness: BTreeMap<String, f64>,
}

/// Piecewise-constant photo-ionization cross-section table.
///
/// Entries are `[wavelength_nm, sigma_cm2]` sorted by wavelength. An entry
/// applies from its wavelength up to the next listed one; wavelengths bluer
/// than the first entry use the first value. The threshold gate of the owning
/// transition zeroes the table for photons below threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CrossSectionTable(pub Vec<[f64; 2]>);

impl CrossSectionTable {
    pub fn flat(sigma_cm2: f64) -> Self {
        CrossSectionTable(vec![[1.0, sigma_cm2]])
    }

    /// σ(λ) in cm², ignoring any threshold.
    pub fn lookup(&self, wavelength_nm: f64) -> f64 {
        let entries = &self.0;
        match entries.iter().rposition(|e| e[0] <= wavelength_nm) {
            Some(i) => entries[i][1],
            None => entries.first().map_or(0.0, |e| e[1]),
        }
    }
}

/// Optically driven change of charge state that emits one carrier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhotoTransitionSpec {
    pub from: String,
    pub to: String,
    pub emits: Carrier,
    pub threshold_ev: f64,
    pub cross_section: CrossSectionTable,
    /// Rate ∝ intensity² when set: `σ·Φ·(I / reference_intensity)`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub two_photon: bool,
    /// mW/µm², only used by two-photon transitions.
    #[serde(default = "default_reference_intensity")]
    pub reference_intensity: f64,
}

fn default_reference_intensity() -> f64 {
    1.0
}

/// Bimolecular capture of a free carrier: rate per defect = coefficient · n_carrier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureSpec {
    pub from: String,
    pub to: String,
    pub captures: Carrier,
    /// µm³/s.
    pub coefficient: f64,
}

/// Non-optical charge transfer from an optically excited donor state into an
/// empty trap. Per donor the rate is `coefficient · f_exc · n_empty`, with
/// `f_exc = I/(I + saturation_intensity)` summed over beams inside `band_nm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TunnelingSpec {
    pub donor: String,
    pub donor_from: String,
    pub donor_to: String,
    /// µm³/s.
    pub coefficient: f64,
    /// mW/µm².
    pub saturation_intensity: f64,
    pub band_nm: [f64; 2],
}

/// Trap behaviour. A trap species has exactly two states: `states[0]` is
/// empty and `states[1]` is filled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrapSpec {
    /// s; filled traps release their carrier at 1/release_lifetime.
    pub release_lifetime: f64,
    #[serde(default = "default_release_carrier")]
    pub releases: Carrier,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tunneling: Option<TunnelingSpec>,
}

fn default_release_carrier() -> Carrier {
    Carrier::Hole
}

/// An immobile defect species.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesSpec {
    pub name: String,
    pub concentration_ppb: f64,
    pub states: Vec<ChargeStateSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub photo: Vec<PhotoTransitionSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub capture: Vec<CaptureSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trap: Option<TrapSpec>,
    /// Initial occupation fractions by state label; defaults to the first state.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub initial: BTreeMap<String, f64>,
}

impl SpeciesSpec {
    pub fn is_trap(&self) -> bool {
        self.trap.is_some()
    }

    pub fn state_index(&self, label: &str) -> Option<usize> {
        self.states.iter().position(|s| s.label == label)
    }
}

/// Carrier transport and electrostatics parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarrierSpec {
    /// µm²/s.
    pub hole_diffusion: f64,
    /// µm²/s.
    pub electron_diffusion: f64,
    /// µm²/(V·s); only used when space charge is enabled.
    #[serde(default)]
    pub hole_mobility: f64,
    #[serde(default)]
    pub electron_mobility: f64,
    #[serde(default = "default_permittivity")]
    pub relative_permittivity: f64,
}

fn default_permittivity() -> f64 {
    5.7
}

impl Default for CarrierSpec {
    fn default() -> Self {
        CarrierSpec {
            hole_diffusion: 1.0,
            electron_diffusion: 1.0,
            hole_mobility: 0.0,
            electron_mobility: 0.0,
            relative_permittivity: default_permittivity(),
        }
    }
}

/// Raw model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub carriers: CarrierSpec,
    pub species: Vec<SpeciesSpec>,
}

/// Square-cell simulation grid centred on the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    /// µm per cell.
    pub dx: f64,
    /// atoms/cm³, used to convert ppb concentrations.
    #[serde(default = "default_host_density")]
    pub host_atom_density: f64,
    /// Always 2: thin-slab approximation, densities are uniform through the slab.
    #[serde(default = "default_dimension")]
    pub geometry_dimension: u8,
}

fn default_host_density() -> f64 {
    DIAMOND_ATOM_DENSITY
}

fn default_dimension() -> u8 {
    2
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, dx: f64) -> Self {
        GridSpec {
            nx,
            ny,
            dx,
            host_atom_density: DIAMOND_ATOM_DENSITY,
            geometry_dimension: 2,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.nx < 8 || self.ny < 8 {
            return Err(ModelError::config("grid", "nx and ny must be at least 8"));
        }
        if !(self.dx > 0.0 && self.dx.is_finite()) {
            return Err(ModelError::config("grid.dx", "must be positive"));
        }
        if !(self.host_atom_density > 0.0) {
            return Err(ModelError::config("grid.host_atom_density", "must be positive"));
        }
        if self.geometry_dimension != 2 {
            return Err(ModelError::config(
                "grid.geometry_dimension",
                "only the 2-D thin-slab geometry is supported",
            ));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    /// x coordinate (µm) of the centre of column `ix`.
    pub fn x(&self, ix: usize) -> f64 {
        (ix as f64 - (self.nx as f64 - 1.0) * 0.5) * self.dx
    }

    /// y coordinate (µm) of the centre of row `iy`.
    pub fn y(&self, iy: usize) -> f64 {
        (iy as f64 - (self.ny as f64 - 1.0) * 0.5) * self.dx
    }

    /// Half extents of the grid, µm.
    pub fn half_extent(&self) -> (f64, f64) {
        (self.nx as f64 * self.dx * 0.5, self.ny as f64 * self.dx * 0.5)
    }

    /// Cell containing point (x, y), if inside the grid.
    pub fn cell_at(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = x / self.dx + self.nx as f64 * 0.5;
        let fy = y / self.dx + self.ny as f64 * 0.5;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        (ix < self.nx && iy < self.ny).then_some((ix, iy))
    }

    pub fn density_of(&self, ppb: f64) -> f64 {
        units::ppb_to_density(ppb, self.host_atom_density)
    }
}

/// Validates a raw model description into an immutable registry.
pub fn validate_model(spec: &ModelSpec) -> Result<ModelRegistry, ModelError> {
    ModelRegistry::validate(spec)
}
