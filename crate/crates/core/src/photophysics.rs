//! Local kinetics: beam intensity, photo and capture rates, and the
//! flux-form explicit-Euler update of one cell.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::EngineError;
use crate::model::{CaptureChannel, Carrier, ModelRegistry, PhotoChannel, TransferKind};
use crate::units::{cm2_to_um2, photon_flux};

/// Gaussian illumination spot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Beam {
    /// nm.
    pub wavelength: f64,
    /// mW.
    pub power: f64,
    /// 1/e² intensity radius, µm.
    pub waist: f64,
    /// µm.
    #[serde(default)]
    pub center: [f64; 2],
}

impl Beam {
    pub fn new(wavelength: f64, power: f64, waist: f64) -> Self {
        Beam {
            wavelength,
            power,
            waist,
            center: [0.0, 0.0],
        }
    }

    pub fn at(mut self, x: f64, y: f64) -> Self {
        self.center = [x, y];
        self
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.power >= 0.0) || !(self.waist > 0.0) || !(self.wavelength > 0.0) {
            return Err(EngineError::InvalidStep(format!(
                "beam needs power >= 0, waist > 0 and wavelength > 0 (got {self:?})"
            )));
        }
        Ok(())
    }

    /// Peak intensity 2P/(πw²), mW/µm².
    pub fn peak_intensity(&self) -> f64 {
        2.0 * self.power / (PI * self.waist * self.waist)
    }

    /// Intensity at (x, y), mW/µm².
    pub fn intensity(&self, x: f64, y: f64) -> f64 {
        beam_intensity(self, x, y)
    }
}

/// I(r) = 2P/(πw²)·exp(−2r²/w²).
pub fn beam_intensity(beam: &Beam, x: f64, y: f64) -> f64 {
    let dx = x - beam.center[0];
    let dy = y - beam.center[1];
    let w2 = beam.waist * beam.waist;
    beam.peak_intensity() * (-2.0 * (dx * dx + dy * dy) / w2).exp()
}

/// Photo-transition rate per defect (1/s) at the given intensity and wavelength.
pub fn photo_rate(tr: &PhotoChannel, intensity: f64, wavelength_nm: f64) -> f64 {
    let sigma = tr.sigma(wavelength_nm);
    if sigma == 0.0 || intensity <= 0.0 {
        return 0.0;
    }
    let rate = cm2_to_um2(sigma) * photon_flux(intensity, wavelength_nm);
    if tr.two_photon {
        rate * intensity / tr.reference_intensity
    } else {
        rate
    }
}

/// Capture rate per defect (1/s).
pub fn capture_rate(ch: &CaptureChannel, carrier_density: f64) -> f64 {
    ch.coefficient * carrier_density
}

/// Fraction of the tunneling donor population that is optically excited.
pub fn excitation_fraction(intensity: f64, saturation_intensity: f64) -> f64 {
    if intensity <= 0.0 {
        0.0
    } else {
        intensity / (intensity + saturation_intensity)
    }
}

/// Illumination seen by one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalIllumination {
    pub wavelength: f64,
    /// mW/µm².
    pub intensity: f64,
}

/// Optical drive of one cell: photo rate per photo channel and excitation
/// fraction per tunneling channel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellDrive {
    pub photo_rates: Vec<f64>,
    pub excitation: Vec<f64>,
}

impl CellDrive {
    pub fn dark(registry: &ModelRegistry) -> Self {
        CellDrive {
            photo_rates: vec![0.0; registry.photo_channels().len()],
            excitation: vec![0.0; registry.tunnel_channels().len()],
        }
    }

    pub fn from_illumination(registry: &ModelRegistry, light: &[LocalIllumination]) -> Self {
        let mut drive = CellDrive::dark(registry);
        drive.accumulate(registry, light);
        drive
    }

    fn accumulate(&mut self, registry: &ModelRegistry, light: &[LocalIllumination]) {
        for (rate, ch) in self.photo_rates.iter_mut().zip(registry.photo_channels()) {
            *rate += light
                .iter()
                .map(|l| photo_rate(ch, l.intensity, l.wavelength))
                .sum::<f64>();
        }
        for (f, ch) in self.excitation.iter_mut().zip(registry.tunnel_channels()) {
            let total: f64 = light
                .iter()
                .filter(|l| ch.in_band(l.wavelength))
                .map(|l| l.intensity)
                .sum();
            *f = excitation_fraction(total, ch.saturation_intensity);
        }
    }

    pub fn is_dark(&self) -> bool {
        self.photo_rates.iter().all(|&r| r == 0.0) && self.excitation.iter().all(|&f| f == 0.0)
    }
}

/// Sub-cycling limits for the explicit kinetics update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KineticsLimits {
    /// Upper bound on dt · (largest per-unit outflow rate) per Euler substep.
    #[serde(default = "default_step_fraction")]
    pub max_step_fraction: f64,
    #[serde(default = "default_max_substeps")]
    pub max_substeps: usize,
}

fn default_step_fraction() -> f64 {
    0.1
}

fn default_max_substeps() -> usize {
    1_000_000
}

impl Default for KineticsLimits {
    fn default() -> Self {
        KineticsLimits {
            max_step_fraction: default_step_fraction(),
            max_substeps: default_max_substeps(),
        }
    }
}

/// Carrier bookkeeping produced by one kinetics update. Index 0 is electrons,
/// index 1 holes; values are densities (µm⁻³).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CellTally {
    pub emitted: [f64; 2],
    pub captured: [f64; 2],
    pub substeps: usize,
    pub clamped: usize,
}

impl CellTally {
    pub fn add(&mut self, other: &CellTally) {
        for k in 0..2 {
            self.emitted[k] += other.emitted[k];
            self.captured[k] += other.captured[k];
        }
        self.substeps += other.substeps;
        self.clamped += other.clamped;
    }
}

/// Reusable buffers for [`advance_cell`].
#[derive(Debug, Clone, Default)]
pub struct KineticsScratch {
    amounts: Vec<f64>,
    draw: Vec<f64>,
}

/// Densities of one cell plus its optical environment.
#[derive(Debug, Clone, PartialEq)]
pub struct CellKinetics {
    /// Per slot, µm⁻³.
    pub densities: Vec<f64>,
    pub electrons: f64,
    pub holes: f64,
    pub illumination: Vec<LocalIllumination>,
}

/// Advances one cell by `dt`, sub-cycling internally so that every Euler
/// substep satisfies the configured stability bound.
pub fn kinetics_substep(
    cell: &mut CellKinetics,
    dt: f64,
    registry: &ModelRegistry,
    limits: &KineticsLimits,
) -> Result<CellTally, EngineError> {
    let drive = CellDrive::from_illumination(registry, &cell.illumination);
    let mut carriers = [cell.electrons, cell.holes];
    let mut scratch = KineticsScratch::default();
    let tally = advance_cell(
        registry,
        &mut cell.densities,
        &mut carriers,
        &drive,
        dt,
        limits,
        &mut scratch,
    )?;
    cell.electrons = carriers[0];
    cell.holes = carriers[1];
    Ok(tally)
}

/// Per-unit outflow rate of the transfer (1/s per unit of its source density).
#[inline]
fn unit_rate(kind: &TransferKind, drive: &CellDrive, carriers: &[f64; 2], densities: &[f64]) -> f64 {
    match *kind {
        TransferKind::Photo { channel, .. } => drive.photo_rates[channel],
        TransferKind::Capture { captures, coefficient } => coefficient * carriers[captures.index()],
        TransferKind::Release { rate, .. } => rate,
        TransferKind::Tunnel {
            channel,
            trap_from,
            coefficient,
            ..
        } => coefficient * drive.excitation[channel] * densities[trap_from],
    }
}

/// Carrier pools drain linearly in their own density, so explicit Euler stays
/// positive for them up to a step fraction of 1; they get this much more room
/// than defect pools.
const CARRIER_STEP_RELAXATION: f64 = 5.0;

/// Largest per-unit outflow rate over all density pools, with carrier pools
/// discounted by [`CARRIER_STEP_RELAXATION`].
fn max_outflow_rate(
    registry: &ModelRegistry,
    densities: &[f64],
    carriers: &[f64; 2],
    drive: &CellDrive,
    per_pool: &mut [f64],
) -> f64 {
    per_pool.iter_mut().for_each(|v| *v = 0.0);
    let ns = densities.len();
    for t in registry.transfers() {
        per_pool[t.from] += unit_rate(&t.kind, drive, carriers, densities);
        match t.kind {
            TransferKind::Capture { captures, coefficient } => {
                per_pool[ns + captures.index()] += coefficient * densities[t.from]
            }
            TransferKind::Tunnel {
                channel,
                trap_from,
                coefficient,
                ..
            } => per_pool[trap_from] += coefficient * drive.excitation[channel] * densities[t.from],
            _ => {}
        }
    }
    let defects = per_pool[..ns].iter().copied().fold(0.0, f64::max);
    let carriers = per_pool[ns..].iter().copied().fold(0.0, f64::max);
    defects.max(carriers / CARRIER_STEP_RELAXATION)
}

/// Flux-form explicit-Euler update of one cell over `dt`.
///
/// Every transfer moves density from one slot to another, so species totals
/// are conserved up to rounding. Emitted carriers are added to `carriers`
/// and captured ones removed. Transfers that would overdraw a pool are
/// scaled down and counted in `clamped`.
pub fn advance_cell(
    registry: &ModelRegistry,
    densities: &mut [f64],
    carriers: &mut [f64; 2],
    drive: &CellDrive,
    dt: f64,
    limits: &KineticsLimits,
    scratch: &mut KineticsScratch,
) -> Result<CellTally, EngineError> {
    let transfers = registry.transfers();
    let ns = densities.len();
    scratch.amounts.resize(transfers.len(), 0.0);
    scratch.draw.resize(ns + 2, 0.0);

    let mut tally = CellTally::default();
    let mut remaining = dt;
    while remaining > 0.0 {
        let max_rate = max_outflow_rate(registry, densities, carriers, drive, &mut scratch.draw);
        if max_rate == 0.0 {
            break;
        }
        let mut h = remaining;
        if h * max_rate > limits.max_step_fraction {
            h = limits.max_step_fraction / max_rate;
            // avoid a vanishing final substep from rounding
            if remaining - h < 1e-9 * h {
                h = remaining;
            }
        }
        tally.substeps += 1;
        if tally.substeps > limits.max_substeps {
            return Err(EngineError::StabilityViolation {
                max_substeps: limits.max_substeps,
                max_rate,
            });
        }

        scratch.draw.iter_mut().for_each(|v| *v = 0.0);
        for (a, t) in scratch.amounts.iter_mut().zip(transfers) {
            let amount = unit_rate(&t.kind, drive, carriers, densities) * densities[t.from] * h;
            *a = amount;
            scratch.draw[t.from] += amount;
            match t.kind {
                TransferKind::Capture { captures, .. } => scratch.draw[ns + captures.index()] += amount,
                TransferKind::Tunnel { trap_from, .. } => scratch.draw[trap_from] += amount,
                _ => {}
            }
        }

        // scale[pool] < 1 where the pool would be overdrawn
        let mut any_clamp = false;
        for (pool, d) in scratch.draw.iter_mut().enumerate() {
            let avail = if pool < ns {
                densities[pool]
            } else {
                carriers[pool - ns]
            };
            if *d > avail {
                *d = if *d > 0.0 { avail / *d } else { 1.0 };
                any_clamp = true;
            } else {
                *d = 1.0;
            }
        }
        if any_clamp {
            tally.clamped += 1;
        }

        for (a, t) in scratch.amounts.iter().zip(transfers) {
            let mut amount = *a;
            if amount == 0.0 {
                continue;
            }
            if any_clamp {
                let mut s = scratch.draw[t.from];
                match t.kind {
                    TransferKind::Capture { captures, .. } => s = s.min(scratch.draw[ns + captures.index()]),
                    TransferKind::Tunnel { trap_from, .. } => s = s.min(scratch.draw[trap_from]),
                    _ => {}
                }
                amount *= s;
            }
            densities[t.from] -= amount;
            densities[t.to] += amount;
            match t.kind {
                TransferKind::Photo { emits, .. } => {
                    carriers[emits.index()] += amount;
                    tally.emitted[emits.index()] += amount;
                }
                TransferKind::Release { releases, .. } => {
                    carriers[releases.index()] += amount;
                    tally.emitted[releases.index()] += amount;
                }
                TransferKind::Capture { captures, .. } => {
                    carriers[captures.index()] -= amount;
                    tally.captured[captures.index()] += amount;
                }
                TransferKind::Tunnel { trap_from, trap_to, .. } => {
                    densities[trap_from] -= amount;
                    densities[trap_to] += amount;
                }
            }
        }
        if any_clamp {
            // clamped pools can land a few ulps below zero
            densities.iter_mut().for_each(|v| *v = v.max(0.0));
            carriers.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        remaining -= h;
    }
    Ok(tally)
}

/// Net charge (e/µm³) of a cell: Σ q·n over defect slots plus holes minus electrons.
pub fn cell_charge(registry: &ModelRegistry, densities: &[f64], carriers: &[f64; 2]) -> f64 {
    registry
        .slots()
        .iter()
        .zip(densities)
        .map(|(s, n)| s.charge as f64 * n)
        .sum::<f64>()
        + carriers[Carrier::Hole.index()]
        - carriers[Carrier::Electron.index()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::*;
    use std::collections::BTreeMap;

    fn st(label: &str, charge: i32) -> ChargeStateSpec {
        ChargeStateSpec {
            label: label.into(),
            charge,
            brightness: BTreeMap::new(),
        }
    }

    fn photo(from: &str, to: &str, emits: Carrier, thr: f64, table: Vec<[f64; 2]>) -> PhotoTransitionSpec {
        PhotoTransitionSpec {
            from: from.into(),
            to: to.into(),
            emits,
            threshold_ev: thr,
            cross_section: CrossSectionTable(table),
            two_photon: false,
            reference_intensity: 1.0,
        }
    }

    fn nv_model() -> ModelRegistry {
        let nv = SpeciesSpec {
            name: "NV".into(),
            concentration_ppb: 0.03,
            states: vec![st("NV-", -1), st("NV0", 0)],
            photo: vec![
                photo("NV-", "NV0", Carrier::Electron, 1.9, vec![[400.0, 2e-21]]),
                photo("NV0", "NV-", Carrier::Hole, 2.156, vec![[400.0, 1e-21]]),
            ],
            capture: vec![],
            trap: None,
            initial: BTreeMap::new(),
        };
        ModelRegistry::validate(&ModelSpec {
            carriers: CarrierSpec::default(),
            species: vec![nv],
        })
        .unwrap()
    }

    #[test]
    fn intensity_examples() {
        assert_eq!(beam_intensity(&Beam::new(532.0, 0.0, 0.5), 0.0, 0.0), 0.0);
        let b = Beam::new(532.0, 1.0, 0.5);
        assert!((beam_intensity(&b, 0.0, 0.0) - 2.0 / (PI * 0.25)).abs() < 1e-12);
        assert!((b.peak_intensity() - 2.546479).abs() < 1e-6);
    }

    #[test]
    fn intensity_integrates_to_power() {
        // midpoint quadrature over ±6w
        let b = Beam::new(532.0, 1.3, 0.4).at(0.2, -0.1);
        let n = 600;
        let h = 12.0 * b.waist / n as f64;
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = b.center[0] - 6.0 * b.waist + (i as f64 + 0.5) * h;
                let y = b.center[1] - 6.0 * b.waist + (j as f64 + 0.5) * h;
                sum += beam_intensity(&b, x, y) * h * h;
            }
        }
        assert!((sum / b.power - 1.0).abs() < 1e-6, "{sum}");
    }

    #[test]
    fn photo_rate_gate_and_linearity() {
        let reg = nv_model();
        let hole_emit = &reg.photo_channels()[1];
        assert_eq!(photo_rate(hole_emit, 1.0, 595.0), 0.0);
        assert_eq!(photo_rate(hole_emit, 1.0, 637.0), 0.0);
        assert!(photo_rate(hole_emit, 1.0, 561.0) > 0.0);
        assert!(photo_rate(hole_emit, 1.0, 532.0) > 0.0);
        let r1 = photo_rate(hole_emit, 0.7, 532.0);
        let r2 = photo_rate(hole_emit, 1.4, 532.0);
        assert_eq!(r2 / r1, 2.0);
        let mut two = hole_emit.clone();
        two.two_photon = true;
        let q1 = photo_rate(&two, 0.7, 532.0);
        let q2 = photo_rate(&two, 1.4, 532.0);
        assert!((q2 / q1 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn capture_rate_definition() {
        let ch = CaptureChannel {
            from: 0,
            to: 1,
            captures: Carrier::Hole,
            coefficient: 10.0,
        };
        assert_eq!(capture_rate(&ch, 0.0), 0.0);
        assert_eq!(capture_rate(&ch, 5.0), 50.0);
    }

    #[test]
    fn dark_cell_without_carriers_is_unchanged() {
        let reg = nv_model();
        let mut cell = CellKinetics {
            densities: vec![3.0, 2.29],
            electrons: 0.0,
            holes: 0.0,
            illumination: vec![],
        };
        let before = cell.clone();
        let t = kinetics_substep(&mut cell, 1800.0, &reg, &KineticsLimits::default()).unwrap();
        assert_eq!(cell, before);
        assert_eq!(t.substeps, 0);
    }

    #[test]
    fn single_transition_matches_exponential() {
        let reg = nv_model();
        let light = [LocalIllumination {
            wavelength: 637.0,
            intensity: 1.0,
        }];
        let k = photo_rate(&reg.photo_channels()[0], 1.0, 637.0);
        let mut cell = CellKinetics {
            densities: vec![1.0, 0.0],
            electrons: 0.0,
            holes: 0.0,
            illumination: light.to_vec(),
        };
        let dt = 1e-3 / k;
        kinetics_substep(&mut cell, dt, &reg, &KineticsLimits::default()).unwrap();
        let exact = (-k * dt).exp();
        // one Euler step: error is O((k dt)^2)
        assert!((cell.densities[0] - exact).abs() < 1e-6);
        assert_eq!(cell.electrons, cell.densities[1]);
    }

    #[test]
    fn substep_overdraw_is_clamped() {
        let reg = nv_model();
        let mut densities = vec![1.0, 0.0];
        let mut carriers = [0.0, 0.0];
        let drive = CellDrive {
            photo_rates: vec![50.0, 0.0],
            excitation: vec![],
        };
        let limits = KineticsLimits {
            max_step_fraction: 5.0,
            max_substeps: 10,
        };
        let t = advance_cell(
            &reg,
            &mut densities,
            &mut carriers,
            &drive,
            0.1,
            &limits,
            &mut KineticsScratch::default(),
        )
        .unwrap();
        assert!(t.clamped > 0);
        assert!(densities.iter().all(|&v| v >= 0.0));
        assert!((densities[0] + densities[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn substep_limit_raises_stability_violation() {
        let reg = nv_model();
        let mut densities = vec![1.0, 0.0];
        let mut carriers = [0.0, 0.0];
        let drive = CellDrive {
            photo_rates: vec![1e6, 1e6],
            excitation: vec![],
        };
        let limits = KineticsLimits {
            max_step_fraction: 0.1,
            max_substeps: 100,
        };
        let err = advance_cell(
            &reg,
            &mut densities,
            &mut carriers,
            &drive,
            1.0,
            &limits,
            &mut KineticsScratch::default(),
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::StabilityViolation { .. }));
    }
}
