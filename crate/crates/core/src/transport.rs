//! Carrier transport: explicit diffusion, optional space-charge drift and the
//! operator-split macro step that couples them to the cell kinetics.

use serde::{Deserialize, Serialize};

use crate::error::EngineError;
use crate::model::{GridSpec, ModelRegistry, TransferKind};
use crate::photophysics::{advance_cell, Beam, CellDrive, KineticsLimits, KineticsScratch, LocalIllumination};
use crate::state::SimulationState;
use crate::units::poisson_constant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Carriers crossing the grid edge are lost.
    #[default]
    Absorbing,
    /// Zero-flux walls.
    Reflecting,
}

/// Opt-in electrostatics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceChargeSettings {
    #[serde(default)]
    pub enabled: bool,
    /// Dimensionless factor on e/(ε₀ε_r); a thin slab screens far less than
    /// the bulk value implies, so presets set this well below 1.
    #[serde(default = "one")]
    pub coupling: f64,
    /// Max residual relative to the source scale.
    #[serde(default = "default_poisson_tol")]
    pub tolerance: f64,
    #[serde(default = "default_poisson_iters")]
    pub max_iterations: usize,
}

fn one() -> f64 {
    1.0
}

fn default_poisson_tol() -> f64 {
    1e-8
}

fn default_poisson_iters() -> usize {
    50_000
}

impl Default for SpaceChargeSettings {
    fn default() -> Self {
        SpaceChargeSettings {
            enabled: false,
            coupling: 1.0,
            tolerance: default_poisson_tol(),
            max_iterations: default_poisson_iters(),
        }
    }
}

/// Numerical settings of the engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSettings {
    #[serde(default)]
    pub boundary: Boundary,
    /// Upper bound on the carrier sub-step, s. The diffusion CFL limit
    /// dx²/(4D) applies on top of this.
    #[serde(default = "default_carrier_dt")]
    pub max_carrier_dt: f64,
    /// Carrier density (µm⁻³) below which a dark cell skips kinetics and
    /// below which a dark grid counts as quiescent.
    #[serde(default = "default_floor")]
    pub quiescence_floor: f64,
    /// Cells where every beam is below this fraction of its peak are dark.
    #[serde(default = "default_cutoff")]
    pub beam_cutoff: f64,
    #[serde(default)]
    pub kinetics: KineticsLimits,
    #[serde(default)]
    pub space_charge: SpaceChargeSettings,
}

fn default_carrier_dt() -> f64 {
    0.05
}

fn default_floor() -> f64 {
    1e-12
}

fn default_cutoff() -> f64 {
    1e-14
}

impl Default for EngineSettings {
    fn default() -> Self {
        EngineSettings {
            boundary: Boundary::Absorbing,
            max_carrier_dt: default_carrier_dt(),
            quiescence_floor: default_floor(),
            beam_cutoff: default_cutoff(),
            kinetics: KineticsLimits::default(),
            space_charge: SpaceChargeSettings::default(),
        }
    }
}

impl EngineSettings {
    pub fn validate(&self) -> Result<(), EngineError> {
        let ok = self.max_carrier_dt > 0.0
            && self.quiescence_floor >= 0.0
            && (0.0..1.0).contains(&self.beam_cutoff)
            && self.kinetics.max_step_fraction > 0.0
            && self.kinetics.max_substeps > 0
            && self.space_charge.coupling >= 0.0
            && self.space_charge.tolerance > 0.0;
        if ok {
            Ok(())
        } else {
            Err(EngineError::InvalidStep(format!("invalid engine settings {self:?}")))
        }
    }
}

/// Scratch buffer for stencil updates.
#[derive(Debug, Clone, Default)]
pub struct TransportScratch {
    buf: Vec<f64>,
}

/// Explicit 5-point diffusion over `dt`, sub-stepped to dt ≤ dx²/(8D).
/// Returns the amount absorbed at the boundary (Σ density · dx²).
///
/// The stability limit is dx²/(4D), but there the centre weight of the
/// stencil vanishes and a one-cell source splits into two decoupled
/// checkerboard sublattices; half the limit keeps the centre weight ≥ 1/2.
pub fn diffuse(
    field: &mut [f64],
    grid: &GridSpec,
    diffusion: f64,
    dt: f64,
    boundary: Boundary,
    scratch: &mut TransportScratch,
) -> f64 {
    if diffusion <= 0.0 || dt <= 0.0 {
        return 0.0;
    }
    let limit = grid.dx * grid.dx / (8.0 * diffusion);
    let n = (dt / limit * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let r = diffusion * (dt / n as f64) / (grid.dx * grid.dx);
    let mut absorbed = 0.0;
    for _ in 0..n {
        absorbed += diffusion_step(field, grid, r, boundary, scratch);
    }
    absorbed * grid.dx * grid.dx
}

fn diffusion_step(
    field: &mut [f64],
    grid: &GridSpec,
    r: f64,
    boundary: Boundary,
    scratch: &mut TransportScratch,
) -> f64 {
    let (nx, ny) = (grid.nx, grid.ny);
    scratch.buf.clear();
    scratch.buf.extend_from_slice(field);
    let u = &scratch.buf;
    let absorbing = boundary == Boundary::Absorbing;
    let mut lost = 0.0;
    for iy in 0..ny {
        let row = iy * nx;
        for ix in 0..nx {
            let i = row + ix;
            let c = u[i];
            let mut lap = 0.0;
            let mut open = 0u32;
            if ix > 0 {
                lap += u[i - 1] - c
            } else {
                open += 1
            }
            if ix + 1 < nx {
                lap += u[i + 1] - c
            } else {
                open += 1
            }
            if iy > 0 {
                lap += u[i - nx] - c
            } else {
                open += 1
            }
            if iy + 1 < ny {
                lap += u[i + nx] - c
            } else {
                open += 1
            }
            if absorbing && open > 0 {
                let out = r * c * open as f64;
                lap -= c * open as f64;
                lost += out;
            }
            field[i] = c + r * lap;
        }
    }
    lost
}

/// Red-black SOR solve of ∇²φ = −K·ρ with φ = 0 outside the grid, where K is
/// `poisson_constant(relative_permittivity) · coupling`. `potential` is used as
/// the initial guess. Converged when the max residual is below `tolerance`
/// times K·max|ρ|. Returns the iteration count.
pub fn poisson_solve(
    charge: &[f64],
    grid: &GridSpec,
    relative_permittivity: f64,
    coupling: f64,
    tolerance: f64,
    max_iterations: usize,
    potential: &mut Vec<f64>,
) -> Result<usize, EngineError> {
    let (nx, ny) = (grid.nx, grid.ny);
    potential.resize(nx * ny, 0.0);
    let k = poisson_constant(relative_permittivity) * coupling;
    let scale = k * charge.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        potential.iter_mut().for_each(|v| *v = 0.0);
        return Ok(0);
    }
    let h2 = grid.dx * grid.dx;
    let source: Vec<f64> = charge.iter().map(|q| k * q * h2).collect();
    let rho_j = 0.5 * ((std::f64::consts::PI / nx as f64).cos() + (std::f64::consts::PI / ny as f64).cos());
    let omega = 2.0 / (1.0 + (1.0 - rho_j * rho_j).sqrt());
    let phi = potential;
    let at = |phi: &[f64], ix: usize, iy: usize| -> f64 {
        let i = iy * nx + ix;
        let mut s = 0.0;
        if ix > 0 {
            s += phi[i - 1]
        }
        if ix + 1 < nx {
            s += phi[i + 1]
        }
        if iy > 0 {
            s += phi[i - nx]
        }
        if iy + 1 < ny {
            s += phi[i + nx]
        }
        s
    };
    let residual = |phi: &[f64]| -> f64 {
        let mut worst: f64 = 0.0;
        for iy in 0..ny {
            for ix in 0..nx {
                let i = iy * nx + ix;
                let res = (at(phi, ix, iy) - 4.0 * phi[i] + source[i]) / h2;
                worst = worst.max(res.abs());
            }
        }
        worst
    };
    if residual(phi) < tolerance * scale {
        return Ok(0);
    }
    let mut last = f64::INFINITY;
    for it in 1..=max_iterations {
        for color in 0..2 {
            for iy in 0..ny {
                let start = (iy + color) % 2;
                for ix in (start..nx).step_by(2) {
                    let i = iy * nx + ix;
                    let gs = 0.25 * (at(phi, ix, iy) + source[i]);
                    phi[i] += omega * (gs - phi[i]);
                }
            }
        }
        if it % 10 == 0 || it == max_iterations {
            last = residual(phi);
            if last < tolerance * scale {
                return Ok(it);
            }
        }
    }
    Err(EngineError::NonConvergence {
        iterations: max_iterations,
        residual: last / scale,
    })
}

/// First-order upwind drift of a carrier with charge sign `sign` (+1 holes,
/// −1 electrons) along −sign·∇φ. Returns the amount absorbed at the boundary.
#[allow(clippy::too_many_arguments)]
pub fn drift(
    field: &mut [f64],
    potential: &[f64],
    grid: &GridSpec,
    mobility: f64,
    sign: f64,
    dt: f64,
    boundary: Boundary,
    scratch: &mut TransportScratch,
) -> f64 {
    if mobility <= 0.0 || dt <= 0.0 {
        return 0.0;
    }
    let (nx, ny) = (grid.nx, grid.ny);
    let dx = grid.dx;
    let phi_at = |ix: isize, iy: isize| -> f64 {
        if ix < 0 || iy < 0 || ix >= nx as isize || iy >= ny as isize {
            0.0
        } else {
            potential[iy as usize * nx + ix as usize]
        }
    };
    // face velocity from cell (ix,iy) toward its neighbour
    let velocity = |ix: usize, iy: usize, dxn: isize, dyn_: isize| -> f64 {
        let a = phi_at(ix as isize, iy as isize);
        let b = phi_at(ix as isize + dxn, iy as isize + dyn_);
        -sign * mobility * (b - a) / dx
    };
    let mut vmax: f64 = 0.0;
    for iy in 0..ny {
        for ix in 0..nx {
            vmax = vmax.max(velocity(ix, iy, 1, 0).abs()).max(velocity(ix, iy, 0, 1).abs());
            if ix == 0 {
                vmax = vmax.max(velocity(ix, iy, -1, 0).abs());
            }
            if iy == 0 {
                vmax = vmax.max(velocity(ix, iy, 0, -1).abs());
            }
        }
    }
    if vmax == 0.0 {
        return 0.0;
    }
    let limit = 0.25 * dx / vmax;
    let n = (dt / limit * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let c = (dt / n as f64) / dx;
    let mut lost = 0.0;
    for _ in 0..n {
        scratch.buf.clear();
        scratch.buf.extend_from_slice(field);
        let u = &scratch.buf;
        for iy in 0..ny {
            for ix in 0..nx {
                let i = iy * nx + ix;
                for (dxn, dyn_) in [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)] {
                    let jx = ix as isize + dxn;
                    let jy = iy as isize + dyn_;
                    let inside = jx >= 0 && jy >= 0 && jx < nx as isize && jy < ny as isize;
                    let v = velocity(ix, iy, dxn, dyn_);
                    if inside {
                        // each interior face handled once from its lower cell
                        if dxn < 0 || dyn_ < 0 {
                            continue;
                        }
                        let j = jy as usize * nx + jx as usize;
                        let flux = if v > 0.0 { v * u[i] } else { v * u[j] } * c;
                        field[i] -= flux;
                        field[j] += flux;
                    } else if boundary == Boundary::Absorbing && v > 0.0 {
                        let flux = v * u[i] * c;
                        field[i] -= flux;
                        lost += flux;
                    }
                }
            }
        }
    }
    lost * dx * dx
}

/// Per-cell optical drive for a set of simultaneous beams. `None` marks a
/// cell without illumination.
#[derive(Debug, Clone)]
pub struct DriveMap {
    index: Vec<u32>,
    drives: Vec<CellDrive>,
}

const NO_DRIVE: u32 = u32::MAX;

/// Gaussian averaged over the cell [x − dx/2, x + dx/2] along one axis,
/// normalized so the peak value is 1.
fn axis_average(x: f64, center: f64, waist: f64, dx: f64) -> f64 {
    let s = std::f64::consts::SQRT_2 / waist;
    let hi = libm::erf(s * (x + 0.5 * dx - center));
    let lo = libm::erf(s * (x - 0.5 * dx - center));
    (hi - lo) * waist * (std::f64::consts::PI / 8.0).sqrt() / dx
}

impl DriveMap {
    /// Cell-averaged beam intensities converted to drives. Cells where every
    /// beam is below `cutoff` of its peak get no drive.
    pub fn build(registry: &ModelRegistry, grid: &GridSpec, beams: &[Beam], cutoff: f64) -> Self {
        let mut index = vec![NO_DRIVE; grid.cells()];
        let mut drives = Vec::new();
        let mut light = Vec::with_capacity(beams.len());
        let profiles: Vec<(Vec<f64>, Vec<f64>)> = beams
            .iter()
            .map(|b| {
                let px = (0..grid.nx)
                    .map(|ix| axis_average(grid.x(ix), b.center[0], b.waist, grid.dx))
                    .collect();
                let py = (0..grid.ny)
                    .map(|iy| axis_average(grid.y(iy), b.center[1], b.waist, grid.dx))
                    .collect();
                (px, py)
            })
            .collect();
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                light.clear();
                for (b, (px, py)) in beams.iter().zip(&profiles) {
                    let rel = px[ix] * py[iy];
                    if b.power > 0.0 && rel >= cutoff {
                        light.push(LocalIllumination {
                            wavelength: b.wavelength,
                            intensity: b.peak_intensity() * rel,
                        });
                    }
                }
                if !light.is_empty() {
                    index[iy * grid.nx + ix] = drives.len() as u32;
                    drives.push(CellDrive::from_illumination(registry, &light));
                }
            }
        }
        DriveMap { index, drives }
    }

    pub fn dark(grid: &GridSpec) -> Self {
        DriveMap {
            index: vec![NO_DRIVE; grid.cells()],
            drives: Vec::new(),
        }
    }

    pub fn get(&self, cell: usize) -> Option<&CellDrive> {
        match self.index[cell] {
            NO_DRIVE => None,
            k => Some(&self.drives[k as usize]),
        }
    }

    pub fn is_dark(&self) -> bool {
        self.drives.is_empty()
    }

    pub fn lit_cells(&self) -> usize {
        self.drives.len()
    }
}

/// Cell-averaged intensity (mW/µm²) of `beams` at every cell, row-major.
pub fn intensity_map(grid: &GridSpec, beams: &[Beam]) -> Vec<f64> {
    let mut out = vec![0.0; grid.cells()];
    for b in beams {
        let px: Vec<f64> = (0..grid.nx)
            .map(|ix| axis_average(grid.x(ix), b.center[0], b.waist, grid.dx))
            .collect();
        let py: Vec<f64> = (0..grid.ny)
            .map(|iy| axis_average(grid.y(iy), b.center[1], b.waist, grid.dx))
            .collect();
        let peak = b.peak_intensity();
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                out[iy * grid.nx + ix] += peak * px[ix] * py[iy];
            }
        }
    }
    out
}

/// Summary of one macro step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MacroReport {
    pub carrier_steps: usize,
    /// Set when the grid went quiescent and the remaining time was skipped.
    pub quiescent: bool,
}

/// Reusable buffers for [`carrier_macrostep`].
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    kinetics: KineticsScratch,
    transport: TransportScratch,
    dark: Option<CellDrive>,
}

fn release_slots(registry: &ModelRegistry) -> Vec<usize> {
    registry
        .transfers()
        .iter()
        .filter(|t| matches!(t.kind, TransferKind::Release { .. }))
        .map(|t| t.from)
        .collect()
}

/// Advances the state by `dt_macro` with fixed illumination `beams`.
pub fn carrier_macrostep(
    state: &mut SimulationState,
    registry: &ModelRegistry,
    beams: &[Beam],
    dt_macro: f64,
    settings: &EngineSettings,
) -> Result<MacroReport, EngineError> {
    let drive = DriveMap::build(registry, &state.grid, beams, settings.beam_cutoff);
    carrier_macrostep_with(state, registry, &drive, dt_macro, settings, &mut Workspace::default())
}

/// [`carrier_macrostep`] with a precomputed drive map and reusable buffers.
pub fn carrier_macrostep_with(
    state: &mut SimulationState,
    registry: &ModelRegistry,
    drive: &DriveMap,
    dt_macro: f64,
    settings: &EngineSettings,
    ws: &mut Workspace,
) -> Result<MacroReport, EngineError> {
    if !(dt_macro >= 0.0) || !dt_macro.is_finite() {
        return Err(EngineError::InvalidStep(format!("macro step duration {dt_macro}")));
    }
    let mut report = MacroReport::default();
    if dt_macro == 0.0 {
        return Ok(report);
    }
    let grid = state.grid;
    let carriers = registry.carriers().clone();
    let d_max = carriers.electron_diffusion.max(carriers.hole_diffusion);
    let mut dt_c = settings.max_carrier_dt;
    if d_max > 0.0 {
        dt_c = dt_c.min(grid.dx * grid.dx / (4.0 * d_max));
    }
    let n = (dt_macro / dt_c * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let h = dt_macro / n as f64;
    let releases = release_slots(registry);
    let ns = state.slot_count();
    let area = grid.dx * grid.dx;
    let floor = settings.quiescence_floor;
    let dark = ws.dark.get_or_insert_with(|| CellDrive::dark(registry)).clone();
    let sc = settings.space_charge;

    for _ in 0..n {
        if drive.is_dark() && quiescent(state, &releases, floor) {
            report.quiescent = true;
            break;
        }
        report.carrier_steps += 1;
        state.diagnostics.carrier_steps += 1;

        for c in 0..grid.cells() {
            let cell_drive = drive.get(c);
            let (e, hdens) = (state.electrons[c], state.holes[c]);
            if cell_drive.is_none() && e <= floor && hdens <= floor {
                let cell = &state.defects[c * ns..(c + 1) * ns];
                if releases.iter().all(|&s| cell[s] == 0.0) {
                    continue;
                }
            }
            let mut pair = [e, hdens];
            let tally = advance_cell(
                registry,
                &mut state.defects[c * ns..(c + 1) * ns],
                &mut pair,
                cell_drive.unwrap_or(&dark),
                h,
                &settings.kinetics,
                &mut ws.kinetics,
            )?;
            state.electrons[c] = pair[0];
            state.holes[c] = pair[1];
            for k in 0..2 {
                state.ledger.created[k] += tally.emitted[k] * area;
                state.ledger.captured[k] += tally.captured[k] * area;
            }
            state.diagnostics.kinetics_substeps += tally.substeps as u64;
            state.diagnostics.clamped_substeps += tally.clamped as u64;
        }

        state.ledger.absorbed[0] += diffuse(
            &mut state.electrons,
            &grid,
            carriers.electron_diffusion,
            h,
            settings.boundary,
            &mut ws.transport,
        );
        state.ledger.absorbed[1] += diffuse(
            &mut state.holes,
            &grid,
            carriers.hole_diffusion,
            h,
            settings.boundary,
            &mut ws.transport,
        );

        if sc.enabled {
            let rho = state.charge_density(registry);
            let phi = state.potential.get_or_insert_with(Vec::new);
            let iters = poisson_solve(
                &rho,
                &grid,
                carriers.relative_permittivity,
                sc.coupling,
                sc.tolerance,
                sc.max_iterations,
                phi,
            )?;
            state.diagnostics.poisson_iterations += iters as u64;
            let phi = state.potential.as_deref().unwrap_or(&[]);
            state.ledger.absorbed[0] += drift(
                &mut state.electrons,
                phi,
                &grid,
                carriers.electron_mobility,
                -1.0,
                h,
                settings.boundary,
                &mut ws.transport,
            );
            state.ledger.absorbed[1] += drift(
                &mut state.holes,
                phi,
                &grid,
                carriers.hole_mobility,
                1.0,
                h,
                settings.boundary,
                &mut ws.transport,
            );
        }
    }
    state.time += dt_macro;
    Ok(report)
}

fn quiescent(state: &SimulationState, releases: &[usize], floor: f64) -> bool {
    if state.max_carrier_density() > floor {
        return false;
    }
    let ns = state.slot_count();
    releases.is_empty()
        || state
            .defects
            .chunks_exact(ns)
            .all(|cell| releases.iter().all(|&s| cell[s] == 0.0))
}
