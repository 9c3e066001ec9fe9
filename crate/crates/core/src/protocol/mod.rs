//! Timed measurement protocols: fixed illumination, raster scans, dark waits,
//! readout imaging and snapshots.

pub mod io;

use serde::{Deserialize, Serialize};

use crate::error::EngineError;
use crate::model::ModelRegistry;
use crate::photophysics::Beam;
use crate::state::SimulationState;
use crate::transport::{carrier_macrostep_with, DriveMap, EngineSettings, Workspace};

/// Axis-aligned rectangle in µm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn centered(half_width: f64) -> Self {
        Rect {
            x0: -half_width,
            y0: -half_width,
            x1: half_width,
            y1: half_width,
        }
    }

    fn is_valid(&self) -> bool {
        self.x1 >= self.x0 && self.y1 >= self.y0 && [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite())
    }

    fn inside(&self, half: (f64, f64)) -> bool {
        self.x0 >= -half.0 && self.x1 <= half.0 && self.y0 >= -half.1 && self.y1 <= half.1
    }

    /// Raster points, row by row from (x0, y0), spaced by `step`.
    pub fn points(&self, step: f64) -> Vec<(f64, f64)> {
        let nx = ((self.x1 - self.x0) / step + 1e-9).floor() as usize + 1;
        let ny = ((self.y1 - self.y0) / step + 1e-9).floor() as usize + 1;
        let mut out = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                out.push((self.x0 + i as f64 * step, self.y0 + j as f64 * step));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReadoutMode {
    /// Side-effect free expectation image.
    #[default]
    Ideal,
    /// The readout beam dwells on every pixel and drives the kinetics.
    Perturbative,
}

fn default_readout_step() -> f64 {
    0.2
}

fn default_readout_dwell() -> f64 {
    1e-3
}

fn default_passes() -> usize {
    1
}

/// One protocol step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleStep {
    Fixed {
        beam: Beam,
        duration: f64,
    },
    Raster {
        region: Rect,
        step: f64,
        dwell: f64,
        #[serde(default = "default_passes")]
        passes: usize,
        beam: Beam,
    },
    Dark {
        duration: f64,
    },
    Readout {
        beam: Beam,
        channel: String,
        #[serde(default)]
        mode: ReadoutMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
        /// Imaged region; defaults to the whole grid. Perturbative readouts
        /// raster this region with `step` and `dwell`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        region: Option<Rect>,
        #[serde(default = "default_readout_step")]
        step: f64,
        #[serde(default = "default_readout_dwell")]
        dwell: f64,
    },
    Snapshot {
        label: String,
    },
}

impl ScheduleStep {
    /// Protocol time consumed by the step, s.
    pub fn duration(&self) -> f64 {
        match self {
            ScheduleStep::Fixed { duration, .. } | ScheduleStep::Dark { duration } => *duration,
            ScheduleStep::Raster {
                region,
                step,
                dwell,
                passes,
                ..
            } => region.points(*step).len() as f64 * dwell * *passes as f64,
            ScheduleStep::Readout {
                mode: ReadoutMode::Perturbative,
                region,
                step,
                dwell,
                ..
            } => region.map_or(0.0, |r| r.points(*step).len() as f64 * dwell),
            _ => 0.0,
        }
    }

    fn validate(&self, index: usize, state: &SimulationState) -> Result<(), EngineError> {
        let bad = |message: String| EngineError::StepOutOfBounds { index, message };
        let half = state.grid.half_extent();
        match self {
            ScheduleStep::Fixed { beam, duration } => {
                beam.validate()?;
                if !(*duration >= 0.0) {
                    return Err(bad(format!("negative duration {duration}")));
                }
            }
            ScheduleStep::Dark { duration } => {
                if !(*duration >= 0.0) {
                    return Err(bad(format!("negative duration {duration}")));
                }
            }
            ScheduleStep::Raster {
                region,
                step,
                dwell,
                beam,
                ..
            } => {
                beam.validate()?;
                if !(*step > 0.0) || !(*dwell >= 0.0) || !region.is_valid() {
                    return Err(bad("raster needs step > 0, dwell >= 0 and a valid region".into()));
                }
                if !region.inside(half) {
                    return Err(bad(format!("raster region {region:?} exceeds the grid")));
                }
            }
            ScheduleStep::Readout {
                beam,
                mode,
                region,
                step,
                dwell,
                ..
            } => {
                beam.validate()?;
                if let Some(r) = region {
                    if !r.is_valid() || !r.inside(half) {
                        return Err(bad(format!("readout region {r:?} exceeds the grid")));
                    }
                }
                if *mode == ReadoutMode::Perturbative {
                    if region.is_none() {
                        return Err(bad("perturbative readout needs a region".into()));
                    }
                    if !(*step > 0.0) || !(*dwell >= 0.0) {
                        return Err(bad("readout needs step > 0 and dwell >= 0".into()));
                    }
                }
            }
            ScheduleStep::Snapshot { .. } => {}
        }
        Ok(())
    }
}

/// Simulated count-rate map of one detection channel, kcps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutImage {
    pub channel: String,
    pub label: String,
    pub nx: usize,
    pub ny: usize,
    /// Pixel pitch, µm.
    pub pitch: f64,
    /// Centre of pixel (0, 0), µm.
    pub origin: [f64; 2],
    /// Row-major, kcps.
    pub pixels: Vec<f64>,
    pub beam: Beam,
    pub mode: ReadoutMode,
    /// Protocol time at the start of the readout, s.
    pub timestamp: f64,
}

impl ReadoutImage {
    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.pixels[iy * self.nx + ix]
    }

    pub fn pixel_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.origin[0] + ix as f64 * self.pitch,
            self.origin[1] + iy as f64 * self.pitch,
        )
    }

    /// Value of the pixel nearest to (x, y).
    pub fn value_near(&self, x: f64, y: f64) -> f64 {
        let ix = ((x - self.origin[0]) / self.pitch)
            .round()
            .clamp(0.0, (self.nx - 1) as f64) as usize;
        let iy = ((y - self.origin[1]) / self.pitch)
            .round()
            .clamp(0.0, (self.ny - 1) as f64) as usize;
        self.at(ix, iy)
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Mean over pixels whose centres fall inside `region`.
    pub fn mean_in(&self, region: &Rect) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let (x, y) = self.pixel_center(ix, iy);
                if x >= region.x0 && x <= region.x1 && y >= region.y0 && y <= region.y1 {
                    sum += self.at(ix, iy);
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Full state dump at a point of the protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub label: String,
    pub timestamp: f64,
    pub nx: usize,
    pub ny: usize,
    /// (name, row-major plane): every defect slot, then electrons and holes.
    pub planes: Vec<(String, Vec<f64>)>,
}

impl Snapshot {
    pub fn capture(label: &str, state: &SimulationState, registry: &ModelRegistry) -> Self {
        let mut planes: Vec<(String, Vec<f64>)> = (0..state.slot_count())
            .map(|s| (registry.slot_name(s), state.slot_plane(s)))
            .collect();
        planes.push(("electrons".into(), state.electrons.clone()));
        planes.push(("holes".into(), state.holes.clone()));
        Snapshot {
            label: label.to_string(),
            timestamp: state.time,
            nx: state.grid.nx,
            ny: state.grid.ny,
            planes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolOutput {
    Snapshot(Snapshot),
    Image(ReadoutImage),
}

fn channel_of(registry: &ModelRegistry, channel: &str) -> Result<usize, EngineError> {
    let k = registry
        .channel_index(channel)
        .ok_or_else(|| EngineError::UnknownChannel(channel.to_string()))?;
    if registry.slots().iter().all(|s| s.brightness[k] == 0.0) {
        return Err(EngineError::UnknownChannel(channel.to_string()));
    }
    Ok(k)
}

/// Cell index range covered by `region` (whole grid when `None`).
fn cell_window(state: &SimulationState, region: Option<&Rect>) -> (usize, usize, usize, usize) {
    let g = &state.grid;
    match region {
        None => (0, g.nx, 0, g.ny),
        Some(r) => {
            let lo = |v: f64, n: usize| ((v / g.dx + n as f64 * 0.5 - 0.5).ceil().max(0.0) as usize).min(n);
            let hi = |v: f64, n: usize| {
                ((v / g.dx + n as f64 * 0.5 - 0.5).floor() as isize + 1).clamp(0, n as isize) as usize
            };
            (lo(r.x0, g.nx), hi(r.x1, g.nx), lo(r.y0, g.ny), hi(r.y1, g.ny))
        }
    }
}

/// Ideal-mode count at one cell: Σ brightness · density · peak readout intensity.
fn cell_counts(state: &SimulationState, registry: &ModelRegistry, channel: usize, cell: usize, intensity: f64) -> f64 {
    registry
        .slots()
        .iter()
        .zip(state.cell(cell))
        .map(|(s, n)| s.brightness[channel] * n)
        .sum::<f64>()
        * intensity
}

/// Readout image of `channel`. Ideal mode leaves the state untouched and
/// images every cell inside `region` (the whole grid by default) with the
/// beam's peak intensity. Perturbative mode rasters `region` with `step`,
/// recording each pixel at the start of its dwell and then driving the
/// kinetics with the beam for `dwell`.
#[allow(clippy::too_many_arguments)]
pub fn readout_image(
    state: &mut SimulationState,
    registry: &ModelRegistry,
    beam: &Beam,
    channel: &str,
    mode: ReadoutMode,
    region: Option<&Rect>,
    step: f64,
    dwell: f64,
    settings: &EngineSettings,
) -> Result<ReadoutImage, EngineError> {
    let k = channel_of(registry, channel)?;
    let intensity = beam.peak_intensity();
    let timestamp = state.time;
    match mode {
        ReadoutMode::Ideal => {
            let (x0, x1, y0, y1) = cell_window(state, region);
            let mut pixels = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for iy in y0..y1 {
                for ix in x0..x1 {
                    pixels.push(cell_counts(state, registry, k, state.cell_index(ix, iy), intensity));
                }
            }
            Ok(ReadoutImage {
                channel: channel.to_string(),
                label: String::new(),
                nx: x1 - x0,
                ny: y1 - y0,
                pitch: state.grid.dx,
                origin: [state.grid.x(x0), state.grid.y(y0)],
                pixels,
                beam: *beam,
                mode,
                timestamp,
            })
        }
        ReadoutMode::Perturbative => {
            let region =
                region.ok_or_else(|| EngineError::InvalidStep("perturbative readout needs a region".into()))?;
            let points = region.points(step);
            let nx = ((region.x1 - region.x0) / step + 1e-9).floor() as usize + 1;
            let ny = points.len() / nx;
            let mut pixels = Vec::with_capacity(points.len());
            let mut ws = Workspace::default();
            for &(x, y) in &points {
                let cell = state
                    .grid
                    .cell_at(x, y)
                    .map(|(ix, iy)| state.cell_index(ix, iy))
                    .ok_or_else(|| EngineError::InvalidStep(format!("readout point ({x}, {y}) outside grid")))?;
                pixels.push(cell_counts(state, registry, k, cell, intensity));
                let b = beam.at(x, y);
                let drive = DriveMap::build(registry, &state.grid, &[b], settings.beam_cutoff);
                carrier_macrostep_with(state, registry, &drive, dwell, settings, &mut ws)?;
            }
            Ok(ReadoutImage {
                channel: channel.to_string(),
                label: String::new(),
                nx,
                ny,
                pitch: step,
                origin: [region.x0, region.y0],
                pixels,
                beam: *beam,
                mode,
                timestamp,
            })
        }
    }
}

/// Executes `steps` in order against `state`.
///
/// Every step is validated before anything runs. `on_output` sees each
/// snapshot or image as soon as it is produced.
pub fn run_protocol_with(
    registry: &ModelRegistry,
    state: &mut SimulationState,
    steps: &[ScheduleStep],
    settings: &EngineSettings,
    mut on_output: impl FnMut(ProtocolOutput) -> Result<(), EngineError>,
) -> Result<(), EngineError> {
    settings.validate()?;
    for (i, s) in steps.iter().enumerate() {
        s.validate(i, state)?;
    }
    let mut ws = Workspace::default();
    let mut readouts = 0usize;
    for step in steps {
        match step {
            ScheduleStep::Fixed { beam, duration } => {
                let drive = DriveMap::build(registry, &state.grid, &[*beam], settings.beam_cutoff);
                carrier_macrostep_with(state, registry, &drive, *duration, settings, &mut ws)?;
            }
            ScheduleStep::Dark { duration } => {
                let drive = DriveMap::dark(&state.grid);
                carrier_macrostep_with(state, registry, &drive, *duration, settings, &mut ws)?;
            }
            ScheduleStep::Raster {
                region,
                step,
                dwell,
                passes,
                beam,
            } => {
                let points = region.points(*step);
                for _ in 0..*passes {
                    for &(x, y) in &points {
                        let drive = DriveMap::build(registry, &state.grid, &[beam.at(x, y)], settings.beam_cutoff);
                        carrier_macrostep_with(state, registry, &drive, *dwell, settings, &mut ws)?;
                    }
                }
            }
            ScheduleStep::Readout {
                beam,
                channel,
                mode,
                label,
                region,
                step,
                dwell,
            } => {
                let mut img = readout_image(
                    state,
                    registry,
                    beam,
                    channel,
                    *mode,
                    region.as_ref(),
                    *step,
                    *dwell,
                    settings,
                )?;
                img.label = label
                    .clone()
                    .unwrap_or_else(|| format!("readout{readouts:03}_{channel}"));
                readouts += 1;
                on_output(ProtocolOutput::Image(img))?;
            }
            ScheduleStep::Snapshot { label } => {
                on_output(ProtocolOutput::Snapshot(Snapshot::capture(label, state, registry)))?;
            }
        }
    }
    Ok(())
}

/// Executes `steps` and collects every snapshot and image.
pub fn run_protocol(
    registry: &ModelRegistry,
    state: &mut SimulationState,
    steps: &[ScheduleStep],
    settings: &EngineSettings,
) -> Result<Vec<ProtocolOutput>, EngineError> {
    let mut out = Vec::new();
    run_protocol_with(registry, state, steps, settings, |o| {
        out.push(o);
        Ok(())
    })?;
    Ok(out)
}

/// Images from a protocol output list.
pub fn images(outputs: &[ProtocolOutput]) -> Vec<&ReadoutImage> {
    outputs
        .iter()
        .filter_map(|o| match o {
            ProtocolOutput::Image(i) => Some(i),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::load_scenario;

    fn setup() -> (ModelRegistry, SimulationState, EngineSettings) {
        let text =
            "schema_version = 1\nname = \"t\"\nbase = \"default\"\noverrides = [\"grid.nx=24\", \"grid.ny=24\"]\n";
        let sc = load_scenario(text, &[]).unwrap().scenario;
        let reg = sc.registry().unwrap();
        let st = SimulationState::uniform(&reg, sc.grid);
        (reg, st, sc.engine)
    }

    fn readout(mode: ReadoutMode, region: Option<Rect>) -> ScheduleStep {
        ScheduleStep::Readout {
            beam: Beam::new(857.0, 0.29, 0.45),
            channel: "SiV-".into(),
            mode,
            label: None,
            region,
            step: 0.5,
            dwell: 1e-3,
        }
    }

    #[test]
    fn raster_points_are_row_major_and_inclusive() {
        let p = Rect::centered(1.0).points(0.5);
        assert_eq!(p.len(), 25);
        assert_eq!(p[0], (-1.0, -1.0));
        assert_eq!(p[1], (-0.5, -1.0));
        assert_eq!(p[24], (1.0, 1.0));
        let raster = ScheduleStep::Raster {
            region: Rect::centered(1.0),
            step: 0.5,
            dwell: 2e-3,
            passes: 3,
            beam: Beam::new(532.0, 1.0, 0.35),
        };
        assert!((raster.duration() - 25.0 * 2e-3 * 3.0).abs() < 1e-15);
    }

    #[test]
    fn ideal_readout_is_side_effect_free() {
        let (reg, mut st, settings) = setup();
        run_protocol(
            &reg,
            &mut st,
            &[ScheduleStep::Fixed {
                beam: Beam::new(532.0, 1.0, 0.35),
                duration: 0.2,
            }],
            &settings,
        )
        .unwrap();
        let before = st.hash();
        let out = run_protocol(&reg, &mut st, &[readout(ReadoutMode::Ideal, None)], &settings).unwrap();
        assert_eq!(st.hash(), before);
        let img = images(&out)[0];
        assert_eq!((img.nx, img.ny), (24, 24));
        assert_eq!(img.label, "readout000_SiV-");
        // the far corner still holds the initial all-SiV- population
        assert!(img.at(0, 0) > 0.0);
    }

    #[test]
    fn region_readout_crops_to_covered_cells() {
        let (reg, mut st, settings) = setup();
        let out = run_protocol(
            &reg,
            &mut st,
            &[readout(ReadoutMode::Ideal, Some(Rect::centered(1.0)))],
            &settings,
        )
        .unwrap();
        let img = images(&out)[0];
        assert_eq!((img.nx, img.ny), (8, 8));
        assert!(img.pixel_center(0, 0).0 >= -1.0);
    }

    #[test]
    fn perturbative_readout_advances_the_clock() {
        let (reg, mut st, settings) = setup();
        let step = readout(ReadoutMode::Perturbative, Some(Rect::centered(1.0)));
        let out = run_protocol(&reg, &mut st, std::slice::from_ref(&step), &settings).unwrap();
        assert!((st.time - step.duration()).abs() < 1e-12);
        assert_eq!(images(&out)[0].pixels.len(), 25);
    }

    #[test]
    fn invalid_steps_fail_before_anything_runs() {
        let (reg, mut st, settings) = setup();
        let steps = [
            ScheduleStep::Dark { duration: 1.0 },
            ScheduleStep::Raster {
                region: Rect::centered(50.0),
                step: 0.2,
                dwell: 1e-3,
                passes: 1,
                beam: Beam::new(532.0, 1.0, 0.35),
            },
        ];
        let before = st.hash();
        let e = run_protocol(&reg, &mut st, &steps, &settings).unwrap_err();
        assert!(matches!(e, EngineError::StepOutOfBounds { index: 1, .. }), "{e:?}");
        assert_eq!(st.hash(), before);
        let mut bad = readout(ReadoutMode::Ideal, None);
        if let ScheduleStep::Readout { channel, .. } = &mut bad {
            *channel = "nope".into();
        }
        assert!(matches!(
            run_protocol(&reg, &mut st, &[bad], &settings),
            Err(EngineError::UnknownChannel(_))
        ));
    }

    #[test]
    fn snapshots_carry_every_slot_and_both_carriers() {
        let (reg, mut st, settings) = setup();
        let out = run_protocol(
            &reg,
            &mut st,
            &[ScheduleStep::Snapshot { label: "s".into() }],
            &settings,
        )
        .unwrap();
        let ProtocolOutput::Snapshot(s) = &out[0] else { panic!() };
        assert_eq!(s.planes.len(), st.slot_count() + 2);
        assert_eq!(s.planes.last().unwrap().0, "holes");
    }
}
