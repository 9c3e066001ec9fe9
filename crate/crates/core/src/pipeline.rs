//! Run and analyze drivers: execute a scenario into an artifact directory,
//! then evaluate an analysis document against the stored artifacts.
//!
//! A run directory holds one `manifest.json` plus the files it lists:
//! readout images and snapshots as DCS1 dumps, a `readouts.csv` summary and,
//! for telegraph scenarios, trace and count CSVs. Scenarios with variants get
//! one run directory per variant.
//!
//! Analysis documents are TOML lists of `[[analysis]]` tables; each writes
//! `analysis/<name>.json` (and a CSV for profiles) next to the manifest.
//! Reports carry no wall-clock data, so reruns are byte-identical.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    annulus_mask, anticorrelation, e_folding_rate, fit_biexponential, fit_power_law, fit_rate_vs_power, radial_profile,
    torus_edge_radius, BiExpFit, LinearFit, PowerLawFit, Threshold,
};
use crate::error::{AnalysisError, EngineError, ModelError};
use crate::photophysics::Beam;
use crate::protocol::io::{
    read_csv_columns, read_dcs1, write_csv, write_dcs1, ArtifactKind, ArtifactRecord, RunManifest,
};
use crate::protocol::{run_protocol_with, ProtocolOutput, ReadoutImage, ReadoutMode};
use crate::scenario::{load_scenario, LoadedScenario};
use crate::state::SimulationState;
use crate::stochastic::{
    estimate_occupancy, gillespie_simulate, histogram, EmitterState, OccupancyEstimate, TelegraphTrace,
};
use crate::ENGINE_VERSION;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

impl PipelineError {
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Model(e) => e.code(),
            PipelineError::Engine(e) => e.code(),
            PipelineError::Analysis(e) => e.code(),
        }
    }

    /// Process exit code: 2 configuration, 3 engine, 4 analysis.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Model(_) => 2,
            PipelineError::Engine(_) => 3,
            PipelineError::Analysis(_) => 4,
        }
    }
}

/// Options for [`run_scenario`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// `dotted.path=value` assignments applied after the document's own.
    pub overrides: Vec<String>,
    /// Replaces the document's `seed`.
    pub seed: Option<u64>,
    /// Variants run concurrently on up to this many threads; 0 means 1.
    pub jobs: usize,
}

/// One finished run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Empty for scenarios without variants.
    pub variant: String,
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

/// Reads a scenario file, or a bundled preset when `config` names one and no
/// such file exists.
pub fn read_config(config: &str) -> Result<String, ModelError> {
    match std::fs::read_to_string(config) {
        Ok(t) => Ok(t),
        Err(e) => crate::presets::find(config)
            .map(|p| p.text.to_string())
            .ok_or_else(|| ModelError::config("config", format!("cannot read '{config}': {e}"))),
    }
}

/// Loads `text`, then runs the scenario (or each of its variants) into `out`.
pub fn run_scenario(text: &str, out: &Path, opts: &RunOptions) -> Result<Vec<RunOutcome>, PipelineError> {
    let mut extra = opts.overrides.clone();
    if let Some(seed) = opts.seed {
        extra.push(format!("seed={seed}"));
    }
    let loaded = load_scenario(text, &extra)?;
    if loaded.scenario.variants.is_empty() {
        let manifest = run_loaded(&loaded, out, &extra)?;
        return Ok(vec![RunOutcome {
            variant: String::new(),
            dir: out.to_path_buf(),
            manifest,
        }]);
    }
    let mut names = BTreeSet::new();
    let mut jobs = Vec::new();
    for v in &loaded.scenario.variants {
        if !names.insert(v.name.clone()) {
            return Err(ModelError::DuplicateLabel(v.name.clone()).into());
        }
        let scenario = loaded.variant(v)?;
        let mut recorded = extra.clone();
        recorded.extend(v.overrides.iter().cloned());
        jobs.push((v.name.clone(), out.join(file_stem(&v.name)), scenario, recorded));
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunManifest, PipelineError>>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|s| {
        for _ in 0..opts.jobs.clamp(1, jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((_, dir, scenario, recorded)) = jobs.get(i) else {
                    break;
                };
                let r = run_loaded(scenario, dir, recorded);
                results.lock().expect("no panics while held")[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("threads joined");
    jobs.into_iter()
        .zip(results)
        .map(|((variant, dir, _, _), r)| {
            Ok(RunOutcome {
                variant,
                dir,
                manifest: r.expect("every job ran")?,
            })
        })
        .collect()
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Unique file name for `label` with `ext`.
fn claim_name(used: &mut BTreeSet<String>, label: &str, ext: &str) -> String {
    let stem = file_stem(label);
    let mut name = format!("{stem}.{ext}");
    let mut k = 1;
    while !used.insert(name.clone()) {
        name = format!("{stem}_{k}.{ext}");
        k += 1;
    }
    name
}

fn run_loaded(loaded: &LoadedScenario, dir: &Path, overrides: &[String]) -> Result<RunManifest, PipelineError> {
    let sc = &loaded.scenario;
    let started = unix_now();
    let registry = sc.registry()?;
    let steps = sc.steps()?;
    std::fs::create_dir_all(dir).map_err(EngineError::from)?;
    let mut state = SimulationState::uniform(&registry, sc.grid);
    let mut used = BTreeSet::from([MANIFEST_FILE.to_string()]);
    let mut artifacts = Vec::new();
    let mut rows = Vec::new();
    run_protocol_with(&registry, &mut state, &steps, &sc.engine, |o| {
        match o {
            ProtocolOutput::Image(img) => {
                let name = claim_name(&mut used, &img.label, "dcs");
                write_dcs1(&dir.join(&name), img.nx, img.ny, &[&img.pixels])?;
                rows.push(vec![
                    img.label.clone(),
                    img.channel.clone(),
                    format!("{}", img.timestamp),
                    format!("{}", img.mean()),
                    format!("{}", img.value_near(0.0, 0.0)),
                ]);
                artifacts.push(ArtifactRecord {
                    path: name,
                    kind: ArtifactKind::ReadoutImage,
                    label: img.label,
                    channel: Some(img.channel.clone()),
                    timestamp: img.timestamp,
                    planes: vec![img.channel],
                    geometry: Some([img.pitch, img.origin[0], img.origin[1]]),
                    beam: Some(img.beam),
                    mode: Some(img.mode),
                });
            }
            ProtocolOutput::Snapshot(s) => {
                let name = claim_name(&mut used, &s.label, "dcs");
                let planes: Vec<&[f64]> = s.planes.iter().map(|(_, p)| p.as_slice()).collect();
                write_dcs1(&dir.join(&name), s.nx, s.ny, &planes)?;
                artifacts.push(ArtifactRecord {
                    path: name,
                    kind: ArtifactKind::Snapshot,
                    label: s.label,
                    channel: None,
                    timestamp: s.timestamp,
                    planes: s.planes.into_iter().map(|(n, _)| n).collect(),
                    geometry: Some([sc.grid.dx, -half(sc.grid.nx, sc.grid.dx), -half(sc.grid.ny, sc.grid.dx)]),
                    beam: None,
                    mode: None,
                });
            }
        }
        Ok(())
    })?;
    if !rows.is_empty() {
        let name = claim_name(&mut used, "readouts", "csv");
        write_csv(
            &dir.join(&name),
            &["label", "channel", "time_s", "mean_kcps", "center_kcps"],
            &rows,
        )?;
        artifacts.push(ArtifactRecord {
            path: name,
            kind: ArtifactKind::Series,
            label: "readouts".into(),
            channel: None,
            timestamp: state.time,
            planes: Vec::new(),
            geometry: None,
            beam: None,
            mode: None,
        });
    }
    if let Some(tc) = &sc.telegraph {
        tc.model.validate()?;
        let mut reference = tc.model.clone();
        reference.remote_windows.clear();
        for (label, model, offset) in [("reference", &reference, 0u64), ("remote", &tc.model, 1u64)] {
            let seed = sc.seed.wrapping_mul(2).wrapping_add(offset);
            let trace = gillespie_simulate(model, tc.duration, seed);
            let segs: Vec<Vec<String>> = segments(&trace)
                .into_iter()
                .map(|(a, b, s)| vec![format!("{a}"), format!("{b}"), state_name(s).into()])
                .collect();
            let name = claim_name(&mut used, &format!("trace_{label}"), "csv");
            write_csv(&dir.join(&name), &["start_s", "end_s", "state"], &segs)?;
            artifacts.push(telegraph_record(name, ArtifactKind::Trace, label, tc.duration));
            let h = histogram(&trace, model, tc.bin_width, tc.count_bin, seed ^ 0x9e37_79b9);
            let counts: Vec<Vec<String>> = h
                .counts
                .iter()
                .enumerate()
                .map(|(i, c)| vec![format!("{}", i as f64 * tc.bin_width), c.to_string()])
                .collect();
            let name = claim_name(&mut used, &format!("counts_{label}"), "csv");
            write_csv(&dir.join(&name), &["bin_start_s", "counts"], &counts)?;
            artifacts.push(telegraph_record(name, ArtifactKind::Trace, label, tc.duration));
            let freq: Vec<Vec<String>> = h
                .edges
                .iter()
                .zip(&h.frequencies)
                .map(|(e, f)| vec![e.to_string(), f.to_string()])
                .collect();
            let name = claim_name(&mut used, &format!("histogram_{label}"), "csv");
            write_csv(&dir.join(&name), &["count_bin_low", "frequency"], &freq)?;
            artifacts.push(telegraph_record(name, ArtifactKind::Histogram, label, tc.duration));
        }
    }
    let manifest = RunManifest {
        schema_version: crate::protocol::io::MANIFEST_SCHEMA_VERSION,
        engine_version: ENGINE_VERSION.to_string(),
        scenario: sc.name.clone(),
        config_hash: loaded.hash.clone(),
        seed: sc.seed,
        overrides: overrides.to_vec(),
        started,
        finished: unix_now(),
        final_time: state.time,
        artifacts,
    };
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Centre of cell 0 sits at −(n−1)·dx/2.
fn half(n: usize, dx: f64) -> f64 {
    (n as f64 - 1.0) * dx * 0.5
}

fn telegraph_record(path: String, kind: ArtifactKind, label: &str, duration: f64) -> ArtifactRecord {
    ArtifactRecord {
        path,
        kind,
        label: label.to_string(),
        channel: None,
        timestamp: duration,
        planes: Vec::new(),
        geometry: None,
        beam: None,
        mode: None,
    }
}

fn state_name(s: EmitterState) -> &'static str {
    match s {
        EmitterState::Bright => "bright",
        EmitterState::Dark => "dark",
    }
}

/// (start, end, state) for every constant stretch of the trace.
fn segments(trace: &TelegraphTrace) -> Vec<(f64, f64, EmitterState)> {
    (0..trace.states.len())
        .map(|i| {
            let end = trace.times.get(i + 1).copied().unwrap_or(trace.duration);
            (trace.times[i], end, trace.states[i])
        })
        .collect()
}

// ---------------------------------------------------------------- analysis

/// One `[[analysis]]` entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnalysisRequest {
    /// Radial profile of one image, written as CSV, with its peak and edge.
    Profile {
        name: String,
        label: String,
        #[serde(default)]
        center: [f64; 2],
        #[serde(default)]
        bin_width: Option<f64>,
        #[serde(default)]
        threshold: Option<ThresholdSpec>,
    },
    /// Edge radius of every image of a channel, then a power-law fit.
    EdgeGrowth {
        name: String,
        channel: String,
        threshold: ThresholdSpec,
        #[serde(default)]
        center: [f64; 2],
        #[serde(default)]
        bin_width: Option<f64>,
        #[serde(default)]
        fixed_n: Option<f64>,
        /// Inclusive time window for the fit, s.
        #[serde(default)]
        window: Option<[f64; 2]>,
    },
    /// Pearson correlation of two images over an annulus.
    Anticorrelation {
        name: String,
        a: String,
        b: String,
        #[serde(default)]
        center: [f64; 2],
        #[serde(default)]
        r_in: f64,
        r_out: f64,
    },
    /// Decay of one pixel across the images of a channel: e-folding rate and
    /// bi-exponential fit. `reference`, when given, is the t = 0 image.
    Decay {
        name: String,
        channel: String,
        #[serde(default)]
        point: [f64; 2],
        #[serde(default)]
        reference: Option<String>,
        #[serde(default)]
        baseline: f64,
    },
    /// E-folding rate of each listed run's decay against power, with a
    /// linear fit. Run paths are manifest paths relative to this manifest.
    RateVsPower {
        name: String,
        runs: Vec<String>,
        powers: Vec<f64>,
        channel: String,
        #[serde(default)]
        point: [f64; 2],
        #[serde(default)]
        reference: Option<String>,
        #[serde(default)]
        baseline: f64,
    },
    /// Bright occupancy and count-histogram mass of telegraph traces.
    Telegraph {
        name: String,
        #[serde(default = "default_traces")]
        traces: Vec<String>,
        /// Counts per time bin separating the two modes.
        count_threshold: f64,
        /// Restricts both estimates to this window, s.
        #[serde(default)]
        window: Option<[f64; 2]>,
    },
}

fn default_traces() -> Vec<String> {
    vec!["reference".into(), "remote".into()]
}

impl AnalysisRequest {
    pub fn name(&self) -> &str {
        match self {
            AnalysisRequest::Profile { name, .. }
            | AnalysisRequest::EdgeGrowth { name, .. }
            | AnalysisRequest::Anticorrelation { name, .. }
            | AnalysisRequest::Decay { name, .. }
            | AnalysisRequest::RateVsPower { name, .. }
            | AnalysisRequest::Telegraph { name, .. } => name,
        }
    }
}

/// Absolute (kcps) or peak-relative threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdSpec {
    Kcps(f64),
    Fraction(f64),
}

impl From<ThresholdSpec> for Threshold {
    fn from(t: ThresholdSpec) -> Self {
        match t {
            ThresholdSpec::Kcps(v) => Threshold::Absolute(v),
            ThresholdSpec::Fraction(f) => Threshold::Fraction(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisDocument {
    pub analysis: Vec<AnalysisRequest>,
}

pub fn parse_analysis(text: &str) -> Result<AnalysisDocument, ModelError> {
    let doc: AnalysisDocument = toml::from_str(text).map_err(|e| ModelError::config("analysis", e.to_string()))?;
    let mut seen = BTreeSet::new();
    for a in &doc.analysis {
        if !seen.insert(a.name().to_string()) {
            return Err(ModelError::DuplicateLabel(a.name().to_string()));
        }
    }
    Ok(doc)
}

/// Report of one analysis entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Report {
    Profile {
        name: String,
        label: String,
        peak_radius: f64,
        peak_kcps: f64,
        center_kcps: f64,
        edge_radius: Option<f64>,
        csv: String,
    },
    EdgeGrowth {
        name: String,
        times: Vec<f64>,
        /// `None` where the image never crosses the threshold.
        radii: Vec<Option<f64>>,
        fit: Option<PowerLawFit>,
        fit_error: Option<String>,
    },
    Anticorrelation {
        name: String,
        pearson: f64,
        pixels: usize,
    },
    Decay {
        name: String,
        times: Vec<f64>,
        values: Vec<f64>,
        e_folding_rate: Option<f64>,
        biexponential: Option<BiExpFit>,
        fit_error: Option<String>,
    },
    RateVsPower {
        name: String,
        powers: Vec<f64>,
        rates: Vec<Option<f64>>,
        fit: Option<LinearFit>,
        fit_error: Option<String>,
    },
    Telegraph {
        name: String,
        traces: Vec<TraceSummary>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub label: String,
    pub occupancy: Option<OccupancyEstimate>,
    pub occupancy_error: Option<String>,
    pub switches: usize,
    pub bright_mode_mass: f64,
}

/// A manifest with every listed artifact verified present.
#[derive(Debug, Clone)]
pub struct StoredRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl StoredRun {
    pub fn open(manifest_path: &Path) -> Result<Self, PipelineError> {
        if !manifest_path.is_file() {
            return Err(AnalysisError::MissingArtifact(manifest_path.display().to_string()).into());
        }
        let manifest = RunManifest::read(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        for a in &manifest.artifacts {
            if !dir.join(&a.path).is_file() {
                return Err(AnalysisError::MissingArtifact(a.path.clone()).into());
            }
        }
        Ok(StoredRun { dir, manifest })
    }

    fn record(&self, label: &str) -> Result<&ArtifactRecord, AnalysisError> {
        self.manifest
            .artifacts
            .iter()
            .find(|a| a.label == label)
            .ok_or_else(|| AnalysisError::MissingArtifact(label.to_string()))
    }

    pub fn image(&self, label: &str) -> Result<ReadoutImage, PipelineError> {
        let rec = self.record(label)?;
        if rec.kind != ArtifactKind::ReadoutImage {
            return Err(AnalysisError::MissingArtifact(format!("{label} (not a readout image)")).into());
        }
        self.load_image(rec)
    }

    fn load_image(&self, rec: &ArtifactRecord) -> Result<ReadoutImage, PipelineError> {
        let dump = read_dcs1(&self.dir.join(&rec.path))?;
        let [pitch, ox, oy] = rec
            .geometry
            .ok_or_else(|| EngineError::Format(format!("{} has no geometry", rec.path)))?;
        let pixels = dump
            .planes
            .into_iter()
            .next()
            .ok_or_else(|| EngineError::Format(format!("{} has no planes", rec.path)))?;
        Ok(ReadoutImage {
            channel: rec.channel.clone().unwrap_or_default(),
            label: rec.label.clone(),
            nx: dump.nx,
            ny: dump.ny,
            pitch,
            origin: [ox, oy],
            pixels,
            beam: rec.beam.unwrap_or(Beam::new(0.0, 0.0, 1.0)),
            mode: rec.mode.unwrap_or(ReadoutMode::Ideal),
            timestamp: rec.timestamp,
        })
    }

    /// Every image of `channel` in protocol order.
    pub fn channel_images(&self, channel: &str) -> Result<Vec<ReadoutImage>, PipelineError> {
        let recs: Vec<&ArtifactRecord> = self
            .manifest
            .artifacts
            .iter()
            .filter(|a| a.kind == ArtifactKind::ReadoutImage && a.channel.as_deref() == Some(channel))
            .collect();
        if recs.is_empty() {
            return Err(AnalysisError::MissingArtifact(format!("images of channel {channel}")).into());
        }
        recs.into_iter().map(|r| self.load_image(r)).collect()
    }

    /// Named planes of a snapshot dump.
    pub fn snapshot(&self, label: &str) -> Result<Vec<(String, Vec<f64>)>, PipelineError> {
        let rec = self.record(label)?;
        if rec.kind != ArtifactKind::Snapshot {
            return Err(AnalysisError::MissingArtifact(format!("{label} (not a snapshot)")).into());
        }
        let dump = read_dcs1(&self.dir.join(&rec.path))?;
        if dump.planes.len() != rec.planes.len() {
            return Err(EngineError::Format(format!("{}: plane count differs from the manifest", rec.path)).into());
        }
        Ok(rec.planes.iter().cloned().zip(dump.planes).collect())
    }

    pub fn trace(&self, label: &str) -> Result<TelegraphTrace, PipelineError> {
        let rec = self
            .manifest
            .artifacts
            .iter()
            .find(|a| a.kind == ArtifactKind::Trace && a.label == label && a.path.starts_with("trace_"))
            .ok_or_else(|| AnalysisError::MissingArtifact(format!("trace {label}")))?;
        let (_, cols) = read_csv_columns(&self.dir.join(&rec.path))?;
        let bad = |v: &str| EngineError::Format(format!("{}: bad value '{v}'", rec.path));
        let mut times = Vec::new();
        let mut states = Vec::new();
        for (start, state) in cols[0].iter().zip(&cols[2]) {
            times.push(start.parse::<f64>().map_err(|_| bad(start))?);
            states.push(match state.as_str() {
                "bright" => EmitterState::Bright,
                "dark" => EmitterState::Dark,
                other => return Err(bad(other).into()),
            });
        }
        Ok(TelegraphTrace {
            times,
            states,
            duration: rec.timestamp,
        })
    }

    pub fn counts(&self, label: &str) -> Result<(Vec<f64>, Vec<u64>), PipelineError> {
        let rec = self
            .manifest
            .artifacts
            .iter()
            .find(|a| a.kind == ArtifactKind::Trace && a.label == label && a.path.starts_with("counts_"))
            .ok_or_else(|| AnalysisError::MissingArtifact(format!("counts {label}")))?;
        let (_, cols) = read_csv_columns(&self.dir.join(&rec.path))?;
        let bad = |v: &str| EngineError::Format(format!("{}: bad value '{v}'", rec.path));
        let starts = cols[0]
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| bad(v)))
            .collect::<Result<_, _>>()?;
        let counts = cols[1]
            .iter()
            .map(|v| v.parse::<u64>().map_err(|_| bad(v)))
            .collect::<Result<_, _>>()?;
        Ok((starts, counts))
    }

    /// Pixel value at `point` for every image of `channel`, prefixed by the
    /// `reference` image at t = 0 when given.
    fn decay_series(
        &self,
        channel: &str,
        point: [f64; 2],
        reference: Option<&str>,
    ) -> Result<(Vec<f64>, Vec<f64>), PipelineError> {
        let mut t = Vec::new();
        let mut y = Vec::new();
        let t0 = match reference {
            Some(r) => {
                let img = self.image(r)?;
                t.push(0.0);
                y.push(img.value_near(point[0], point[1]));
                Some((r.to_string(), img.timestamp))
            }
            None => None,
        };
        let origin = t0.as_ref().map_or(0.0, |(_, ts)| *ts);
        for img in self.channel_images(channel)? {
            if t0.as_ref().is_some_and(|(r, _)| *r == img.label) {
                continue;
            }
            t.push(img.timestamp - origin);
            y.push(img.value_near(point[0], point[1]));
        }
        Ok((t, y))
    }
}

fn write_report(dir: &Path, name: &str, report: &Report) -> Result<PathBuf, PipelineError> {
    let path = dir.join(format!("{}.json", file_stem(name)));
    let text = serde_json::to_string_pretty(report).map_err(|e| EngineError::Format(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(EngineError::from)?;
    Ok(path)
}

/// Sub-trace on `[a, b]`, re-based to start at 0.
fn clip_trace(trace: &TelegraphTrace, a: f64, b: f64) -> TelegraphTrace {
    let mut times = Vec::new();
    let mut states = Vec::new();
    for (s, e, st) in segments(trace) {
        let (s2, e2) = (s.max(a), e.min(b));
        if e2 > s2 {
            times.push(s2 - a);
            states.push(st);
        }
    }
    TelegraphTrace {
        times,
        states,
        duration: b - a,
    }
}

/// Evaluates one request against `run`.
pub fn evaluate(run: &StoredRun, request: &AnalysisRequest, out_dir: &Path) -> Result<Report, PipelineError> {
    Ok(match request {
        AnalysisRequest::Profile {
            name,
            label,
            center,
            bin_width,
            threshold,
        } => {
            let img = run.image(label)?;
            let p = radial_profile(&img, *center, bin_width.unwrap_or(img.pitch))?;
            let (peak_radius, peak_kcps) = p.peak();
            let edge_radius = threshold.map(|t| torus_edge_radius(&p, t.into())).transpose()?;
            let csv = format!("{}.csv", file_stem(name));
            let rows: Vec<Vec<String>> = p
                .radii
                .iter()
                .zip(&p.values)
                .zip(&p.pixels)
                .map(|((r, v), n)| vec![format!("{r}"), format!("{v}"), n.to_string()])
                .collect();
            write_csv(&out_dir.join(&csv), &["radius_um", "mean_kcps", "pixels"], &rows)?;
            Report::Profile {
                name: name.clone(),
                label: label.clone(),
                peak_radius,
                peak_kcps,
                center_kcps: p.values[0],
                edge_radius,
                csv,
            }
        }
        AnalysisRequest::EdgeGrowth {
            name,
            channel,
            threshold,
            center,
            bin_width,
            fixed_n,
            window,
        } => {
            let mut times = Vec::new();
            let mut radii = Vec::new();
            for img in run.channel_images(channel)? {
                let p = radial_profile(&img, *center, bin_width.unwrap_or(img.pitch))?;
                times.push(img.timestamp);
                radii.push(match torus_edge_radius(&p, (*threshold).into()) {
                    Ok(r) => Some(r),
                    Err(AnalysisError::NoCrossing) => None,
                    Err(e) => return Err(e.into()),
                });
            }
            // image timestamps mark the start of each readout, i.e. the
            // cumulative illumination time when readouts are ideal
            let (ft, fr): (Vec<f64>, Vec<f64>) = times
                .iter()
                .zip(&radii)
                .filter(|(t, r)| r.is_some() && window.is_none_or(|w| **t >= w[0] && **t <= w[1]))
                .map(|(t, r)| (*t, r.expect("filtered")))
                .unzip();
            let (fit, fit_error) = match fit_power_law(&ft, &fr, *fixed_n) {
                Ok(f) => (Some(f), None),
                Err(e) => (None, Some(e.to_string())),
            };
            Report::EdgeGrowth {
                name: name.clone(),
                times,
                radii,
                fit,
                fit_error,
            }
        }
        AnalysisRequest::Anticorrelation {
            name,
            a,
            b,
            center,
            r_in,
            r_out,
        } => {
            let (ia, ib) = (run.image(a)?, run.image(b)?);
            let mask = annulus_mask(&ia, *center, *r_in, *r_out);
            let pearson = anticorrelation(&ia.pixels, &ib.pixels, &mask)?;
            Report::Anticorrelation {
                name: name.clone(),
                pearson,
                pixels: mask.iter().filter(|m| **m).count(),
            }
        }
        AnalysisRequest::Decay {
            name,
            channel,
            point,
            reference,
            baseline,
        } => {
            let (times, values) = run.decay_series(channel, *point, reference.as_deref())?;
            let e_folding_rate = e_folding_rate(&times, &values, *baseline).ok();
            let (biexponential, fit_error) = match fit_biexponential(&times, &values) {
                Ok(f) => (Some(f), None),
                Err(e) => (None, Some(e.to_string())),
            };
            Report::Decay {
                name: name.clone(),
                times,
                values,
                e_folding_rate,
                biexponential,
                fit_error,
            }
        }
        AnalysisRequest::RateVsPower {
            name,
            runs,
            powers,
            channel,
            point,
            reference,
            baseline,
        } => {
            if runs.len() != powers.len() {
                return Err(
                    AnalysisError::DegenerateInput(format!("{} runs but {} powers", runs.len(), powers.len())).into(),
                );
            }
            let mut rates = Vec::new();
            for r in runs {
                let other = StoredRun::open(&run.dir.join(r))?;
                let (t, y) = other.decay_series(channel, *point, reference.as_deref())?;
                rates.push(e_folding_rate(&t, &y, *baseline).ok());
            }
            let (px, ry): (Vec<f64>, Vec<f64>) = powers
                .iter()
                .zip(&rates)
                .filter_map(|(p, r)| r.map(|r| (*p, r)))
                .unzip();
            let (fit, fit_error) = match fit_rate_vs_power(&px, &ry) {
                Ok(f) => (Some(f), None),
                Err(e) => (None, Some(e.to_string())),
            };
            Report::RateVsPower {
                name: name.clone(),
                powers: powers.clone(),
                rates,
                fit,
                fit_error,
            }
        }
        AnalysisRequest::Telegraph {
            name,
            traces,
            count_threshold,
            window,
        } => {
            let mut out = Vec::new();
            for label in traces {
                let full = run.trace(label)?;
                let trace = match window {
                    Some([a, b]) => clip_trace(&full, *a, *b),
                    None => full,
                };
                let (starts, counts) = run.counts(label)?;
                let (n_in, n_above) = starts
                    .iter()
                    .zip(&counts)
                    .filter(|(s, _)| window.is_none_or(|w| **s >= w[0] && **s < w[1]))
                    .fold((0usize, 0usize), |(n, k), (_, c)| {
                        (n + 1, k + (*c as f64 > *count_threshold) as usize)
                    });
                let (occupancy, occupancy_error) = match estimate_occupancy(&trace) {
                    Ok(o) => (Some(o), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                out.push(TraceSummary {
                    label: label.clone(),
                    occupancy,
                    occupancy_error,
                    switches: trace.switches(),
                    bright_mode_mass: n_above as f64 / n_in.max(1) as f64,
                });
            }
            Report::Telegraph {
                name: name.clone(),
                traces: out,
            }
        }
    })
}

/// Runs every request of `spec_text` against the run at `manifest_path` and
/// writes the reports into `analysis/` beside the manifest.
pub fn analyze(manifest_path: &Path, spec_text: &str) -> Result<Vec<(Report, PathBuf)>, PipelineError> {
    let doc = parse_analysis(spec_text)?;
    let run = StoredRun::open(manifest_path)?;
    let out_dir = run.dir.join("analysis");
    std::fs::create_dir_all(&out_dir).map_err(EngineError::from)?;
    let mut out = Vec::new();
    for request in &doc.analysis {
        let report = evaluate(&run, request, &out_dir)?;
        let path = write_report(&out_dir, request.name(), &report)?;
        out.push((report, path));
    }
    Ok(out)
}
