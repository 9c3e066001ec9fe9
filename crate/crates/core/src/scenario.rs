//! Scenario documents: TOML configuration with a schema version, optional
//! bundled base document, dotted-path overrides and variants.
//!
//! ```toml
//! schema_version = 1
//! name = "example"
//! base = "default"                       # bundled base merged underneath
//! overrides = ["grid.nx=64"]             # applied after merging
//!
//! [[protocol]]
//! kind = "fixed"
//! duration = 60.0
//! beam = { wavelength = 532.0, power = 2.58, waist = 0.35 }
//!
//! [[variant]]                            # optional; each runs separately
//! name = "low"
//! overrides = ["protocol.0.beam.power=0.24"]
//! ```
//!
//! Override paths walk tables by key and arrays either by index or by the
//! `name`/`label` field of their elements.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::error::ModelError;
use crate::model::{GridSpec, ModelRegistry, ModelSpec};
use crate::photophysics::Beam;
use crate::presets;
use crate::protocol::{ReadoutMode, Rect, ScheduleStep};
use crate::stochastic::TelegraphConfig;
use crate::transport::EngineSettings;

pub const SCHEMA_VERSION: u32 = 1;

/// Readout taken after each element of an illumination series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesReadout {
    pub beam: Beam,
    pub channel: String,
    #[serde(default)]
    pub mode: ReadoutMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Rect>,
}

/// Logarithmically spaced cumulative times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogTimes {
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

impl LogTimes {
    pub fn times(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.start];
        }
        let (a, b) = (self.start.ln(), self.end.ln());
        (0..self.count)
            .map(|i| (a + (b - a) * i as f64 / (self.count - 1) as f64).exp())
            .collect()
    }
}

/// A protocol entry: either a primitive step or an illumination series that
/// expands to alternating fixed illumination and readouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepConfig {
    Series(SeriesConfig),
    Step(ScheduleStep),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesConfig {
    /// Must be `"series"`.
    pub kind: SeriesTag,
    pub beam: Beam,
    /// Cumulative illumination times, s.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub times: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_times: Option<LogTimes>,
    pub readouts: Vec<SeriesReadout>,
    #[serde(default = "default_series_label")]
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesTag {
    Series,
}

fn default_series_label() -> String {
    "t".into()
}

impl SeriesConfig {
    pub fn cumulative_times(&self) -> Vec<f64> {
        match &self.log_times {
            Some(l) => l.times(),
            None => self.times.clone(),
        }
    }

    fn expand(&self, out: &mut Vec<ScheduleStep>) -> Result<(), ModelError> {
        let times = self.cumulative_times();
        if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) || times[0] < 0.0 {
            return Err(ModelError::config(
                "protocol.times",
                "series times must be non-empty, non-negative and strictly increasing",
            ));
        }
        let mut prev = 0.0;
        for (i, &t) in times.iter().enumerate() {
            out.push(ScheduleStep::Fixed {
                beam: self.beam,
                duration: t - prev,
            });
            prev = t;
            for r in &self.readouts {
                out.push(ScheduleStep::Readout {
                    beam: r.beam,
                    channel: r.channel.clone(),
                    mode: r.mode,
                    label: Some(format!("{}{:02}_{}", self.label, i, r.channel)),
                    region: r.region,
                    step: 0.2,
                    dwell: 1e-3,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub name: String,
    #[serde(default)]
    pub overrides: Vec<String>,
}

/// A fully resolved scenario document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    pub grid: GridSpec,
    #[serde(default)]
    pub engine: EngineSettings,
    pub model: ModelSpec,
    #[serde(default)]
    pub protocol: Vec<StepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub telegraph: Option<TelegraphConfig>,
    #[serde(default, rename = "variant", skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<VariantConfig>,
}

/// Parsed document plus the tree it came from.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub document: Value,
    pub hash: String,
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_value(raw: &str) -> Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn find_in_array<'a>(arr: &'a mut [Value], seg: &str) -> Option<&'a mut Value> {
    if let Ok(i) = seg.parse::<usize>() {
        return arr.get_mut(i);
    }
    arr.iter_mut().find(|v| {
        v.get("name").and_then(Value::as_str) == Some(seg) || v.get("label").and_then(Value::as_str) == Some(seg)
    })
}

/// Applies one `dotted.path=value` assignment to a document tree.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), ModelError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ModelError::config(assignment, "override must look like key.path=value"))?;
    let path = path.trim();
    let segs: Vec<&str> = path.split('.').collect();
    if segs.iter().any(|s| s.is_empty()) {
        return Err(ModelError::config(path, "empty path segment"));
    }
    let mut cur = doc;
    for (i, seg) in segs.iter().enumerate() {
        let last = i + 1 == segs.len();
        cur = match cur {
            Value::Table(t) => {
                if last {
                    t.insert(seg.to_string(), parse_value(raw.trim()));
                    return Ok(());
                }
                t.entry(seg.to_string())
                    .or_insert_with(|| Value::Table(toml::Table::new()))
            }
            Value::Array(a) => {
                let slot =
                    find_in_array(a, seg).ok_or_else(|| ModelError::config(path, format!("no element '{seg}'")))?;
                if last {
                    *slot = parse_value(raw.trim());
                    return Ok(());
                }
                slot
            }
            _ => return Err(ModelError::config(path, format!("'{seg}' is not a table or array"))),
        };
    }
    Ok(())
}

/// SHA-256 of the canonical JSON rendering (sorted keys, no whitespace).
pub fn document_hash(doc: &Value) -> String {
    let json = serde_json::to_value(doc).expect("toml values map to json");
    let text = serde_json::to_string(&json).expect("json serializes");
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn field_of(message: &str) -> String {
    // serde messages mention the offending key as `field` or "unknown field `x`"
    message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "document".into())
}

/// Parses scenario text, resolves its base, applies its own overrides and then
/// `extra` overrides, and validates the result.
pub fn load_scenario(text: &str, extra: &[String]) -> Result<LoadedScenario, ModelError> {
    let top: Value = toml::from_str::<toml::Table>(text)
        .map(Value::Table)
        .map_err(|e| ModelError::config(field_of(e.message()), e.to_string()))?;
    let mut doc = match top.get("base").and_then(Value::as_str) {
        Some(name) => {
            let base_text = presets::base_document(name)
                .ok_or_else(|| ModelError::config("base", format!("unknown base document '{name}'")))?;
            let mut base: Value = toml::from_str::<toml::Table>(base_text)
                .map(Value::Table)
                .map_err(|e| ModelError::config("base", e.to_string()))?;
            merge(&mut base, top);
            base
        }
        None => top,
    };
    let own: Vec<String> = doc
        .get("overrides")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect())
        .unwrap_or_default();
    for o in own.iter().chain(extra) {
        apply_override(&mut doc, o)?;
    }
    let scenario = decode(&doc)?;
    let hash = document_hash(&doc);
    Ok(LoadedScenario {
        scenario,
        document: doc,
        hash,
    })
}

fn decode(doc: &Value) -> Result<Scenario, ModelError> {
    let version = doc.get("schema_version").and_then(Value::as_integer);
    if version != Some(SCHEMA_VERSION as i64) {
        return Err(ModelError::config(
            "schema_version",
            format!("expected {SCHEMA_VERSION}, found {version:?}"),
        ));
    }
    let scenario: Scenario = doc
        .clone()
        .try_into()
        .map_err(|e: toml::de::Error| ModelError::config(field_of(e.message()), e.message().to_string()))?;
    scenario.grid.validate()?;
    ModelRegistry::validate(&scenario.model)?;
    scenario
        .engine
        .validate()
        .map_err(|e| ModelError::config("engine", e.to_string()))?;
    scenario.steps()?;
    Ok(scenario)
}

impl LoadedScenario {
    /// The scenario with a variant's overrides applied on top.
    pub fn variant(&self, v: &VariantConfig) -> Result<LoadedScenario, ModelError> {
        let mut doc = self.document.clone();
        if let Value::Table(t) = &mut doc {
            t.remove("variant");
        }
        for o in &v.overrides {
            apply_override(&mut doc, o)?;
        }
        let scenario = decode(&doc)?;
        let hash = document_hash(&doc);
        Ok(LoadedScenario {
            scenario,
            document: doc,
            hash,
        })
    }
}

impl Scenario {
    pub fn registry(&self) -> Result<ModelRegistry, ModelError> {
        ModelRegistry::validate(&self.model)
    }

    /// Primitive steps with every series expanded.
    pub fn steps(&self) -> Result<Vec<ScheduleStep>, ModelError> {
        let mut out = Vec::new();
        for s in &self.protocol {
            match s {
                StepConfig::Step(step) => out.push(step.clone()),
                StepConfig::Series(series) => series.expand(&mut out)?,
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
name = "t"

[grid]
nx = 16
ny = 16
dx = 0.25

[[model.species]]
name = "SiV"
concentration_ppb = 30.0
states = [
  { label = "SiV-", charge = -1, brightness = { "SiV-" = 1.0 } },
  { label = "SiV0", charge = 0, brightness = { SiV0 = 1.0 } },
]

[[protocol]]
kind = "dark"
duration = 1.0
"#;

    #[test]
    fn loads_minimal_document() {
        let s = load_scenario(MINIMAL, &[]).unwrap();
        assert_eq!(s.scenario.grid.nx, 16);
        assert_eq!(s.scenario.steps().unwrap().len(), 1);
    }

    #[test]
    fn whitespace_does_not_change_hash() {
        let a = load_scenario(MINIMAL, &[]).unwrap().hash;
        let spaced = MINIMAL.replace(" = ", "   =    ").replace('\n', "\n\n");
        let b = load_scenario(&spaced, &[]).unwrap().hash;
        assert_eq!(a, b);
    }

    #[test]
    fn overrides_apply_by_index_and_name() {
        let s = load_scenario(
            MINIMAL,
            &["grid.nx=64".into(), "model.species.SiV.concentration_ppb=10".into()],
        )
        .unwrap();
        assert_eq!(s.scenario.grid.nx, 64);
        assert_eq!(s.scenario.model.species[0].concentration_ppb, 10.0);
        let plain = load_scenario(MINIMAL, &[]).unwrap();
        assert_ne!(plain.hash, s.hash);
    }

    #[test]
    fn bad_documents_are_config_errors() {
        let e = load_scenario("schema_version = 2\nname='x'", &[]).unwrap_err();
        assert_eq!(e.code(), "ConfigError");
        let e = load_scenario(&MINIMAL.replace("nx = 16", "nx = 4"), &[]).unwrap_err();
        assert_eq!(e.code(), "ConfigError");
        let e = load_scenario(&MINIMAL.replace("dx = 0.25", "dx = 0.25\nbogus = 1"), &[]).unwrap_err();
        assert_eq!(e.code(), "ConfigError");
        assert!(e.to_string().contains("bogus"), "{e}");
        assert!(load_scenario(MINIMAL, &["nope".into()]).is_err());
    }

    #[test]
    fn series_expands_to_fixed_and_readouts() {
        let text = format!(
            "{MINIMAL}\n[[protocol]]\nkind = \"series\"\nbeam = {{ wavelength = 532.0, power = 1.0, waist = 0.4 }}\n\
             log_times = {{ start = 0.3, end = 199.5, count = 4 }}\n\
             readouts = [{{ beam = {{ wavelength = 857.0, power = 0.29, waist = 0.45 }}, channel = \"SiV0\" }}]\n"
        );
        let s = load_scenario(&text, &[]).unwrap().scenario;
        let steps = s.steps().unwrap();
        assert_eq!(steps.len(), 1 + 8);
        let total: f64 = steps.iter().map(|s| s.duration()).sum();
        assert!((total - 200.5).abs() < 1e-9);
    }

    #[test]
    fn log_times_endpoints() {
        let t = LogTimes {
            start: 0.3,
            end: 199.5,
            count: 12,
        }
        .times();
        assert!((t[0] - 0.3).abs() < 1e-12 && (t[11] - 199.5).abs() < 1e-9);
        assert!(t.windows(2).all(|w| w[1] > w[0]));
    }
}
