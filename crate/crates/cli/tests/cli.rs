use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
schema_version = 1
name = "tiny"
base = "default"
overrides = ["grid.nx=24", "grid.ny=24"]

[[protocol]]
kind = "fixed"
duration = 0.5
beam = { wavelength = 532.0, power = 1.0, waist = 0.35 }

[[protocol]]
kind = "readout"
channel = "SiV0"
label = "after"
beam = { wavelength = 857.0, power = 0.29, waist = 0.45 }

[[protocol]]
kind = "readout"
channel = "SiV-"
label = "after_minus"
beam = { wavelength = 700.0, power = 0.29, waist = 0.45 }
"#;

const PROFILE_SPEC: &str = r#"
[[analysis]]
kind = "profile"
name = "after_profile"
label = "after"
threshold = { fraction = 0.5 }

[[analysis]]
kind = "anticorrelation"
name = "pair"
a = "after"
b = "after_minus"
r_out = 2.0
"#;

fn dcsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn presets_lists_every_bundled_scenario() {
    let o = dcsim(&["presets"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for p in dcsim_core::presets::PRESETS {
        assert!(text.contains(p.name), "{}", p.name);
    }
}

#[test]
fn missing_config_is_a_config_error() {
    let o = dcsim(&["run", "/no/such/scenario.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[ConfigError]"), "{}", stderr(&o));
}

#[test]
fn unknown_override_path_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "tiny.toml", TINY);
    let out = d.path().join("out");
    let o = dcsim(&["run", s(&cfg), "--out", s(&out), "--override", "grid.bogus=1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[ConfigError]"));
}

#[test]
fn run_records_overrides_and_seed() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "tiny.toml", TINY);
    let out = d.path().join("out");
    let o = dcsim(&[
        "run",
        s(&cfg),
        "--out",
        s(&out),
        "--override",
        "grid.nx=20",
        "--seed",
        "9",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 9);
    assert!(m["overrides"].as_array().unwrap().iter().any(|v| v == "grid.nx=20"));
    assert_eq!(m["final_time"], 0.5);
}

#[test]
fn analyze_is_idempotent_and_detects_deleted_artifacts() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "tiny.toml", TINY);
    let spec = write(d.path(), "spec.toml", PROFILE_SPEC);
    let out = d.path().join("out");
    assert!(dcsim(&["run", s(&cfg), "--out", s(&out)]).status.success());
    let manifest = out.join("manifest.json");
    assert!(dcsim(&["analyze", s(&manifest), s(&spec)]).status.success());
    let reports = ["after_profile.json", "after_profile.csv", "pair.json"];
    let first: Vec<Vec<u8>> = reports
        .iter()
        .map(|r| std::fs::read(out.join("analysis").join(r)).unwrap())
        .collect();
    assert!(dcsim(&["analyze", s(&manifest), s(&spec)]).status.success());
    for (r, bytes) in reports.iter().zip(&first) {
        assert_eq!(&std::fs::read(out.join("analysis").join(r)).unwrap(), bytes, "{r}");
    }

    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    for artifact in m["artifacts"].as_array().unwrap() {
        let name = artifact["path"].as_str().unwrap();
        let file = out.join(name);
        let saved = std::fs::read(&file).unwrap();
        std::fs::remove_file(&file).unwrap();
        let o = dcsim(&["analyze", s(&manifest), s(&spec)]);
        assert_eq!(o.status.code(), Some(4));
        let err = stderr(&o);
        assert!(err.starts_with("error[MissingArtifact]") && err.contains(name), "{err}");
        std::fs::write(&file, saved).unwrap();
    }
}

#[test]
fn power_law_analysis_on_a_scaling_run() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("out");
    let o = dcsim(&[
        "run",
        "figS3_scaling",
        "--out",
        s(&out),
        "--override",
        "grid.nx=48",
        "--override",
        "grid.ny=48",
        "--override",
        "protocol.0.log_times.end=20",
        "--override",
        "protocol.0.log_times.count=8",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let spec = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../analyses/edge_growth.toml");
    let o = dcsim(&["analyze", s(&out.join("manifest.json")), s(&spec)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("analysis/siv0_front.json")).unwrap()).unwrap();
    assert_eq!(r["kind"], "edge_growth");
    let n = r["fit"]["n"].as_f64().expect("power-law fit present");
    assert!(n > 1.0 && n < 8.0, "n = {n}");
}

#[test]
fn variants_run_in_parallel_match_serial_runs() {
    let d = tempfile::tempdir().unwrap();
    let text = format!(
        "{TINY}\n[[variant]]\nname = \"a\"\noverrides = [\"protocol.0.duration=0.1\"]\n\n[[variant]]\nname = \"b\"\noverrides = [\"protocol.0.duration=0.2\"]\n"
    );
    let cfg = write(d.path(), "var.toml", &text);
    let (one, two) = (d.path().join("one"), d.path().join("two"));
    assert!(dcsim(&["run", s(&cfg), "--out", s(&one)]).status.success());
    assert!(dcsim(&["run", s(&cfg), "--out", s(&two), "--jobs", "2"])
        .status
        .success());
    for v in ["a", "b"] {
        for f in ["after.dcs", "after_minus.dcs", "readouts.csv"] {
            assert_eq!(
                std::fs::read(one.join(v).join(f)).unwrap(),
                std::fs::read(two.join(v).join(f)).unwrap()
            );
        }
    }
}
