//! Bundled scenario documents.

/// A scenario shipped with the engine.
#[derive(Debug, Clone, Copy)]
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub text: &'static str,
}

const BASES: &[(&str, &str)] = &[
    ("default", include_str!("../presets/base_default.toml")),
    ("double_capture", include_str!("../presets/base_double_capture.toml")),
];

macro_rules! preset {
    ($name:literal, $description:literal) => {
        Preset {
            name: $name,
            description: $description,
            text: include_str!(concat!("../presets/", $name, ".toml")),
        }
    };
}

pub const PRESETS: &[Preset] = &[
    preset!(
        "fig1_torus",
        "SiV0 torus and inverted SiV- torus after 60 s of 2.58 mW 532 nm"
    ),
    preset!(
        "fig2_raster",
        "High-power raster initialization followed by low-power raster erasure"
    ),
    preset!(
        "fig3_snapshots",
        "Interleaved 1.57 mW 532 nm illumination and SiV0 snapshots, 0.3 s to 199.5 s"
    ),
    preset!(
        "fig4_ionization_857",
        "SiV0 decay under 857 nm, below the ionization threshold"
    ),
    preset!(
        "fig4_ionization_637",
        "SiV0 decay under 637 nm, single-photon ionization"
    ),
    preset!(
        "fig4_ionization_532",
        "SiV0 decay under 532 nm with NV cycling and space charge"
    ),
    preset!("fig5_wavelength", "Carrier photoactivation at 637, 595, 561 and 532 nm"),
    preset!("figS3_scaling", "Torus growth under 0.95 mW 532 nm, 0.3 s to 199.5 s"),
    preset!("figS4_lowpower", "Torus growth under 0.24 mW 532 nm, 0.3 s to 199.5 s"),
    preset!(
        "figS11_double_capture",
        "Sequential double hole capture from a SiV2- dark background"
    ),
    preset!(
        "figS12_telegraph",
        "Bright/dark telegraph switching of one center with and without remote 532 nm"
    ),
];

/// Base model document referenced by a scenario's `base` key.
pub fn base_document(name: &str) -> Option<&'static str> {
    BASES.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn find(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}
