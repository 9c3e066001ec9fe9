//! Unit conventions and conversions.
//!
//! Lengths are in µm, times in s, defect and carrier densities in µm⁻³,
//! optical power in mW and intensity in mW/µm². Photo-ionization cross
//! sections are tabulated in cm² and capture coefficients in µm³/s.

/// hc in eV·nm.
pub const HC_EV_NM: f64 = 1239.84;

/// Elementary charge in C.
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;

/// Vacuum permittivity in F/m.
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;

/// Default host atom density of diamond, atoms/cm³.
pub const DIAMOND_ATOM_DENSITY: f64 = 1.763e23;

const CM2_TO_UM2: f64 = 1e8;

/// Photon energy in eV for a vacuum wavelength in nm.
pub fn photon_energy(wavelength_nm: f64) -> f64 {
    HC_EV_NM / wavelength_nm
}

/// Converts a number fraction in ppb of host atoms to a density in µm⁻³.
pub fn ppb_to_density(ppb: f64, host_atom_density: f64) -> f64 {
    ppb * 1e-9 * host_atom_density * 1e-12
}

/// Photon flux in photons/(µm²·s) for an intensity in mW/µm².
pub fn photon_flux(intensity: f64, wavelength_nm: f64) -> f64 {
    intensity * 1e-3 / (photon_energy(wavelength_nm) * ELEMENTARY_CHARGE)
}

/// Converts a cross section in cm² to µm².
pub fn cm2_to_um2(sigma_cm2: f64) -> f64 {
    sigma_cm2 * CM2_TO_UM2
}

/// e/(ε₀ε_r) expressed in V·µm, so that ∇²φ [V/µm²] = −K·ρ [e/µm³].
pub fn poisson_constant(relative_permittivity: f64) -> f64 {
    ELEMENTARY_CHARGE / (VACUUM_PERMITTIVITY * relative_permittivity) * 1e6
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn photon_energies() {
        assert!((photon_energy(532.0) - 2.3305).abs() < 1e-3);
        assert!((photon_energy(575.0) - 2.1562).abs() < 1e-3);
        let e637 = photon_energy(637.0);
        assert!((e637 - 1.9464).abs() < 1e-3);
        assert!(e637 > 1.7);
        assert!(photon_energy(857.0) < 1.5);
    }

    #[test]
    fn ppb_conversion() {
        assert_eq!(ppb_to_density(0.0, DIAMOND_ATOM_DENSITY), 0.0);
        // 30e-9 * 1.763e23 * 1e-12 = 5289
        assert!((ppb_to_density(30.0, DIAMOND_ATOM_DENSITY) - 5289.0).abs() < 1e-9);
        assert!((ppb_to_density(0.03, DIAMOND_ATOM_DENSITY) - 5.289).abs() < 1e-12);
    }

    #[test]
    fn flux_scales_with_wavelength() {
        let a = photon_flux(1.0, 532.0);
        let b = photon_flux(1.0, 1064.0);
        assert!((b / a - 2.0).abs() < 1e-12);
    }
}
