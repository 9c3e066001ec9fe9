use std::collections::{BTreeMap, BTreeSet};

use crate::error::ModelError;
use crate::units::photon_energy;

use super::{Carrier, CarrierSpec, CrossSectionTable, ModelSpec, SpeciesSpec};

/// One (species, state) density slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub species: usize,
    pub state: usize,
    pub charge: i32,
    /// Brightness per readout channel (index into `ModelRegistry::channels`).
    pub brightness: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhotoChannel {
    pub species: usize,
    pub from: usize,
    pub to: usize,
    pub emits: Carrier,
    pub threshold_ev: f64,
    pub table: CrossSectionTable,
    pub two_photon: bool,
    pub reference_intensity: f64,
}

impl PhotoChannel {
    /// Cross section in cm² with the threshold gate applied.
    pub fn sigma(&self, wavelength_nm: f64) -> f64 {
        if photon_energy(wavelength_nm) < self.threshold_ev {
            0.0
        } else {
            self.table.lookup(wavelength_nm)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptureChannel {
    pub from: usize,
    pub to: usize,
    pub captures: Carrier,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReleaseChannel {
    pub from: usize,
    pub to: usize,
    pub releases: Carrier,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TunnelChannel {
    pub donor_from: usize,
    pub donor_to: usize,
    pub trap_empty: usize,
    pub trap_filled: usize,
    pub coefficient: f64,
    pub saturation_intensity: f64,
    pub band_nm: [f64; 2],
}

impl TunnelChannel {
    pub fn in_band(&self, wavelength_nm: f64) -> bool {
        wavelength_nm >= self.band_nm[0] && wavelength_nm <= self.band_nm[1]
    }
}

/// How a compiled transfer obtains its rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransferKind {
    /// Index into the per-cell photo-rate drive.
    Photo {
        channel: usize,
        emits: Carrier,
    },
    Capture {
        captures: Carrier,
        coefficient: f64,
    },
    Release {
        releases: Carrier,
        rate: f64,
    },
    /// Index into the per-cell excitation drive; also moves `trap_from -> trap_to`.
    Tunnel {
        channel: usize,
        trap_from: usize,
        trap_to: usize,
        coefficient: f64,
    },
}

/// A flux-form transfer `from -> to` between density slots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transfer {
    pub from: usize,
    pub to: usize,
    pub kind: TransferKind,
}

/// Validated, immutable model. Cheap to share between concurrent runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRegistry {
    spec: ModelSpec,
    slots: Vec<Slot>,
    species_offsets: Vec<usize>,
    channels: Vec<String>,
    photo: Vec<PhotoChannel>,
    capture: Vec<CaptureChannel>,
    release: Vec<ReleaseChannel>,
    tunnel: Vec<TunnelChannel>,
    transfers: Vec<Transfer>,
}

fn check_nonneg(value: f64, what: impl FnOnce() -> String) -> Result<(), ModelError> {
    if value.is_nan() || value < 0.0 {
        Err(ModelError::NegativeRate(what()))
    } else {
        Ok(())
    }
}

fn state_of(sp: &SpeciesSpec, label: &str) -> Result<usize, ModelError> {
    sp.state_index(label).ok_or_else(|| ModelError::UnknownState {
        species: sp.name.clone(),
        label: label.to_string(),
    })
}

impl ModelRegistry {
    pub fn validate(spec: &ModelSpec) -> Result<Self, ModelError> {
        validate_carriers(&spec.carriers)?;
        if spec.species.is_empty() {
            return Err(ModelError::Invalid("model has no species".into()));
        }

        let mut names = BTreeSet::new();
        for sp in &spec.species {
            if !names.insert(sp.name.as_str()) {
                return Err(ModelError::DuplicateLabel(sp.name.clone()));
            }
            validate_species(sp)?;
        }

        let channels: Vec<String> = spec
            .species
            .iter()
            .flat_map(|sp| sp.states.iter().flat_map(|s| s.brightness.keys().cloned()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();

        let mut slots = Vec::new();
        let mut species_offsets = Vec::new();
        for (si, sp) in spec.species.iter().enumerate() {
            species_offsets.push(slots.len());
            for (k, st) in sp.states.iter().enumerate() {
                let brightness = channels
                    .iter()
                    .map(|c| st.brightness.get(c).copied().unwrap_or(0.0))
                    .collect();
                slots.push(Slot {
                    species: si,
                    state: k,
                    charge: st.charge,
                    brightness,
                });
            }
        }

        let mut photo = Vec::new();
        let mut capture = Vec::new();
        let mut release = Vec::new();
        let mut tunnel = Vec::new();
        for (si, sp) in spec.species.iter().enumerate() {
            let base = species_offsets[si];
            for tr in &sp.photo {
                photo.push(PhotoChannel {
                    species: si,
                    from: base + state_of(sp, &tr.from)?,
                    to: base + state_of(sp, &tr.to)?,
                    emits: tr.emits,
                    threshold_ev: tr.threshold_ev,
                    table: tr.cross_section.clone(),
                    two_photon: tr.two_photon,
                    reference_intensity: tr.reference_intensity,
                });
            }
            for ch in &sp.capture {
                capture.push(CaptureChannel {
                    from: base + state_of(sp, &ch.from)?,
                    to: base + state_of(sp, &ch.to)?,
                    captures: ch.captures,
                    coefficient: ch.coefficient,
                });
            }
            if let Some(trap) = &sp.trap {
                release.push(ReleaseChannel {
                    from: base + 1,
                    to: base,
                    releases: trap.releases,
                    rate: 1.0 / trap.release_lifetime,
                });
                if let Some(tun) = &trap.tunneling {
                    let (di, donor) = spec
                        .species
                        .iter()
                        .enumerate()
                        .find(|(_, d)| d.name == tun.donor)
                        .ok_or_else(|| ModelError::UnknownSpecies(tun.donor.clone()))?;
                    let dfrom = state_of(donor, &tun.donor_from)?;
                    let dto = state_of(donor, &tun.donor_to)?;
                    let dq = donor.states[dto].charge - donor.states[dfrom].charge;
                    let tq = sp.states[1].charge - sp.states[0].charge;
                    if dq + tq != 0 {
                        return Err(ModelError::Invalid(format!(
                            "tunneling {}:{}->{} into {} does not conserve charge",
                            donor.name, tun.donor_from, tun.donor_to, sp.name
                        )));
                    }
                    tunnel.push(TunnelChannel {
                        donor_from: species_offsets[di] + dfrom,
                        donor_to: species_offsets[di] + dto,
                        trap_empty: base,
                        trap_filled: base + 1,
                        coefficient: tun.coefficient,
                        saturation_intensity: tun.saturation_intensity,
                        band_nm: tun.band_nm,
                    });
                }
            }
        }

        let mut transfers = Vec::new();
        for (i, p) in photo.iter().enumerate() {
            transfers.push(Transfer {
                from: p.from,
                to: p.to,
                kind: TransferKind::Photo {
                    channel: i,
                    emits: p.emits,
                },
            });
        }
        for c in &capture {
            transfers.push(Transfer {
                from: c.from,
                to: c.to,
                kind: TransferKind::Capture {
                    captures: c.captures,
                    coefficient: c.coefficient,
                },
            });
        }
        for r in &release {
            transfers.push(Transfer {
                from: r.from,
                to: r.to,
                kind: TransferKind::Release {
                    releases: r.releases,
                    rate: r.rate,
                },
            });
        }
        for (i, t) in tunnel.iter().enumerate() {
            transfers.push(Transfer {
                from: t.donor_from,
                to: t.donor_to,
                kind: TransferKind::Tunnel {
                    channel: i,
                    trap_from: t.trap_empty,
                    trap_to: t.trap_filled,
                    coefficient: t.coefficient,
                },
            });
        }

        Ok(ModelRegistry {
            spec: spec.clone(),
            slots,
            species_offsets,
            channels,
            photo,
            capture,
            release,
            tunnel,
            transfers,
        })
    }

    /// The validated description this registry was built from.
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn carriers(&self) -> &CarrierSpec {
        &self.spec.carriers
    }

    pub fn species(&self) -> &[SpeciesSpec] {
        &self.spec.species
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }

    pub fn photo_channels(&self) -> &[PhotoChannel] {
        &self.photo
    }

    pub fn capture_channels(&self) -> &[CaptureChannel] {
        &self.capture
    }

    pub fn release_channels(&self) -> &[ReleaseChannel] {
        &self.release
    }

    pub fn tunnel_channels(&self) -> &[TunnelChannel] {
        &self.tunnel
    }

    pub fn transfers(&self) -> &[Transfer] {
        &self.transfers
    }

    pub fn species_index(&self, name: &str) -> Option<usize> {
        self.spec.species.iter().position(|s| s.name == name)
    }

    /// Slot index for `species:label`.
    pub fn slot_index(&self, species: &str, label: &str) -> Option<usize> {
        let si = self.species_index(species)?;
        let k = self.spec.species[si].state_index(label)?;
        Some(self.species_offsets[si] + k)
    }

    /// Range of slots belonging to species `si`.
    pub fn species_slots(&self, si: usize) -> std::ops::Range<usize> {
        let start = self.species_offsets[si];
        start..start + self.spec.species[si].states.len()
    }

    /// Human-readable `species:state` name of a slot.
    pub fn slot_name(&self, slot: usize) -> String {
        let s = &self.slots[slot];
        let sp = &self.spec.species[s.species];
        format!("{}:{}", sp.name, sp.states[s.state].label)
    }

    /// Initial occupation fractions per slot.
    pub fn initial_fractions(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.slots.len()];
        for (si, sp) in self.spec.species.iter().enumerate() {
            let base = self.species_offsets[si];
            if sp.initial.is_empty() {
                out[base] = 1.0;
            } else {
                for (label, frac) in &sp.initial {
                    // labels were checked during validation
                    out[base + sp.state_index(label).unwrap()] = *frac;
                }
            }
        }
        out
    }
}

fn validate_carriers(c: &CarrierSpec) -> Result<(), ModelError> {
    check_nonneg(c.hole_diffusion, || "carriers.hole_diffusion".into())?;
    check_nonneg(c.electron_diffusion, || "carriers.electron_diffusion".into())?;
    check_nonneg(c.hole_mobility, || "carriers.hole_mobility".into())?;
    check_nonneg(c.electron_mobility, || "carriers.electron_mobility".into())?;
    if !(c.relative_permittivity > 0.0) {
        return Err(ModelError::config("carriers.relative_permittivity", "must be positive"));
    }
    Ok(())
}

fn validate_species(sp: &SpeciesSpec) -> Result<(), ModelError> {
    let name = &sp.name;
    if sp.concentration_ppb.is_nan() || sp.concentration_ppb < 0.0 {
        return Err(ModelError::config(
            format!("species.{name}.concentration_ppb"),
            "must be non-negative",
        ));
    }
    if sp.states.is_empty() {
        return Err(ModelError::Invalid(format!("species `{name}` has no states")));
    }
    let mut labels = BTreeSet::new();
    for st in &sp.states {
        if !labels.insert(st.label.as_str()) {
            return Err(ModelError::DuplicateLabel(format!("{name}:{}", st.label)));
        }
        for (ch, b) in &st.brightness {
            if b.is_nan() || *b < 0.0 {
                return Err(ModelError::config(
                    format!("species.{name}.states.{}.brightness.{ch}", st.label),
                    "must be non-negative",
                ));
            }
        }
    }

    for tr in &sp.photo {
        let from = state_of(sp, &tr.from)?;
        let to = state_of(sp, &tr.to)?;
        if from == to {
            return Err(ModelError::Invalid(format!(
                "photo-transition {name}:{} maps a state onto itself",
                tr.from
            )));
        }
        if !(tr.threshold_ev > 0.0) {
            return Err(ModelError::config(
                format!("species.{name}.photo.threshold_ev"),
                "must be positive",
            ));
        }
        if !(tr.reference_intensity > 0.0) {
            return Err(ModelError::config(
                format!("species.{name}.photo.reference_intensity"),
                "must be positive",
            ));
        }
        let expected = sp.states[from].charge - tr.emits.charge();
        if sp.states[to].charge != expected {
            return Err(ModelError::Invalid(format!(
                "photo-transition {name}:{}->{} emitting a {:?} must change charge by {}",
                tr.from,
                tr.to,
                tr.emits,
                -tr.emits.charge()
            )));
        }
        let mut last = 0.0;
        for entry in &tr.cross_section.0 {
            let [wl, sigma] = *entry;
            if !(wl > last) {
                return Err(ModelError::config(
                    format!("species.{name}.photo.cross_section"),
                    "wavelengths must be positive and strictly increasing",
                ));
            }
            last = wl;
            check_nonneg(sigma, || format!("cross section of {name}:{}->{}", tr.from, tr.to))?;
            let e = photon_energy(wl);
            if sigma > 0.0 && e < tr.threshold_ev {
                return Err(ModelError::ThresholdViolation {
                    species: name.clone(),
                    from: tr.from.clone(),
                    to: tr.to.clone(),
                    wavelength_nm: wl,
                    photon_ev: e,
                    threshold_ev: tr.threshold_ev,
                });
            }
        }
    }

    for ch in &sp.capture {
        let from = state_of(sp, &ch.from)?;
        let to = state_of(sp, &ch.to)?;
        if from == to {
            return Err(ModelError::Invalid(format!(
                "capture {name}:{} maps a state onto itself",
                ch.from
            )));
        }
        check_nonneg(ch.coefficient, || format!("capture coefficient of {name}:{}", ch.from))?;
        if sp.states[to].charge != sp.states[from].charge + ch.captures.charge() {
            return Err(ModelError::Invalid(format!(
                "capture {name}:{}->{} of a {:?} must change charge by {}",
                ch.from,
                ch.to,
                ch.captures,
                ch.captures.charge()
            )));
        }
    }

    if let Some(trap) = &sp.trap {
        if sp.states.len() != 2 {
            return Err(ModelError::Invalid(format!(
                "trap species `{name}` must have exactly two states (empty, filled)"
            )));
        }
        if !(trap.release_lifetime > 0.0) {
            return Err(ModelError::config(
                format!("species.{name}.trap.release_lifetime"),
                "must be positive",
            ));
        }
        if sp.states[0].charge != sp.states[1].charge - trap.releases.charge() {
            return Err(ModelError::Invalid(format!(
                "trap `{name}` release of a {:?} must change charge by {}",
                trap.releases,
                -trap.releases.charge()
            )));
        }
        if let Some(t) = &trap.tunneling {
            check_nonneg(t.coefficient, || format!("tunneling coefficient of {name}"))?;
            if !(t.saturation_intensity > 0.0) || !(t.band_nm[0] <= t.band_nm[1]) {
                return Err(ModelError::config(
                    format!("species.{name}.trap.tunneling"),
                    "saturation_intensity must be positive and band_nm ordered",
                ));
            }
        }
    }

    if !sp.initial.is_empty() {
        let mut total = 0.0;
        let known: BTreeMap<&str, ()> = sp.states.iter().map(|s| (s.label.as_str(), ())).collect();
        for (label, frac) in &sp.initial {
            if !known.contains_key(label.as_str()) {
                return Err(ModelError::UnknownState {
                    species: name.clone(),
                    label: label.clone(),
                });
            }
            if !(*frac >= 0.0) {
                return Err(ModelError::config(
                    format!("species.{name}.initial.{label}"),
                    "must be non-negative",
                ));
            }
            total += frac;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(ModelError::config(
                format!("species.{name}.initial"),
                format!("fractions sum to {total}, expected 1"),
            ));
        }
    }
    Ok(())
}
