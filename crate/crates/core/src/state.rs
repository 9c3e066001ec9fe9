//! Grid state: per-cell defect slot densities, carrier fields, potential and clock.

use sha2::{Digest, Sha256};

use crate::model::{GridSpec, ModelRegistry};
use crate::photophysics::cell_charge;

/// Cumulative carrier bookkeeping, in carriers per µm of slab thickness
/// (Σ density · dx²). Index 0 is electrons, index 1 holes.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CarrierLedger {
    pub created: [f64; 2],
    pub captured: [f64; 2],
    pub absorbed: [f64; 2],
}

impl CarrierLedger {
    /// created − captured − absorbed, which must equal the carriers in flight
    /// minus the carriers present at the start.
    pub fn net(&self, carrier: usize) -> f64 {
        self.created[carrier] - self.captured[carrier] - self.absorbed[carrier]
    }
}

/// Engine diagnostics accumulated over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Diagnostics {
    pub carrier_steps: u64,
    pub kinetics_substeps: u64,
    pub clamped_substeps: u64,
    pub poisson_iterations: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationState {
    pub grid: GridSpec,
    slots: usize,
    /// Cell-major: `defects[cell * slots + slot]`, µm⁻³.
    pub defects: Vec<f64>,
    /// Row-major `iy * nx + ix`, µm⁻³.
    pub electrons: Vec<f64>,
    pub holes: Vec<f64>,
    /// V; present once a space-charge solve has run.
    pub potential: Option<Vec<f64>>,
    /// Protocol time, s.
    pub time: f64,
    pub ledger: CarrierLedger,
    pub diagnostics: Diagnostics,
}

impl SimulationState {
    /// Uniform initial state from the species' initial fractions.
    pub fn uniform(registry: &ModelRegistry, grid: GridSpec) -> Self {
        let fractions = registry.initial_fractions();
        let cell: Vec<f64> = registry
            .slots()
            .iter()
            .zip(&fractions)
            .map(|(s, f)| f * grid.density_of(registry.species()[s.species].concentration_ppb))
            .collect();
        let cells = grid.cells();
        let mut defects = Vec::with_capacity(cells * cell.len());
        for _ in 0..cells {
            defects.extend_from_slice(&cell);
        }
        SimulationState {
            grid,
            slots: cell.len(),
            defects,
            electrons: vec![0.0; cells],
            holes: vec![0.0; cells],
            potential: None,
            time: 0.0,
            ledger: CarrierLedger::default(),
            diagnostics: Diagnostics::default(),
        }
    }

    pub fn slot_count(&self) -> usize {
        self.slots
    }

    pub fn cells(&self) -> usize {
        self.grid.cells()
    }

    pub fn cell_index(&self, ix: usize, iy: usize) -> usize {
        iy * self.grid.nx + ix
    }

    pub fn cell(&self, c: usize) -> &[f64] {
        &self.defects[c * self.slots..(c + 1) * self.slots]
    }

    pub fn cell_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.defects[c * self.slots..(c + 1) * self.slots]
    }

    /// Density plane of one slot, row-major.
    pub fn slot_plane(&self, slot: usize) -> Vec<f64> {
        self.defects.iter().skip(slot).step_by(self.slots).copied().collect()
    }

    /// Σ over cells of the species total, per species (µm⁻³ summed over cells).
    pub fn species_totals(&self, registry: &ModelRegistry) -> Vec<f64> {
        let mut totals = vec![0.0; registry.species().len()];
        for c in 0..self.cells() {
            for (slot, n) in registry.slots().iter().zip(self.cell(c)) {
                totals[slot.species] += n;
            }
        }
        totals
    }

    /// Largest deviation, relative to the nominal total, of any cell's species
    /// sum from its nominal density.
    pub fn species_conservation_error(&self, registry: &ModelRegistry) -> f64 {
        let nominal: Vec<f64> = registry
            .species()
            .iter()
            .map(|s| self.grid.density_of(s.concentration_ppb))
            .collect();
        let mut sums = vec![0.0; nominal.len()];
        let mut worst: f64 = 0.0;
        for c in 0..self.cells() {
            sums.iter_mut().for_each(|v| *v = 0.0);
            for (slot, n) in registry.slots().iter().zip(self.cell(c)) {
                sums[slot.species] += n;
            }
            for (s, n0) in sums.iter().zip(&nominal) {
                if *n0 > 0.0 {
                    worst = worst.max((s - n0).abs() / n0);
                }
            }
        }
        worst
    }

    /// Net charge density per cell, e/µm³.
    pub fn charge_density(&self, registry: &ModelRegistry) -> Vec<f64> {
        (0..self.cells())
            .map(|c| cell_charge(registry, self.cell(c), &[self.electrons[c], self.holes[c]]))
            .collect()
    }

    /// Total carriers in flight, per µm of slab thickness.
    pub fn carriers_in_flight(&self) -> [f64; 2] {
        let area = self.grid.dx * self.grid.dx;
        [
            self.electrons.iter().sum::<f64>() * area,
            self.holes.iter().sum::<f64>() * area,
        ]
    }

    /// Largest carrier density of either type.
    pub fn max_carrier_density(&self) -> f64 {
        self.electrons.iter().chain(&self.holes).copied().fold(0.0, f64::max)
    }

    /// SHA-256 over the raw bits of every field that physics can change.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.grid.nx as u64).to_le_bytes());
        h.update((self.grid.ny as u64).to_le_bytes());
        h.update(self.time.to_le_bytes());
        for plane in [&self.defects, &self.electrons, &self.holes] {
            for v in plane.iter() {
                h.update(v.to_le_bytes());
            }
        }
        if let Some(p) = &self.potential {
            for v in p {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
