//! Property tests for the engine and analysis invariants.

use dcsim_core::analysis::{
    e_folding_rate, fit_power_law, fit_rate_vs_power, radial_profile, torus_edge_radius, RadialProfile, Threshold,
};
use dcsim_core::model::GridSpec;
use dcsim_core::photophysics::Beam;
use dcsim_core::protocol::io::{decode_dcs1, encode_dcs1};
use dcsim_core::protocol::{ReadoutImage, ReadoutMode};
use dcsim_core::scenario::load_scenario;
use dcsim_core::stochastic::{estimate_occupancy, gillespie_simulate, histogram, TelegraphModel};
use dcsim_core::transport::{carrier_macrostep, diffuse, Boundary, EngineSettings, TransportScratch};
use dcsim_core::SimulationState;
use proptest::prelude::*;

fn image(nx: usize, pixels: Vec<f64>) -> ReadoutImage {
    let g = GridSpec::new(nx, nx, 0.25);
    ReadoutImage {
        channel: "SiV0".into(),
        label: "img".into(),
        nx,
        ny: nx,
        pitch: g.dx,
        origin: [g.x(0), g.y(0)],
        pixels,
        beam: Beam::new(857.0, 0.29, 0.45),
        mode: ReadoutMode::Ideal,
        timestamp: 0.0,
    }
}

fn decreasing_profile(values: Vec<f64>) -> RadialProfile {
    let mut v = values;
    v.sort_by(|a, b| b.total_cmp(a));
    v.push(0.0);
    RadialProfile {
        center: [0.0, 0.0],
        radii: (0..v.len()).map(|i| 0.25 * i as f64).collect(),
        pixels: vec![1; v.len()],
        values: v,
    }
}

const TINY: &str = r#"
schema_version = 1
name = "tiny"
base = "default"
overrides = ["grid.nx=16", "grid.ny=16"]
"#;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn power_law_is_scale_equivariant(n in 1.2f64..6.0, d in 0.05f64..20.0, c in 0.1f64..10.0) {
        let t: Vec<f64> = (0..10).map(|i| 0.5 * 1.6f64.powi(i)).collect();
        let r: Vec<f64> = t.iter().map(|t| d.sqrt() * t.powf(1.0 / n)).collect();
        let scaled: Vec<f64> = r.iter().map(|v| v * c).collect();
        let (a, b) = (fit_power_law(&t, &r, None).unwrap(), fit_power_law(&t, &scaled, None).unwrap());
        prop_assert!((a.n - n).abs() < 1e-8 * n);
        prop_assert!((b.n - a.n).abs() < 1e-8 * n);
        prop_assert!((b.d / a.d - c * c).abs() < 1e-8 * c * c);
    }

    #[test]
    fn fixed_exponent_fit_recovers_prefactor(n in 1.5f64..5.0, d in 0.1f64..10.0) {
        let t: Vec<f64> = (1..8).map(|i| i as f64).collect();
        let r: Vec<f64> = t.iter().map(|t| d.sqrt() * t.powf(1.0 / n)).collect();
        let f = fit_power_law(&t, &r, Some(n)).unwrap();
        prop_assert!(f.fixed_n && (f.d - d).abs() < 1e-9 * d);
    }

    #[test]
    fn edge_radius_shrinks_as_threshold_rises(values in prop::collection::vec(0.1f64..50.0, 3..30), lo in 0.05f64..0.5, step in 0.01f64..0.4) {
        let p = decreasing_profile(values);
        let hi = (lo + step).min(0.99);
        let a = torus_edge_radius(&p, Threshold::Fraction(lo)).unwrap();
        let b = torus_edge_radius(&p, Threshold::Fraction(hi)).unwrap();
        prop_assert!(b <= a + 1e-12);
        prop_assert!(a >= 0.0 && a <= *p.radii.last().unwrap());
    }

    #[test]
    fn uniform_image_profile_is_flat(level in 0.0f64..100.0, nx in 8usize..40) {
        let img = image(nx, vec![level; nx * nx]);
        let p = radial_profile(&img, [0.0, 0.0], 0.25).unwrap();
        prop_assert!(p.values.iter().all(|v| (v - level).abs() <= 1e-12 * level.max(1.0)));
    }

    #[test]
    fn linear_fit_is_exact_on_lines(m in -50.0f64..50.0, b in -10.0f64..10.0) {
        let x: Vec<f64> = (0..6).map(|i| 0.2 + i as f64).collect();
        let y: Vec<f64> = x.iter().map(|x| m * x + b).collect();
        let f = fit_rate_vs_power(&x, &y).unwrap();
        prop_assert!((f.slope - m).abs() < 1e-9 * (1.0 + m.abs()));
        prop_assert!((f.intercept - b).abs() < 1e-8 * (1.0 + b.abs() + m.abs()));
    }

    #[test]
    fn e_folding_of_dense_exponential(k in 0.1f64..100.0, y0 in 0.5f64..50.0) {
        let t: Vec<f64> = (0..4000).map(|i| i as f64 * 3.0 / k / 4000.0).collect();
        let y: Vec<f64> = t.iter().map(|t| y0 * (-k * t).exp()).collect();
        let r = e_folding_rate(&t, &y, 0.0).unwrap();
        prop_assert!((r - k).abs() < 1e-3 * k);
    }

    #[test]
    fn dcs1_round_trips(nx in 1usize..12, ny in 1usize..12, planes in 1usize..4, seed in any::<u64>()) {
        let data: Vec<Vec<f64>> = (0..planes)
            .map(|p| (0..nx * ny).map(|i| f64::from_bits(seed.rotate_left((i + p) as u32 % 64) ^ i as u64) ).collect())
            .collect();
        let refs: Vec<&[f64]> = data.iter().map(|p| p.as_slice()).collect();
        let bytes = encode_dcs1(nx, ny, &refs).unwrap();
        let back = decode_dcs1(&bytes).unwrap();
        prop_assert_eq!((back.nx, back.ny), (nx, ny));
        for (a, b) in back.planes.iter().zip(&data) {
            prop_assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn reflecting_diffusion_conserves_mass_and_absorbing_loses_it(seed in any::<u64>(), d in 0.1f64..5.0, t in 0.01f64..2.0) {
        let g = GridSpec::new(12, 12, 0.5);
        let field: Vec<f64> = (0..g.cells()).map(|i| ((seed >> (i % 60)) & 7) as f64).collect();
        let total: f64 = field.iter().sum();
        let mut scratch = TransportScratch::default();
        let mut f = field.clone();
        diffuse(&mut f, &g, d, t, Boundary::Reflecting, &mut scratch);
        prop_assert!((f.iter().sum::<f64>() - total).abs() <= 1e-10 * total.max(1.0));
        prop_assert!(f.iter().all(|v| *v >= 0.0));
        let mut f = field;
        let lost = diffuse(&mut f, &g, d, t, Boundary::Absorbing, &mut scratch);
        let left: f64 = f.iter().sum::<f64>() * g.dx * g.dx;
        prop_assert!(lost >= 0.0);
        prop_assert!((left + lost - total * g.dx * g.dx).abs() <= 1e-10 * total.max(1.0));
    }

    #[test]
    fn telegraph_is_seed_deterministic(seed in any::<u64>(), kbd in 0.2f64..5.0, kdb in 0.2f64..5.0) {
        let model = TelegraphModel { bright_to_dark: kbd, dark_to_bright: kdb, ..TelegraphModel::symmetric(1.0, 20.0) };
        let a = gillespie_simulate(&model, 50.0, seed);
        prop_assert_eq!(&a, &gillespie_simulate(&model, 50.0, seed));
        prop_assert!(a.times.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(a.bright_time(0.0, 50.0) >= 0.0 && a.bright_time(0.0, 50.0) <= 50.0);
        let h = histogram(&a, &model, 0.1, 5, seed);
        prop_assert_eq!(h, histogram(&a, &model, 0.1, 5, seed));
        if let Ok(o) = estimate_occupancy(&a) {
            prop_assert!((0.0..=1.0).contains(&o.bright_fraction) && o.stderr >= 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn illumination_conserves_species_and_carriers(power in 0.05f64..3.0, wavelength in 500.0f64..900.0, duration in 0.01f64..0.5) {
        let sc = load_scenario(TINY, &[]).unwrap().scenario;
        let reg = sc.registry().unwrap();
        let mut st = SimulationState::uniform(&reg, sc.grid);
        let settings = EngineSettings::default();
        carrier_macrostep(&mut st, &reg, &[Beam::new(wavelength, power, 0.35)], duration, &settings).unwrap();
        prop_assert!(st.species_conservation_error(&reg) < 1e-10);
        prop_assert!(st.defects.iter().chain(&st.electrons).chain(&st.holes).all(|v| *v >= 0.0));
        let flight = st.carriers_in_flight();
        for (k, in_flight) in flight.iter().enumerate() {
            let scale = st.ledger.created[k].max(1e-30);
            prop_assert!((in_flight - st.ledger.net(k)).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn override_changes_hash_and_is_recorded(nx in 8usize..64) {
        let a = load_scenario(TINY, &[]).unwrap();
        let b = load_scenario(TINY, &[format!("grid.nx={nx}")]).unwrap();
        prop_assert_eq!(b.scenario.grid.nx, nx);
        prop_assert_eq!(a.hash == b.hash, nx == 16);
    }
}
