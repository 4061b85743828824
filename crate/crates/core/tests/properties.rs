use nalgebra::Matrix2;
use proptest::prelude::*;

use tumorstroma::experiments::{initial_condition, run_regime, ScenarioKind, SeedSpec, SplitMix64};
use tumorstroma::kinetics::JacobianSR;
use tumorstroma::model::{Field2D, HybridState};
use tumorstroma::pde::{
    run_simulation, taxis_divergence, taxis_face_fluxes, Coupling, GridSpec, SchemeConfig, TaxisMode,
};
use tumorstroma::spectral::{dispersion_matrix, growth_rate, Mobility2x2};
use tumorstroma::ModelParams;

fn field(n: usize, values: Vec<f64>) -> Field2D {
    Field2D::new(n, n, values).unwrap()
}

fn small_grid() -> GridSpec {
    GridSpec::unit_square(11, 1e-2, 0.3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    // Crank-Nicolson has no discrete maximum principle. At d_I dt / h^2 = 125
    // rough doses (nodal i.i.d. noise, sharp steps) ring and can overshoot this
    // bound by a few hundredths, so the property covers bumps and spikes only.
    #[test]
    fn drug_never_exceeds_decaying_supremum(
        seed in any::<u64>(),
        spike in any::<bool>(),
        amp in 0.1..3.0f64,
        s in 0.0..2.0f64,
    ) {
        let p = ModelParams::default();
        let mut rng = SplitMix64::new(seed);
        let i0 = if !spike {
            let (cx, cy, w) = (rng.next_unit(), rng.next_unit(), 0.05 + 0.3 * rng.next_unit());
            Field2D::from_fn(51, 51, |x, y| amp * (-((x - cx).powi(2) + (y - cy).powi(2)) / (w * w)).exp()).unwrap()
        } else {
            let mut f = Field2D::constant(51, 51, 0.0).unwrap();
            f.values_mut()[(rng.next_u64() % 2601) as usize] = amp;
            f
        };
        let max0 = i0.max();
        let c = |v| Field2D::constant(51, 51, v).unwrap();
        let st = HybridState::new(c(s), c(1.0), i0, c(1.0), c(0.0), None, 0.0).unwrap();
        let grid = GridSpec::unit_square(51, 1e-2, 1.0);
        let mut worst = f64::NEG_INFINITY;
        run_simulation(&st, &p, &grid, &SchemeConfig::default(), Coupling::Base, 1, |_, x| {
            worst = worst.max(x.i.max() - ((-x.t).exp() * max0 + 10.0 * grid.dt));
        }).unwrap();
        prop_assert!(worst <= 0.0, "excess {worst}");
    }

    #[test]
    fn truncated_fields_stay_nonnegative(
        s in proptest::collection::vec(0.0..2.0f64, 121),
        c in proptest::collection::vec(0.0..1.0f64, 121),
        chi in 0.0..0.5f64,
    ) {
        let p = ModelParams { chi_s_prime: chi, ..Default::default() };
        let u = |v| field(11, vec![v; 121]);
        let st = HybridState::new(field(11, s), u(1.0), u(0.5), u(1.0), u(0.0), Some(field(11, c)), 0.0).unwrap();
        let cfg = SchemeConfig { taxis_mode: TaxisMode::Linear, ..Default::default() };
        run_simulation(&st, &p, &small_grid(), &cfg, Coupling::Feedback, 1, |_, x| {
            for (name, f) in x.fields() {
                assert!(f.min() >= 0.0, "{name} went negative");
            }
        }).unwrap();
    }

    #[test]
    fn taxis_flux_is_mass_neutral(
        w in proptest::collection::vec(0.0..2.0f64, 81),
        c in proptest::collection::vec(0.0..1.0f64, 81),
        chi in 0.0..1.0f64,
        saturated in any::<bool>(),
    ) {
        let mode = if saturated { TaxisMode::Saturated } else { TaxisMode::Linear };
        let (w, c) = (field(9, w), field(9, c));
        let fluxes = taxis_face_fluxes(&w, &c, chi, mode, 100.0).unwrap();
        prop_assert_eq!(fluxes.max_boundary_flux(), 0.0);
        let div = taxis_divergence(&w, &c, chi, mode, 100.0).unwrap();
        let scale = div.values().iter().map(|v| v.abs()).fold(1.0, f64::max);
        prop_assert!(div.integral().abs() <= 1e-12 * scale, "net {}", div.integral());
    }

    #[test]
    fn growth_rate_matches_dense_eigensolver(
        j in proptest::array::uniform4(-2.0..2.0f64),
        m in proptest::array::uniform4(-1.0..1.0f64),
        mu in 0.0..1e3f64,
    ) {
        let jac = JacobianSR::from_entries(j[0], j[1], j[2], j[3]);
        let mob = Mobility2x2::new(m[0], m[1], m[2], m[3]);
        let a = dispersion_matrix(&jac, &mob, mu).unwrap();
        let dense = Matrix2::new(j[0] - mu * m[0], j[1] - mu * m[1], j[2] - mu * m[2], j[3] - mu * m[3]);
        let oracle = dense.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        let ours = growth_rate(&a);
        prop_assert!((ours - oracle).abs() <= 1e-9 * (1.0 + oracle.abs()), "{ours} vs {oracle}");
    }
}

#[test]
fn runs_are_bit_reproducible() {
    let p = ModelParams::default();
    let s = ScenarioKind::RegimeIIFeedbackSaturated;
    let grid = GridSpec::unit_square(21, 1e-2, 1.0);
    let bits = || {
        let run = run_regime(s, &p, &grid, &s.default_scheme(), &SeedSpec::default()).unwrap();
        let m = run.metrics;
        [m.e_s, m.e_r, m.e_i, m.spatial_std_s, m.max_s, m.max_c, m.conservation_error]
            .concat()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(), bits());
}

#[test]
fn seed_changes_the_initial_condition() {
    let p = ModelParams::default();
    let s = ScenarioKind::RegimeIBase;
    let grid = s.default_grid();
    let a = initial_condition(s, &p, &grid, &SeedSpec::new(1, 1e-3)).unwrap();
    let b = initial_condition(s, &p, &grid, &SeedSpec::new(2, 1e-3)).unwrap();
    let again = initial_condition(s, &p, &grid, &SeedSpec::new(1, 1e-3)).unwrap();
    assert_ne!(a.s.values(), b.s.values());
    assert_eq!(a.s.values(), again.s.values());
}
