use std::f64::consts::PI;

use proptest::prelude::*;
use stepflow_core::analysis::{stability_probe, weighted_l2_diff};
use stepflow_core::continuum::{height_energy, height_rhs, mu_of_height, null_lagrangian, phi_rhs};
use stepflow_core::geometry::{
    height_to_density, height_to_phi, height_to_u, phi_to_height, sample_step_train, DomainParams,
    HeightField, StepTrain,
};
use stepflow_core::hilbert_quadrature::{
    hilbert_spectral, log_sin_double_integral, PeriodicSamples,
};
use stepflow_core::mesoscopic::{
    discrete_energy_for, dissipation_rate, ode_rhs, IntegratorOptions, PotentialVariant,
};

fn sup(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Three Fourier modes with coefficient magnitudes summing to at most `max_amp`.
fn modes(max_amp: f64) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-1.0..1.0f64, 0.0..(2.0 * PI)), 3).prop_map(move |v| {
        let total: f64 = v.iter().map(|c| c.0.abs()).sum::<f64>().max(1e-12);
        v.into_iter()
            .map(|(c, t)| (c * max_amp / total.max(1.0), t))
            .collect()
    })
}

fn height(length: f64, m: usize, coeffs: &[(f64, f64)]) -> HeightField {
    let p = (0..m)
        .map(|j| {
            let x = j as f64 * length / m as f64;
            coeffs
                .iter()
                .enumerate()
                .map(|(k, (c, t))| {
                    let w = 2.0 * PI * (k + 1) as f64;
                    c * (w * x / length + t).sin() / w
                })
                .sum()
        })
        .collect();
    HeightField::new(length, p, 0.0)
        .unwrap()
        .with_tight_beta()
        .unwrap()
}

fn train(n: usize, offset: f64, jitter: &[f64]) -> StepTrain {
    let params = DomainParams::new(1.0, n).unwrap();
    let h = 1.0 / n as f64;
    let x = (0..n)
        .map(|i| offset + (i as f64 + 0.3 * jitter[i % jitter.len()]) * h)
        .collect();
    StepTrain::new(params, x, 0.0).unwrap()
}

fn jitter() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, 64)
}

fn samples(length: f64, m: usize, coeffs: &[(f64, f64)]) -> PeriodicSamples {
    PeriodicSamples::from_fn(length, m, |x| {
        coeffs
            .iter()
            .enumerate()
            .map(|(k, (c, t))| c * (2.0 * PI * k as f64 * x / length + t).cos())
            .sum()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 24,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn height_phi_round_trip(l in 0.5..3.0f64, c in modes(0.3)) {
        // three modes at 30% slope modulation are resolved to rounding at 128 points
        let h = height(l, 128, &c);
        let back = phi_to_height(&height_to_phi(&h, 128).unwrap(), 128).unwrap();
        prop_assert!(sup(h.periodic_part(), back.periodic_part()) <= 1e-10);
    }

    #[test]
    fn density_and_potential_normalisation(l in 0.5..3.0f64, c in modes(0.5)) {
        let h = height(l, 64, &c);
        let rho = height_to_density(&h).unwrap();
        let mass = rho.iter().sum::<f64>() * l / 64.0;
        prop_assert!((mass - 1.0).abs() <= 1e-12);
        let u = height_to_u(&h).unwrap();
        prop_assert!((u.iter().sum::<f64>() / 64.0).abs() <= 1e-12);
    }

    #[test]
    fn sampled_trains_are_ordered(c in modes(0.8), n in 1usize..=1024) {
        let h = height(1.0, 128, &c);
        let s = sample_step_train(&height_to_phi(&h, 128).unwrap(), n).unwrap();
        prop_assert!(s.spacings().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn hilbert_is_mean_free_and_squares_to_minus_identity(l in 0.5..3.0f64, c in modes(1.0), c0 in -2.0..2.0f64) {
        let mut coeffs = vec![(c0, 0.0)];
        coeffs.extend(c);
        let u = samples(l, 32, &coeffs);
        let hu = hilbert_spectral(&u);
        prop_assert!(hu.values().iter().sum::<f64>().abs() <= 1e-12);
        let hh = hilbert_spectral(&hu);
        let mean = u.values().iter().sum::<f64>() / 32.0;
        for (a, b) in hh.values().iter().zip(u.values()) {
            prop_assert!((a + b - mean).abs() <= 1e-10);
        }
        let constant = hilbert_spectral(&PeriodicSamples::new(l, vec![c0; 32]).unwrap());
        prop_assert!(constant.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn log_sin_integral_is_symmetric(l in 0.5..3.0f64, f in modes(1.0), g in modes(1.0)) {
        let (f, g) = (samples(l, 64, &f), samples(l, 64, &g));
        let fg = log_sin_double_integral(&f, &g).unwrap();
        let gf = log_sin_double_integral(&g, &f).unwrap();
        prop_assert!((fg - gf).abs() <= 1e-12 * fg.abs().max(1.0));
    }

    #[test]
    fn translation_invariance(n in 4usize..40, jit in jitter(), shift in -2.0..2.0f64) {
        let s = train(n, 0.1, &jit);
        let t = s.translated(shift);
        for v in [PotentialVariant::Standard, PotentialVariant::Corrected] {
            let (e0, e1) = (discrete_energy_for(&s, v).unwrap(), discrete_energy_for(&t, v).unwrap());
            prop_assert!((e0 - e1).abs() <= 1e-12 * e0.abs().max(1.0));
            let (d0, d1) = (dissipation_rate(&s, v).unwrap(), dissipation_rate(&t, v).unwrap());
            prop_assert!((d0 - d1).abs() <= 1e-12 * d0.abs().max(1.0));
            let (r0, r1) = (ode_rhs(&s, v).unwrap(), ode_rhs(&t, v).unwrap());
            let scale = r0.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            prop_assert!(sup(&r0, &r1) <= 1e-12 * scale);
        }
        prop_assert!((t.spacings().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn weighted_norm_triangle_inequality(n in 4usize..40, a in jitter(), b in jitter(), c in jitter()) {
        let (x, y, z) = (train(n, 0.0, &a), train(n, 0.0, &b), train(n, 0.0, &c));
        let xz = weighted_l2_diff(&x, z.positions()).unwrap();
        let xy = weighted_l2_diff(&x, y.positions()).unwrap();
        let yz = weighted_l2_diff(&y, z.positions()).unwrap();
        prop_assert!(xz <= xy + yz + 1e-12);
        prop_assert!((xy - weighted_l2_diff(&y, x.positions()).unwrap()).abs() <= 1e-15);
    }

    #[test]
    fn continuum_flows_conserve_the_mean(l in 0.5..3.0f64, c in modes(0.3)) {
        let h = height(l, 64, &c);
        let ht = height_rhs(&h).unwrap();
        let scale = ht.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        prop_assert!((ht.iter().sum::<f64>() / 64.0).abs() <= 1e-10 * scale);
        let qt = phi_rhs(&height_to_phi(&h, 64).unwrap()).unwrap();
        let scale = qt.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        prop_assert!((qt.iter().sum::<f64>() / 64.0).abs() <= 1e-10 * scale);
    }

    #[test]
    fn mu_is_the_height_gradient(l in 0.5..3.0f64, c in modes(0.3), d in modes(1.0)) {
        let h = height(l, 64, &c);
        let dir = samples(l, 64, &d);
        let mu = mu_of_height(&h).unwrap();
        let inner = mu.iter().zip(dir.values()).map(|(a, b)| a * b).sum::<f64>() * l / 64.0;
        let eps = 1e-6;
        let shifted = |s: f64| {
            let p = h.periodic_part().iter().zip(dir.values()).map(|(p, v)| p + s * v).collect();
            height_energy(&HeightField::new(l, p, 0.0).unwrap()).unwrap()
        };
        let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
        prop_assert!((fd - inner).abs() <= 1e-4 * inner.abs().max(1.0), "{} vs {}", fd, inner);
    }

    #[test]
    fn null_lagrangian_ignores_mean_free_perturbations(l in 0.5..3.0f64, c in modes(0.3), d in modes(0.2)) {
        let h = height(l, 64, &c);
        let w0 = null_lagrangian(&h).unwrap();
        let bump = samples(l, 64, &d);
        let mean = bump.values().iter().sum::<f64>() / 64.0;
        let p = h.periodic_part().iter().zip(bump.values()).map(|(p, v)| p + 0.01 * (v - mean)).collect();
        let w1 = null_lagrangian(&HeightField::new(l, p, 0.0).unwrap()).unwrap();
        prop_assert!((w1 - w0).abs() <= 1e-10);
    }

    #[test]
    fn zero_perturbation_has_unit_growth(n in 4usize..24, jit in jitter()) {
        let s = train(n, 0.0, &jit);
        let g = stability_probe(&s, &vec![0.0; n], 1e-4, PotentialVariant::Standard, &IntegratorOptions::default()).unwrap();
        prop_assert_eq!(g, 1.0);
    }
}
