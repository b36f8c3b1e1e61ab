//! Acceptance criteria, one test each. Every check writes a PASS/FAIL line
//! straight to stderr so it shows up even when the test passes.

use std::f64::consts::{LN_2, PI};
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stepflow_core::analysis::{
    consistency_report, convergence_study, probe_direction, quadrature_study, spectral_abscissa,
    stability_probe, ConvergenceOptions,
};
use stepflow_core::continuum::{energy_bundle, integrate_pde, PdeState};
use stepflow_core::geometry::{
    build_height_field, height_to_phi, phi_to_height, sample_step_train, DomainParams, Profile,
    StepTrain,
};
use stepflow_core::hilbert_quadrature::{hilbert_pv_direct, hilbert_spectral, PeriodicSamples};
use stepflow_core::mesoscopic::{
    chemical_potential, discrete_energy_for, dissipation_rate, integrate_ode, ode_rhs,
    IntegratorOptions, PotentialVariant, Trajectory,
};

const VARIANTS: [PotentialVariant; 2] = [PotentialVariant::Standard, PotentialVariant::Corrected];

fn profile() -> Profile {
    Profile::new(0.2, 1).unwrap()
}

struct Report {
    criterion: u32,
    failures: Vec<String>,
    start: Instant,
}

impl Report {
    fn new(criterion: u32) -> Self {
        Self {
            criterion,
            failures: Vec::new(),
            start: Instant::now(),
        }
    }

    fn check(&mut self, name: &str, passed: bool, detail: impl AsRef<str>) {
        let tag = if passed { "PASS" } else { "FAIL" };
        let line = format!(
            "[criterion {}] {tag} {name}: {}\n",
            self.criterion,
            detail.as_ref()
        );
        let _ = std::io::stderr().write_all(line.as_bytes());
        if !passed {
            self.failures.push(name.to_string());
        }
    }

    fn runtime(&mut self, limit_seconds: f64) {
        let s = self.start.elapsed().as_secs_f64();
        self.check(
            "runtime",
            s < limit_seconds,
            format!("{s:.2} s (limit {limit_seconds} s)"),
        );
    }

    fn finish(self) {
        assert!(
            self.failures.is_empty(),
            "criterion {} failed: {:?}",
            self.criterion,
            self.failures
        );
    }
}

fn random_train(rng: &mut ChaCha8Rng, n: usize) -> StepTrain {
    let params = DomainParams::new(1.0, n).unwrap();
    let h = 1.0 / n as f64;
    let offset = rng.random_range(0.0..1.0);
    let x = (0..n)
        .map(|i| offset + (i as f64 + rng.random_range(-0.3..0.3)) * h)
        .collect();
    StepTrain::new(params, x, 0.0).unwrap()
}

fn energy_non_increasing<S>(traj: &Trajectory<S>) -> bool {
    traj.energy.windows(2).all(|w| w[1].energy <= w[0].energy)
}

#[test]
fn criterion_01_gradient_structure() {
    let mut r = Report::new(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for n in [8, 16, 32] {
        for _ in 0..20 {
            let s = random_train(&mut rng, n);
            let a = s.params().step_height();
            let h = 1e-6 * a;
            for v in VARIANTS {
                let f = chemical_potential(&s, v).unwrap();
                let scale = f.iter().fold(1.0f64, |m, x| m.max(x.abs()));
                for i in 0..n {
                    let energy = |d: f64| {
                        let mut x = s.positions().to_vec();
                        x[i] += d;
                        discrete_energy_for(&StepTrain::new(s.params(), x, 0.0).unwrap(), v)
                            .unwrap()
                    };
                    let fd = (energy(h) - energy(-h)) / (2.0 * h * a);
                    worst = worst.max((fd - f[i]).abs() / scale);
                }
            }
        }
    }
    r.check(
        "f = (1/a) dE/dx",
        worst <= 1e-6,
        format!("max relative mismatch {worst:.3e} (tol 1e-6)"),
    );
    r.runtime(10.0);
    r.finish();
}

#[test]
fn criterion_02_uniform_steady_state() {
    let mut r = Report::new(2);
    let mut rhs = 0.0f64;
    let mut diss = 0.0f64;
    for n in [8, 16, 32, 64, 128, 256] {
        let s = StepTrain::uniform(DomainParams::new(1.0, n).unwrap(), 0.0);
        for v in VARIANTS {
            rhs = ode_rhs(&s, v)
                .unwrap()
                .iter()
                .fold(rhs, |m, x| m.max(x.abs()));
            diss = diss.max(dissipation_rate(&s, v).unwrap());
        }
    }
    r.check(
        "|rhs(uniform)|",
        rhs <= 1e-10,
        format!("{rhs:.3e} (tol 1e-10)"),
    );
    // D is a sum of squares of roundoff-level differences
    r.check("D(uniform)", diss <= 1e-20, format!("{diss:.3e}"));
    r.runtime(5.0);
    r.finish();
}

#[test]
fn criterion_03_energy_dissipation_identity() {
    let mut r = Report::new(3);
    let h = build_height_field(profile(), 1.0, 128).unwrap();
    let s = sample_step_train(&height_to_phi(&h, 128).unwrap(), 32).unwrap();
    for v in VARIANTS {
        let traj = integrate_ode(&s, 1e-3, &IntegratorOptions::default(), v).unwrap();
        let worst = traj
            .energy
            .iter()
            .map(|e| e.identity_residual / e.dissipation.abs().max(1.0))
            .fold(0.0, f64::max);
        r.check(
            &format!("{} energy non-increasing", v.name()),
            energy_non_increasing(&traj),
            format!("{} accepted steps", traj.energy.len() - 1),
        );
        r.check(
            &format!("{} identity residual", v.name()),
            worst <= 1e-2,
            format!("max residual / max(|D|,1) = {worst:.3e} (tol 1e-2)"),
        );
    }
    r.runtime(60.0);
    r.finish();
}

#[test]
fn criterion_04_quadrature_order() {
    let mut r = Report::new(4);
    let q = quadrature_study(profile(), 1.0, &[32, 64, 128, 256]).unwrap();
    for row in &q.rows {
        let _ = writeln!(
            std::io::stderr(),
            "    N = {:3}: corrected {:.3e}, uncorrected {:.3e}",
            row.steps,
            row.corrected,
            row.uncorrected
        );
    }
    r.check(
        "corrected order >= 3.5",
        q.corrected.at_least(3.5),
        q.corrected.to_string(),
    );
    r.check(
        "uncorrected order <= 1.5",
        q.uncorrected.at_most(1.5),
        q.uncorrected.to_string(),
    );
    r.runtime(60.0);
    r.finish();
}

#[test]
fn criterion_05_consistency_orders() {
    let mut r = Report::new(5);
    let c = consistency_report(profile(), 1.0, &[32, 64, 128, 256]).unwrap();
    for row in &c.rows {
        let _ = writeln!(
            std::io::stderr(),
            "    N = {:3}: I1 {:.3e}, I2 {:.3e}, I3 {:.3e}, F {:.3e}",
            row.steps,
            row.i1,
            row.i2,
            row.i3,
            row.f
        );
    }
    let o = c.orders;
    r.check(
        "I1 - v1 a order >= 3.5",
        o.i1.at_least(3.5),
        o.i1.to_string(),
    );
    r.check(
        "I2 - v2 a^2 order >= 3.5",
        o.i2.at_least(3.5),
        o.i2.to_string(),
    );
    r.check(
        "I3 - v3 a^2 order >= 3.5",
        o.i3.at_least(3.5),
        o.i3.to_string(),
    );
    r.check(
        "F - dphi/dt - r0 a order >= 1.5",
        o.f.at_least(1.5),
        o.f.to_string(),
    );
    r.runtime(120.0);
    r.finish();
}

#[test]
fn criterion_06_convergence_rate() {
    let mut r = Report::new(6);
    let opts = ConvergenceOptions {
        jobs: std::thread::available_parallelism().map_or(1, |n| n.get()),
        ..ConvergenceOptions::default()
    };
    for (v, lo, hi) in [
        (PotentialVariant::Standard, 0.7, 1.3),
        (PotentialVariant::Corrected, 1.6, 2.4),
    ] {
        let t = convergence_study(profile(), 1.0, &[16, 32, 64, 128], 1e-3, v, &opts).unwrap();
        for row in &t.rows {
            let _ = writeln!(
                std::io::stderr(),
                "    {} N = {:3}: error {:.4e}",
                v.name(),
                row.steps,
                row.error
            );
        }
        let fit = t.fit.expect("four positive errors");
        r.check(
            &format!("{} slope in [{lo}, {hi}]", v.name()),
            (lo..=hi).contains(&fit.slope),
            format!("slope {:.4} (r2 {:.4})", fit.slope, fit.r2),
        );
        r.check(
            &format!("{} errors monotone in N", v.name()),
            t.errors_monotone,
            format!("{}", t.errors_monotone),
        );
    }
    r.runtime(900.0);
    r.finish();
}

#[test]
fn criterion_07_energy_identities() {
    let mut r = Report::new(7);
    let h = build_height_field(profile(), 1.0, 256).unwrap();
    let b = energy_bundle(&h).unwrap();
    let c = b.cross_residuals;
    r.check(
        "W = ln 2",
        (b.w - LN_2).abs() <= 1e-6,
        format!("W = {:.15}, |W - ln 2| = {:.2e}", b.w, (b.w - LN_2).abs()),
    );
    r.check(
        "Ebar_h = E_h + W",
        c.bar_minus_w <= 1e-6,
        format!(
            "|E_h - Ebar_h + W| = {:.2e} (tol 1e-6); |E_h - Ebar_h - W| = {:.6} as literally signed",
            c.bar_minus_w,
            (b.e_h - b.e_h_bar - b.w).abs()
        ),
    );
    r.check(
        "E_phi = E_h",
        c.phi <= 1e-5,
        format!("{:.2e} (tol 1e-5)", c.phi),
    );
    r.check(
        "E_rho = E_h",
        c.rho <= 1e-5,
        format!("{:.2e} (tol 1e-5)", c.rho),
    );
    r.check("E_u = E_h", c.u <= 1e-5, format!("{:.2e} (tol 1e-5)", c.u));
    r.runtime(30.0);
    r.finish();
}

#[test]
fn criterion_08_hilbert_cross_check() {
    let mut r = Report::new(8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut pv, mut square, mut constant) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..5 {
        let l = rng.random_range(0.5..3.0);
        let coeffs: Vec<(f64, f64)> = (0..=8)
            .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let f = |x: f64| {
            coeffs
                .iter()
                .enumerate()
                .map(|(k, (c, s))| {
                    let w = 2.0 * PI * k as f64 * x / l;
                    c * w.cos() + s * w.sin()
                })
                .sum::<f64>()
        };
        let u = PeriodicSamples::from_fn(l, 64, f).unwrap();
        let hu = hilbert_spectral(&u);
        for (j, v) in hu.values().iter().enumerate() {
            let x = j as f64 * l / 64.0;
            pv = pv.max((hilbert_pv_direct(f, x, l).unwrap() - v).abs());
        }
        let mean = u.values().iter().sum::<f64>() / 64.0;
        let hh = hilbert_spectral(&hu);
        for (a, b) in hh.values().iter().zip(u.values()) {
            square = square.max((a + b - mean).abs());
        }
        let c = PeriodicSamples::new(l, vec![coeffs[0].0; 64]).unwrap();
        constant = hilbert_spectral(&c)
            .values()
            .iter()
            .fold(constant, |m, v| m.max(v.abs()));
    }
    r.check(
        "spectral vs PV direct",
        pv <= 1e-8,
        format!("{pv:.2e} (tol 1e-8)"),
    );
    r.check("H(const) = 0", constant == 0.0, format!("{constant:.2e}"));
    r.check(
        "H^2 = -(id - mean)",
        square <= 1e-10,
        format!("{square:.2e} (tol 1e-10)"),
    );
    r.runtime(10.0);
    r.finish();
}

fn pde_run<S: PdeState + std::fmt::Debug>(
    r: &mut Report,
    state: &S,
    slope: impl Fn(&S) -> Vec<f64>,
) -> S {
    let name = format!("{:?}", state.formulation()).to_lowercase();
    let traj = integrate_pde(state, 1e-3, &IntegratorOptions::default()).unwrap();
    let mean = |s: &S| s.periodic_values().iter().sum::<f64>() / s.periodic_values().len() as f64;
    let m0 = mean(state);
    let drift = traj
        .states
        .iter()
        .map(|s| (mean(s) - m0).abs())
        .fold(0.0, f64::max);
    let bound = state.runtime_bound().unwrap();
    let max_slope = traj
        .states
        .iter()
        .flat_map(slope)
        .fold(f64::NEG_INFINITY, f64::max);
    r.check(
        &format!("{name} mean drift"),
        drift <= 1e-8,
        format!("{drift:.2e} (tol 1e-8)"),
    );
    r.check(
        &format!("{name} slope bound"),
        max_slope <= bound,
        format!(
            "max slope {max_slope:.6} vs bound {bound:.6} over {} snapshots",
            traj.states.len()
        ),
    );
    r.check(
        &format!("{name} energy non-increasing"),
        energy_non_increasing(&traj),
        format!("{} accepted steps", traj.energy.len() - 1),
    );
    traj.states.last().unwrap().clone()
}

#[test]
fn criterion_09_pde_invariants() {
    let mut r = Report::new(9);
    let h0 = build_height_field(profile(), 1.0, 128).unwrap();
    let phi0 = height_to_phi(&h0, 128).unwrap();
    let h_end = pde_run(&mut r, &h0, |s| s.slope());
    let phi_end = pde_run(&mut r, &phi0, |s| s.slope());
    let back = phi_to_height(&phi_end, 128).unwrap();
    let diff = h_end
        .periodic_part()
        .iter()
        .zip(back.periodic_part())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    r.check(
        "h-form vs phi-form terminal states",
        diff <= 1e-3,
        format!("sup diff {diff:.3e} (tol 1e-3)"),
    );
    r.runtime(300.0);
    r.finish();
}

#[test]
fn criterion_10_stability_probes() {
    let mut r = Report::new(10);
    let mut abscissa = f64::NEG_INFINITY;
    for n in [8, 16, 32, 64] {
        let s = StepTrain::uniform(DomainParams::new(1.0, n).unwrap(), 0.0);
        for v in VARIANTS {
            abscissa = abscissa.max(spectral_abscissa(&s, v).unwrap());
        }
    }
    r.check(
        "uniform spectral abscissa",
        abscissa <= 1e-6,
        format!("{abscissa:.3e} (tol 1e-6)"),
    );
    let h = build_height_field(profile(), 1.0, 128).unwrap();
    let base = sample_step_train(&height_to_phi(&h, 128).unwrap(), 32).unwrap();
    for v in VARIANTS {
        let z = probe_direction(32, 4, 1e-3 / 32.0);
        let g = stability_probe(&base, &z, 1e-3, v, &IntegratorOptions::default());
        let ok = matches!(g, Ok(x) if x.is_finite());
        r.check(
            &format!("{} linearized growth finite", v.name()),
            ok,
            format!("{g:?}"),
        );
    }
    r.runtime(60.0);
    r.finish();
}
