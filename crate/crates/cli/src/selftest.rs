//! Fast invariant suites behind `stepflow selftest`.

use std::f64::consts::PI;
use std::time::Instant;

use stepflow_core::analysis::{
    consistency_report, probe_direction, quadrature_study, spectral_abscissa, stability_probe,
};
use stepflow_core::continuum::{energy_bundle, integrate_pde, PdeState};
use stepflow_core::geometry::{
    build_height_field, height_to_phi, phi_to_height, sample_step_train, DomainParams, StepTrain,
};
use stepflow_core::hilbert_quadrature::{hilbert_pv_direct, hilbert_spectral, PeriodicSamples};
use stepflow_core::mesoscopic::{
    chemical_potential, discrete_energy_for, dissipation_rate, integrate_ode, ode_rhs,
    IntegratorOptions, PotentialVariant,
};
use stepflow_core::Result;

use crate::config::RunConfig;

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = Result<(bool, String)>;

const VARIANTS: [PotentialVariant; 2] = [PotentialVariant::Standard, PotentialVariant::Corrected];

fn perturbed_train(length: f64, n: usize, seed: usize) -> Result<StepTrain> {
    let params = DomainParams::new(length, n)?;
    let spacing = length / n as f64;
    let z = probe_direction(n, 1 + seed % 5, 0.1 * spacing);
    let x = (0..n)
        .map(|i| (i as f64 + seed as f64 / 20.0) * spacing + z[i])
        .collect();
    StepTrain::new(params, x, 0.0)
}

fn gradient(cfg: &RunConfig) -> Check {
    let mut worst = 0.0f64;
    for n in [8, 16, 32] {
        for seed in 0..20 {
            let s = perturbed_train(cfg.length, n, seed)?;
            let a = s.params().step_height();
            let h = 1e-6 * a;
            for v in VARIANTS {
                let f = chemical_potential(&s, v)?;
                let scale = f.iter().fold(1.0f64, |m, x| m.max(x.abs()));
                for i in 0..n {
                    let shifted = |d: f64| -> Result<f64> {
                        let mut x = s.positions().to_vec();
                        x[i] += d;
                        discrete_energy_for(&StepTrain::new(s.params(), x, 0.0)?, v)
                    };
                    let fd = (shifted(h)? - shifted(-h)?) / (2.0 * h * a);
                    worst = worst.max((fd - f[i]).abs() / scale);
                }
            }
        }
    }
    Ok((worst <= 1e-6, format!("max relative mismatch {worst:.3e}")))
}

fn uniform_steady(cfg: &RunConfig) -> Check {
    let mut rhs = 0.0f64;
    let mut diss = 0.0f64;
    for n in [8, 16, 32, 64, 128, 256] {
        let s = StepTrain::uniform(DomainParams::new(cfg.length, n)?, 0.0);
        for v in VARIANTS {
            rhs = ode_rhs(&s, v)?.iter().fold(rhs, |m, x| m.max(x.abs()));
            diss = diss.max(dissipation_rate(&s, v)?);
        }
    }
    Ok((
        rhs <= 1e-10 && diss <= 1e-20,
        format!("|rhs| {rhs:.3e}, D {diss:.3e}"),
    ))
}

fn dissipation_identity(cfg: &RunConfig) -> Check {
    let h = build_height_field(cfg.profile, cfg.length, cfg.grid_m)?;
    let s = sample_step_train(&height_to_phi(&h, cfg.grid_k)?, 32)?;
    let mut monotone = true;
    let mut worst = 0.0f64;
    for v in VARIANTS {
        let traj =
            integrate_ode(&s, 1e-3, &IntegratorOptions::default(), v).map_err(|f| f.error)?;
        monotone &= traj.energy.windows(2).all(|w| w[1].energy <= w[0].energy);
        worst = traj
            .energy
            .iter()
            .map(|r| r.identity_residual / r.dissipation.abs().max(1.0))
            .fold(worst, f64::max);
    }
    Ok((
        monotone && worst <= 1e-2,
        format!("energy monotone {monotone}, max scaled residual {worst:.3e}"),
    ))
}

fn energies(cfg: &RunConfig) -> Check {
    let h = build_height_field(cfg.profile, cfg.length, 256)?;
    let b = energy_bundle(&h)?;
    let w_err = (b.w - std::f64::consts::LN_2 / cfg.length).abs();
    let r = b.cross_residuals;
    let ok =
        w_err <= 1e-6 && r.bar_minus_w <= 1e-6 && r.phi <= 1e-5 && r.rho <= 1e-5 && r.u <= 1e-5;
    Ok((
        ok,
        format!(
            "|W - ln2/L| {w_err:.1e}, bar {:.1e}, phi {:.1e}, rho {:.1e}, u {:.1e}",
            r.bar_minus_w, r.phi, r.rho, r.u
        ),
    ))
}

fn hilbert(cfg: &RunConfig) -> Check {
    let l = cfg.length;
    let f = |x: f64| {
        (1..=8)
            .map(|k| {
                let w = 2.0 * PI * k as f64 * x / l;
                (w.cos() + 0.5 * (w + 0.3).sin()) / k as f64
            })
            .sum::<f64>()
    };
    let u = PeriodicSamples::from_fn(l, 64, f)?;
    let hu = hilbert_spectral(&u);
    let mut diff = 0.0f64;
    for (j, v) in hu.values().iter().enumerate().step_by(4) {
        let x = j as f64 * l / 64.0;
        diff = diff.max((hilbert_pv_direct(f, x, l)? - v).abs());
    }
    let hh = hilbert_spectral(&hu);
    let mean = u.values().iter().sum::<f64>() / 64.0;
    let square = hh
        .values()
        .iter()
        .zip(u.values())
        .map(|(a, b)| (a + (b - mean)).abs())
        .fold(0.0, f64::max);
    let constant = hilbert_spectral(&PeriodicSamples::new(l, vec![2.5; 64])?)
        .values()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    Ok((
        diff <= 1e-8 && square <= 1e-10 && constant == 0.0,
        format!("PV diff {diff:.1e}, H^2 {square:.1e}, H(const) {constant:.1e}"),
    ))
}

fn quadrature(cfg: &RunConfig) -> Check {
    let q = quadrature_study(cfg.profile, cfg.length, &[32, 64, 128, 256])?;
    Ok((
        q.corrected.at_least(3.5) && q.uncorrected.at_most(1.5),
        format!("corrected {}, uncorrected {}", q.corrected, q.uncorrected),
    ))
}

fn consistency(cfg: &RunConfig) -> Check {
    let r = consistency_report(cfg.profile, cfg.length, &[32, 64, 128, 256])?;
    let o = r.orders;
    let ok = o.i1.at_least(3.5) && o.i2.at_least(3.5) && o.i3.at_least(3.5) && o.f.at_least(1.5);
    Ok((
        ok,
        format!("I1 {}, I2 {}, I3 {}, F {}", o.i1, o.i2, o.i3, o.f),
    ))
}

fn stability(cfg: &RunConfig) -> Check {
    let mut abscissa = f64::NEG_INFINITY;
    for n in [8, 16, 32, 64] {
        let uniform = StepTrain::uniform(DomainParams::new(cfg.length, n)?, 0.0);
        for v in VARIANTS {
            abscissa = abscissa.max(spectral_abscissa(&uniform, v)?);
        }
    }
    let h = build_height_field(cfg.profile, cfg.length, cfg.grid_m)?;
    let base = sample_step_train(&height_to_phi(&h, cfg.grid_k)?, 32)?;
    let z = probe_direction(32, 4, 1e-3 * cfg.length / 32.0);
    let mut growth = 0.0f64;
    for v in VARIANTS {
        growth = growth.max(stability_probe(
            &base,
            &z,
            1e-3,
            v,
            &IntegratorOptions::default(),
        )?);
    }
    Ok((
        abscissa <= 1e-6 && growth.is_finite(),
        format!("abscissa {abscissa:.3e}, growth {growth:.4}"),
    ))
}

/// Mean drift, slope-bound violation flag and energy monotonicity of one run.
fn pde_run<S: PdeState>(state: &S, slope: impl Fn(&S) -> Vec<f64>) -> Result<(S, f64, bool, bool)> {
    let traj = integrate_pde(state, 1e-3, &IntegratorOptions::default()).map_err(|f| f.error)?;
    let mean = |s: &S| s.periodic_values().iter().sum::<f64>() / s.periodic_values().len() as f64;
    let m0 = mean(state);
    let bound = state.runtime_bound()?;
    let drift = traj
        .states
        .iter()
        .map(|s| (mean(s) - m0).abs())
        .fold(0.0, f64::max);
    let bounded = traj
        .states
        .iter()
        .all(|s| slope(s).iter().all(|&v| v <= bound));
    let monotone = traj.energy.windows(2).all(|w| w[1].energy <= w[0].energy);
    let last = traj.states.last().cloned().unwrap_or_else(|| state.clone());
    Ok((last, drift, bounded, monotone))
}

fn pde_invariants(cfg: &RunConfig) -> Check {
    let h0 = build_height_field(cfg.profile, cfg.length, cfg.grid_m)?;
    let phi0 = height_to_phi(&h0, cfg.grid_k)?;
    let (h_end, dh, bh, mh) = pde_run(&h0, |s| s.slope())?;
    let (phi_end, dp, bp, mp) = pde_run(&phi0, |s| s.slope())?;
    let back = phi_to_height(&phi_end, cfg.grid_m)?;
    let diff = h_end
        .periodic_part()
        .iter()
        .zip(back.periodic_part())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let drift = dh.max(dp);
    Ok((
        drift <= 1e-8 && bh && bp && mh && mp && diff <= 1e-3,
        format!(
            "mean drift {drift:.1e}, slope bound {}, energy monotone {}, h vs phi {diff:.1e}",
            bh && bp,
            mh && mp
        ),
    ))
}

/// Runs every suite; a library error counts as a failed suite.
pub fn run_all(cfg: &RunConfig) -> Vec<SuiteResult> {
    let suites: [(&'static str, fn(&RunConfig) -> Check); 9] = [
        ("gradient_structure", gradient),
        ("uniform_steady_state", uniform_steady),
        ("dissipation_identity", dissipation_identity),
        ("quadrature_order", quadrature),
        ("consistency_orders", consistency),
        ("energy_identities", energies),
        ("hilbert_cross_check", hilbert),
        ("pde_invariants", pde_invariants),
        ("stability_probes", stability),
    ];
    suites
        .iter()
        .map(|(name, check)| {
            let start = Instant::now();
            let (passed, detail) = match check(cfg) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            SuiteResult {
                name,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}
