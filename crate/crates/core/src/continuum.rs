//! Continuum limit in the height (`h`) and step-location (`phi`) forms.
//!
//! `h_t = mu_xx` with
//! `mu = -(2 pi / L) H(h_x) + h_xx / h_x + 3 h_x h_xx`, and equivalently
//! `phi_t = -d/d alpha (mu_alpha / phi_alpha)`.

use std::f64::consts::{LN_2, PI};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Result, StepflowError};
use crate::geometry::{
    height_to_density, height_to_phi, height_to_u, HeightField, PhiField, ADMISSIBILITY_SLACK,
};
use crate::hilbert_quadrature::{self, cot_sums, log_sin_double_integral, PeriodicSamples};
use crate::integrator::{self, fd_jacobian, OdeSystem};
use crate::mesoscopic::{
    wrap, EnergyRecord, IntegrationFailure, IntegrationResult, IntegratorOptions, Trajectory,
};
use crate::spectral;

fn monotonicity_error(t: f64, slope: f64, bound: f64) -> StepflowError {
    StepflowError::MonotonicityLost {
        time: t,
        slope,
        bound,
    }
}

fn strictly_negative(t: f64, values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !(**v < 0.0)) {
        Some(&s) => Err(monotonicity_error(t, s, 0.0)),
        None => Ok(()),
    }
}

fn height_mu_raw(p: &[f64], length: f64, t: f64) -> Result<Vec<f64>> {
    let hx: Vec<f64> = spectral::derivative(p, length, 1)
        .into_iter()
        .map(|d| d - 1.0 / length)
        .collect();
    strictly_negative(t, &hx)?;
    let hxx = spectral::derivative(p, length, 2);
    let hilbert = hilbert_quadrature::hilbert_values(&hx);
    let lambda = 2.0 * PI / length;
    Ok((0..p.len())
        .map(|j| -lambda * hilbert[j] + hxx[j] / hx[j] + 3.0 * hx[j] * hxx[j])
        .collect())
}

fn height_rhs_raw(p: &[f64], length: f64, t: f64) -> Result<Vec<f64>> {
    let mu = height_mu_raw(p, length, t)?;
    Ok(spectral::derivative(&mu, length, 2))
}

/// Chemical potential `mu = dE_h/dh` at the grid nodes.
pub fn mu_of_height(h: &HeightField) -> Result<Vec<f64>> {
    height_mu_raw(h.periodic_part(), h.length(), h.time())
}

/// `h_t = mu_xx`.
pub fn height_rhs(h: &HeightField) -> Result<Vec<f64>> {
    height_rhs_raw(h.periodic_part(), h.length(), h.time())
}

fn phi_nodes(q: &[f64], length: f64) -> Vec<f64> {
    let k = q.len() as f64;
    q.iter()
        .enumerate()
        .map(|(j, qj)| -length * j as f64 / k + qj)
        .collect()
}

struct PhiDerivatives {
    pa: Vec<f64>,
    paa: Vec<f64>,
}

fn phi_derivatives(q: &[f64], length: f64, t: f64) -> Result<PhiDerivatives> {
    let pa: Vec<f64> = spectral::derivative(q, 1.0, 1)
        .into_iter()
        .map(|d| d - length)
        .collect();
    strictly_negative(t, &pa)?;
    let paa = spectral::derivative(q, 1.0, 2);
    Ok(PhiDerivatives { pa, paa })
}

/// `mu` from precomputed `a`-weighted cotangent sums on the field grid.
fn phi_mu_from_sums(d: &PhiDerivatives, sums: &[f64], length: f64) -> Vec<f64> {
    let k = sums.len() as f64;
    (0..sums.len())
        .map(|j| {
            let r = d.paa[j] / (d.pa[j] * d.pa[j]);
            let pv = sums[j] + 0.5 / k * r;
            2.0 / length * pv - r - 3.0 * r / (d.pa[j] * d.pa[j])
        })
        .collect()
}

fn phi_rhs_from_sums(q: &[f64], sums: &[f64], length: f64, t: f64) -> Result<Vec<f64>> {
    let d = phi_derivatives(q, length, t)?;
    let mu = phi_mu_from_sums(&d, sums, length);
    let mu_a = spectral::derivative(&mu, 1.0, 1);
    let flux: Vec<f64> = mu_a.iter().zip(&d.pa).map(|(m, p)| m / p).collect();
    Ok(spectral::derivative(&flux, 1.0, 1)
        .into_iter()
        .map(|v| -v)
        .collect())
}

fn phi_mu_raw(q: &[f64], length: f64, t: f64) -> Result<Vec<f64>> {
    let d = phi_derivatives(q, length, t)?;
    let sums = cot_sums(&phi_nodes(q, length), length)?;
    Ok(phi_mu_from_sums(&d, &sums, length))
}

fn phi_rhs_raw(q: &[f64], length: f64, t: f64) -> Result<Vec<f64>> {
    phi_derivatives(q, length, t)?;
    let sums = cot_sums(&phi_nodes(q, length), length)?;
    phi_rhs_from_sums(q, &sums, length, t)
}

/// Chemical potential in the `phi` form,
/// `mu = (2/L) PV int (pi/L) cot(pi (phi_i - phi(beta))/L) d beta - phi_aa/phi_a^2 - 3 phi_aa/phi_a^4`,
/// with the principal value taken by the corrected grid sum.
pub fn mu_of_phi(phi: &PhiField) -> Result<Vec<f64>> {
    phi_mu_raw(phi.periodic_part(), phi.length(), phi.time())
}

/// `phi_t = -(mu_alpha / phi_alpha)_alpha`.
pub fn phi_rhs(phi: &PhiField) -> Result<Vec<f64>> {
    phi_rhs_raw(phi.periodic_part(), phi.length(), phi.time())
}

fn entropy_density(rho: f64) -> f64 {
    rho * rho.ln() + 0.5 * rho * rho * rho
}

fn local_energy(rho: &[f64], length: f64) -> Result<f64> {
    if let Some(&r) = rho.iter().find(|r| !(**r > 0.0)) {
        return Err(monotonicity_error(0.0, -r, 0.0));
    }
    let values: Vec<f64> = rho.iter().map(|&r| entropy_density(r)).collect();
    Ok(spectral::periodic_integral(&values, length))
}

fn height_energy_raw(p: &[f64], length: f64) -> Result<f64> {
    let hx: Vec<f64> = spectral::derivative(p, length, 1)
        .into_iter()
        .map(|d| d - 1.0 / length)
        .collect();
    let rho: Vec<f64> = hx.iter().map(|v| -v).collect();
    let samples = PeriodicSamples::new(length, hx)?;
    Ok(log_sin_double_integral(&samples, &samples)? + local_energy(&rho, length)?)
}

/// `E_h = int [(1/L) int ln|sin(pi (x-y)/L)| h_x h_y dy - h_x ln(-h_x) - h_x^3/2] dx`.
pub fn height_energy(h: &HeightField) -> Result<f64> {
    height_energy_raw(h.periodic_part(), h.length())
}

/// `E_h_bar = int [-(pi/L) (h + x/L) H(h_x) - h_x ln(-h_x) - h_x^3/2] dx`.
pub fn height_energy_bar(h: &HeightField) -> Result<f64> {
    let length = h.length();
    let hx = h.slope();
    let hilbert = hilbert_quadrature::hilbert_values(&hx);
    let rho: Vec<f64> = hx.iter().map(|v| -v).collect();
    let pair: Vec<f64> = h
        .periodic_part()
        .iter()
        .zip(&hilbert)
        .map(|(p, hh)| -PI / length * p * hh)
        .collect();
    Ok(spectral::periodic_integral(&pair, length) + local_energy(&rho, length)?)
}

/// `W = (1/L^2) int int ln|sin(pi (x-y)/L)| h_y dx dy`.
pub fn null_lagrangian(h: &HeightField) -> Result<f64> {
    let length = h.length();
    let ones = PeriodicSamples::new(length, vec![1.0; h.len()])?;
    let hx = PeriodicSamples::new(length, h.slope())?;
    Ok(log_sin_double_integral(&ones, &hx)? / length)
}

/// `E_rho = int [(1/L) int ln|sin(pi (x-y)/L)| rho(x) rho(y) dy + Phi(rho)] dx`
/// with `Phi(xi) = xi ln xi + xi^3/2`.
pub fn density_energy(rho: &PeriodicSamples) -> Result<f64> {
    Ok(log_sin_double_integral(rho, rho)? + local_energy(rho.values(), rho.length())?)
}

/// `E_u = int [(1/L) int ln|sin(pi (x-y)/L)| (u_xx + b)(u_yy + b) dy + Phi(u_xx + b)] dx`, `b = 1/L`.
pub fn potential_energy(u: &PeriodicSamples) -> Result<f64> {
    let length = u.length();
    let shifted: Vec<f64> = spectral::derivative(u.values(), length, 2)
        .into_iter()
        .map(|v| v + 1.0 / length)
        .collect();
    density_energy(&PeriodicSamples::new(length, shifted)?)
}

fn phi_energy_raw(q: &[f64], length: f64) -> Result<f64> {
    let k = q.len();
    let pa: Vec<f64> = spectral::derivative(q, 1.0, 1)
        .into_iter()
        .map(|d| d - length)
        .collect();
    strictly_negative(0.0, &pa)?;
    let x = phi_nodes(q, length);
    // ln|sin(pi (phi_i - phi_j)/L)| - ln|sin(pi (alpha_i - alpha_j))| is smooth
    // and periodic, with diagonal value ln(|phi_alpha| / L).
    let w = PI / length;
    let mut regular = 0.0;
    for i in 0..k {
        let mut row = 0.5 * (pa[i].abs() / length).ln();
        for j in (i + 1)..k {
            let top = (w * wrap(x[i] - x[j], length)).sin().abs().ln();
            let bottom = (PI * wrap((i as f64 - j as f64) / k as f64, 1.0))
                .sin()
                .abs()
                .ln();
            row += top - bottom;
        }
        regular += 2.0 * row;
    }
    regular /= (k * k) as f64;
    let local: Vec<f64> = pa.iter().map(|&p| -(-p).ln() + 0.5 / (p * p)).collect();
    Ok((regular - LN_2) / length + spectral::mean(&local))
}

/// `E_phi = int [(1/L) int ln|sin(pi (phi(a) - phi(b))/L)| db - ln(-phi_a) + 1/(2 phi_a^2)] da`.
pub fn phi_energy(phi: &PhiField) -> Result<f64> {
    phi_energy_raw(phi.periodic_part(), phi.length())
}

fn height_dissipation_raw(p: &[f64], length: f64) -> Result<f64> {
    let mu = height_mu_raw(p, length, 0.0)?;
    let mux = spectral::derivative(&mu, length, 1);
    let sq: Vec<f64> = mux.iter().map(|v| v * v).collect();
    Ok(spectral::periodic_integral(&sq, length))
}

/// `-dE_h/dt = int mu_x^2 dx`.
pub fn height_dissipation(h: &HeightField) -> Result<f64> {
    height_dissipation_raw(h.periodic_part(), h.length())
}

fn phi_dissipation_raw(q: &[f64], length: f64) -> Result<f64> {
    let d = phi_derivatives(q, length, 0.0)?;
    let mu = phi_mu_raw(q, length, 0.0)?;
    let mua = spectral::derivative(&mu, 1.0, 1);
    let vals: Vec<f64> = mua.iter().zip(&d.pa).map(|(m, p)| -m * m / p).collect();
    Ok(spectral::mean(&vals))
}

/// `-dE_phi/dt = -int mu_alpha^2 / phi_alpha d alpha`.
pub fn phi_dissipation(phi: &PhiField) -> Result<f64> {
    phi_dissipation_raw(phi.periodic_part(), phi.length())
}

/// Cross residuals between the energy formulations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrossResiduals {
    /// `|E_h - E_h_bar + W|`; integrating the Hilbert term of `E_h_bar` by
    /// parts gives `E_h_bar = E_h + W`.
    pub bar_minus_w: f64,
    /// `|E_h - E_phi|`.
    pub phi: f64,
    /// `|E_h - E_rho|`.
    pub rho: f64,
    /// `|E_h - E_u|`.
    pub u: f64,
}

/// All energy formulations of one height profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyBundle {
    pub e_h: f64,
    pub e_h_bar: f64,
    pub w: f64,
    pub e_rho: f64,
    pub e_u: f64,
    pub e_phi: f64,
    pub cross_residuals: CrossResiduals,
}

/// Evaluates every energy formulation; the `phi` form uses `K = M`.
pub fn energy_bundle(h: &HeightField) -> Result<EnergyBundle> {
    let length = h.length();
    let e_h = height_energy(h)?;
    let e_h_bar = height_energy_bar(h)?;
    let w = null_lagrangian(h)?;
    let rho = PeriodicSamples::new(length, height_to_density(h)?)?;
    let e_rho = density_energy(&rho)?;
    let u = PeriodicSamples::new(length, height_to_u(h)?)?;
    let e_u = potential_energy(&u)?;
    let e_phi = phi_energy(&height_to_phi(h, h.len())?)?;
    Ok(EnergyBundle {
        e_h,
        e_h_bar,
        w,
        e_rho,
        e_u,
        e_phi,
        cross_residuals: CrossResiduals {
            bar_minus_w: (e_h - e_h_bar + w).abs(),
            phi: (e_h - e_phi).abs(),
            rho: (e_h - e_rho).abs(),
            u: (e_h - e_u).abs(),
        },
    })
}

/// Continuum formulation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    Height,
    Phi,
}

impl std::str::FromStr for Formulation {
    type Err = StepflowError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h" | "height" => Ok(Formulation::Height),
            "phi" => Ok(Formulation::Phi),
            other => Err(StepflowError::InvalidParameter(format!(
                "unknown formulation '{other}'"
            ))),
        }
    }
}

struct PdeSystem {
    formulation: Formulation,
    dim: usize,
    length: f64,
    /// Upper bound on `h_x` (height form) or `phi_alpha` (phi form).
    bound: f64,
}

impl PdeSystem {
    fn slope(&self, y: &[f64]) -> Vec<f64> {
        match self.formulation {
            Formulation::Height => spectral::derivative(y, self.length, 1)
                .into_iter()
                .map(|d| d - 1.0 / self.length)
                .collect(),
            Formulation::Phi => spectral::derivative(y, 1.0, 1)
                .into_iter()
                .map(|d| d - self.length)
                .collect(),
        }
    }

    fn energy(&self, y: &[f64]) -> Result<f64> {
        match self.formulation {
            Formulation::Height => height_energy_raw(y, self.length),
            Formulation::Phi => phi_energy_raw(y, self.length),
        }
    }

    fn dissipation(&self, y: &[f64]) -> Result<f64> {
        match self.formulation {
            Formulation::Height => height_dissipation_raw(y, self.length),
            Formulation::Phi => phi_dissipation_raw(y, self.length),
        }
    }
}

impl OdeSystem for PdeSystem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let r = match self.formulation {
            Formulation::Height => height_rhs_raw(y, self.length, t)?,
            Formulation::Phi => phi_rhs_raw(y, self.length, t)?,
        };
        dy.copy_from_slice(&r);
        Ok(())
    }

    fn jacobian(&self, t: f64, y: &[f64]) -> Result<DMatrix<f64>> {
        let h = 1e-7 * self.length.max(1.0);
        match self.formulation {
            Formulation::Height => fd_jacobian(|z, out| self.rhs(t, z, out), y, h),
            Formulation::Phi => phi_fd_jacobian(y, self.length, t, h),
        }
    }

    fn check_accepted(&self, t: f64, y: &[f64]) -> Result<()> {
        let slack = ADMISSIBILITY_SLACK * self.bound.abs();
        match self
            .slope(y)
            .into_iter()
            .find(|s| !(*s <= self.bound + slack))
        {
            Some(s) => Err(monotonicity_error(t, s, self.bound)),
            None => Ok(()),
        }
    }
}

/// Central-difference Jacobian of the `phi` right-hand side. Perturbing
/// `q_j` moves only node `j`, so the cotangent sums are updated in `O(K)`.
fn phi_fd_jacobian(q: &[f64], length: f64, t: f64, h: f64) -> Result<DMatrix<f64>> {
    let k = q.len();
    let a = 1.0 / k as f64;
    let w = PI / length;
    let cot = |d: f64| w / (w * wrap(d, length)).tan();
    let x = phi_nodes(q, length);
    let base = cot_sums(&x, length)?;
    let mut jac = DMatrix::zeros(k, k);
    let mut z = q.to_vec();
    let mut sums = base.clone();
    let mut shifted = |j: usize, delta: f64, z: &mut Vec<f64>| -> Result<Vec<f64>> {
        let xj = x[j] + delta;
        let mut own = 0.0;
        for i in 0..k {
            if i == j {
                continue;
            }
            let c_new = cot(x[i] - xj);
            sums[i] = base[i] + a * (c_new - cot(x[i] - x[j]));
            own -= c_new;
        }
        sums[j] = a * own;
        z[j] = q[j] + delta;
        let r = phi_rhs_from_sums(z, &sums, length, t);
        z[j] = q[j];
        r
    };
    for j in 0..k {
        let hp = (q[j] + h) - q[j];
        let hm = q[j] - (q[j] - h);
        let fp = shifted(j, hp, &mut z)?;
        let fm = shifted(j, -hm, &mut z)?;
        for i in 0..k {
            jac[(i, j)] = (fp[i] - fm[i]) / (hp + hm);
        }
    }
    Ok(jac)
}

/// A continuum state that can be evolved by [`integrate_pde`].
pub trait PdeState: Clone {
    fn formulation(&self) -> Formulation;
    fn length(&self) -> f64;
    fn time(&self) -> f64;
    fn periodic_values(&self) -> &[f64];
    /// Upper bound enforced on the slope of every accepted state.
    fn runtime_bound(&self) -> Result<f64>;
    fn with_values(&self, values: Vec<f64>, t: f64) -> Self;
}

impl PdeState for HeightField {
    fn formulation(&self) -> Formulation {
        Formulation::Height
    }
    fn length(&self) -> f64 {
        HeightField::length(self)
    }
    fn time(&self) -> f64 {
        HeightField::time(self)
    }
    fn periodic_values(&self) -> &[f64] {
        self.periodic_part()
    }
    /// `h_x <= beta / 2`.
    fn runtime_bound(&self) -> Result<f64> {
        match self.beta() {
            Some(beta) => Ok(beta / 2.0),
            None => Err(StepflowError::InvalidParameter(
                "height field is not flagged admissible".into(),
            )),
        }
    }
    fn with_values(&self, values: Vec<f64>, t: f64) -> Self {
        self.replace_periodic_part(values, t)
    }
}

impl PdeState for PhiField {
    fn formulation(&self) -> Formulation {
        Formulation::Phi
    }
    fn length(&self) -> f64 {
        PhiField::length(self)
    }
    fn time(&self) -> f64 {
        PhiField::time(self)
    }
    fn periodic_values(&self) -> &[f64] {
        self.periodic_part()
    }
    /// `phi_alpha <= beta2 / 2`.
    fn runtime_bound(&self) -> Result<f64> {
        match self.beta() {
            Some(beta) => Ok(beta / 2.0),
            None => Err(StepflowError::InvalidParameter(
                "phi field is not flagged admissible".into(),
            )),
        }
    }
    fn with_values(&self, values: Vec<f64>, t: f64) -> Self {
        self.replace_periodic_part(values, t)
    }
}

/// Method-of-lines integration of either continuum form to time `t_end`
/// (measured from the state's own time).
pub fn integrate_pde<S: PdeState>(
    state: &S,
    t_end: f64,
    opts: &IntegratorOptions,
) -> IntegrationResult<S> {
    let empty = |error| IntegrationFailure {
        error,
        partial: Trajectory::empty(),
    };
    if let Err(e) = opts.validate() {
        return Err(empty(e));
    }
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(empty(StepflowError::InvalidParameter(format!(
            "final time must be positive, got {t_end}"
        ))));
    }
    let bound = match state.runtime_bound() {
        Ok(b) => b,
        Err(e) => return Err(empty(e)),
    };
    let system = PdeSystem {
        formulation: state.formulation(),
        dim: state.periodic_values().len(),
        length: state.length(),
        bound,
    };
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut energy = Vec::new();
    let mut previous: Option<(f64, Vec<f64>, f64)> = None;
    let mut count = 0usize;
    let mut last_snapshot = usize::MAX;
    let t0 = state.time();
    let outcome = integrator::integrate(
        &system,
        t0,
        state.periodic_values(),
        t0 + t_end,
        &opts.step_control(),
        |t, y| {
            let e = system.energy(y).unwrap_or(f64::NAN);
            let d = system.dissipation(y).unwrap_or(f64::NAN);
            let residual = match &previous {
                Some((tp, yp, ep)) => {
                    let mid: Vec<f64> = yp.iter().zip(y).map(|(a, b)| 0.5 * (a + b)).collect();
                    let dmid = system.dissipation(&mid).unwrap_or(f64::NAN);
                    ((e - ep) / (t - tp) + dmid).abs()
                }
                None => 0.0,
            };
            energy.push(EnergyRecord {
                t,
                energy: e,
                dissipation: d,
                identity_residual: residual,
            });
            if count.is_multiple_of(opts.snapshot_stride) {
                times.push(t);
                states.push(state.with_values(y.to_vec(), t));
                last_snapshot = count;
            }
            previous = Some((t, y.to_vec(), e));
            count += 1;
        },
    );
    if last_snapshot + 1 != count && count > 0 {
        times.push(outcome.t);
        states.push(state.with_values(outcome.y.clone(), outcome.t));
    }
    let traj = Trajectory {
        times,
        states,
        energy,
        stats: outcome.stats,
    };
    match outcome.error {
        None => Ok(traj),
        Some(error) => Err(IntegrationFailure {
            error,
            partial: traj,
        }),
    }
}
