//! The discrete step-flow model.
//!
//! Steps `x_1 < ... < x_N` in one period move by
//! `x_i' = (1/a) [(f_{i+1} - f_i)/(x_{i+1} - x_i) - (f_i - f_{i-1})/(x_i - x_{i-1})]`
//! with the chemical potential `f_i = (1/a) dE^N/dx_i`. Indices wrap as
//! `x_{N+1} = x_1 + L`, `x_0 = x_N - L`, `f_{N+1} = f_1`.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Result, StepflowError};
use crate::geometry::{spacings, DomainParams, StepTrain};
use crate::integrator::{self, fd_jacobian, Method, OdeSystem, Stats, StepControl};

/// Which nearest-neighbour coefficient `c_v` multiplies `1/(x_{i+1}-x_i) - 1/(x_i-x_{i-1})`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialVariant {
    /// `c_v = 1`.
    Standard,
    /// `c_v = 1 - a/L`, which removes the first-order consistency error.
    Corrected,
}

impl PotentialVariant {
    pub fn coefficient(self, params: DomainParams) -> f64 {
        match self {
            PotentialVariant::Standard => 1.0,
            PotentialVariant::Corrected => 1.0 - params.step_height() / params.length(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PotentialVariant::Standard => "standard",
            PotentialVariant::Corrected => "corrected",
        }
    }
}

impl std::str::FromStr for PotentialVariant {
    type Err = StepflowError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(PotentialVariant::Standard),
            "corrected" => Ok(PotentialVariant::Corrected),
            other => Err(StepflowError::InvalidParameter(format!(
                "unknown potential variant '{other}'"
            ))),
        }
    }
}

/// Time-stepping options shared by the ODE and PDE drivers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntegratorOptions {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    pub dt_max: f64,
    /// Minimal admissible spacing as a fraction of `a L`.
    pub collision_eps: f64,
    /// Keep every `snapshot_stride`-th accepted state (the final state is always kept).
    pub snapshot_stride: usize,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        Self {
            method: Method::Implicit,
            rtol: 1e-8,
            atol: 1e-10,
            dt_max: f64::INFINITY,
            collision_eps: 0.05,
            snapshot_stride: 1,
        }
    }
}

impl IntegratorOptions {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_unit(self.rtol) {
            return Err(StepflowError::InvalidParameter(format!(
                "rtol must lie in (0, 1), got {}",
                self.rtol
            )));
        }
        if !in_unit(self.atol) {
            return Err(StepflowError::InvalidParameter(format!(
                "atol must lie in (0, 1), got {}",
                self.atol
            )));
        }
        if !(self.dt_max > 0.0) {
            return Err(StepflowError::InvalidParameter(format!(
                "dt_max must be positive, got {}",
                self.dt_max
            )));
        }
        if !(self.collision_eps > 0.0 && self.collision_eps < 0.5) {
            return Err(StepflowError::InvalidParameter(format!(
                "collision_eps must lie in (0, 0.5), got {}",
                self.collision_eps
            )));
        }
        if self.snapshot_stride == 0 {
            return Err(StepflowError::InvalidParameter(
                "snapshot_stride must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn step_control(&self) -> StepControl {
        StepControl {
            method: self.method,
            rtol: self.rtol,
            atol: self.atol,
            dt_max: self.dt_max,
            dt_initial: None,
            max_steps: 2_000_000,
        }
    }
}

/// Energy diagnostics at one accepted time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyRecord {
    pub t: f64,
    pub energy: f64,
    pub dissipation: f64,
    /// `|Delta E / Delta t + D(midpoint)|` for the step ending at `t` (0 at the start).
    pub identity_residual: f64,
}

/// Time history of an integration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory<S> {
    pub times: Vec<f64>,
    pub states: Vec<S>,
    /// One record per accepted step.
    pub energy: Vec<EnergyRecord>,
    pub stats: Stats,
}

impl<S> Trajectory<S> {
    pub(crate) fn empty() -> Self {
        Self {
            times: Vec::new(),
            states: Vec::new(),
            energy: Vec::new(),
            stats: Stats::default(),
        }
    }

    pub fn final_state(&self) -> Option<&S> {
        self.states.last()
    }

    pub fn final_time(&self) -> Option<f64> {
        self.times.last().copied()
    }
}

/// A run that stopped early, with everything accepted before the failure.
#[derive(Debug, Clone)]
pub struct IntegrationFailure<S> {
    pub error: StepflowError,
    pub partial: Trajectory<S>,
}

impl<S> IntegrationFailure<S> {
    /// Time of the last accepted state.
    pub fn failure_time(&self) -> f64 {
        self.partial.final_time().unwrap_or(0.0)
    }
}

impl<S: fmt::Debug> fmt::Display for IntegrationFailure<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (last accepted t = {})",
            self.error,
            self.failure_time()
        )
    }
}

impl<S: fmt::Debug> std::error::Error for IntegrationFailure<S> {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub type IntegrationResult<S> = std::result::Result<Trajectory<S>, IntegrationFailure<S>>;

/// Reduces a separation to `[-L/2, L/2]`, which keeps `tan` well conditioned.
pub(crate) fn wrap(d: f64, length: f64) -> f64 {
    d - length * (d / length).round()
}

fn check_positive_spacings(t: f64, d: &[f64]) -> Result<()> {
    match d.iter().copied().enumerate().find(|&(_, v)| !(v > 0.0)) {
        Some((_, spacing)) => Err(StepflowError::StepCollision {
            time: t,
            spacing,
            threshold: 0.0,
        }),
        None => Ok(()),
    }
}

/// Chemical potential with an explicit nearest-neighbour coefficient `c_v`.
pub fn chemical_potential_with_coefficient(
    x: &[f64],
    params: DomainParams,
    coefficient: f64,
) -> Result<Vec<f64>> {
    let n = params.steps();
    if x.len() != n {
        return Err(StepflowError::LengthMismatch {
            expected: n,
            actual: x.len(),
        });
    }
    let length = params.length();
    let a = params.step_height();
    let d = spacings(x, length);
    check_positive_spacings(0.0, &d)?;

    let w = PI / length;
    let pair = 2.0 * a / length;
    let cot = |d: f64| w / (w * wrap(d, length)).tan();
    let mut f = vec![0.0; n];
    for i in 0..n {
        // Neighbours at offsets +k and -k are summed together so that
        // symmetric configurations cancel exactly.
        let mut acc = 0.0;
        for k in 1..=n / 2 {
            let up = (i + k) % n;
            let down = (i + n - k) % n;
            acc += if up == down {
                cot(x[up] - x[i])
            } else {
                cot(x[up] - x[i]) + cot(x[down] - x[i])
            };
        }
        f[i] = -pair * acc;
    }
    let a2 = a * a;
    for i in 0..n {
        let plus = d[i];
        let minus = d[(i + n - 1) % n];
        f[i] += coefficient * (1.0 / plus - 1.0 / minus) + a2 * (plus.powi(-3) - minus.powi(-3));
    }
    Ok(f)
}

/// `f_i = -(2a/L) sum_{j != i} (pi/L) cot(pi (x_j - x_i)/L) + c_v [1/D_+ - 1/D_-] + a^2 [1/D_+^3 - 1/D_-^3]`.
pub fn chemical_potential(s: &StepTrain, v: PotentialVariant) -> Result<Vec<f64>> {
    chemical_potential_with_coefficient(s.positions(), s.params(), v.coefficient(s.params()))
}

pub(crate) fn rhs_from_potential(x: &[f64], f: &[f64], length: f64, a: f64, out: &mut [f64]) {
    let n = x.len();
    let d = spacings(x, length);
    let flux = |i: usize| (f[(i + 1) % n] - f[i]) / d[i];
    for i in 0..n {
        out[i] = (flux(i) - flux((i + n - 1) % n)) / a;
    }
}

pub(crate) fn rhs_slice(
    x: &[f64],
    params: DomainParams,
    coefficient: f64,
    out: &mut [f64],
) -> Result<()> {
    let f = chemical_potential_with_coefficient(x, params, coefficient)?;
    rhs_from_potential(x, &f, params.length(), params.step_height(), out);
    Ok(())
}

/// Exact action `J(x) z` of the right-hand side's derivative.
pub(crate) fn rhs_directional(
    x: &[f64],
    z: &[f64],
    params: DomainParams,
    coefficient: f64,
    out: &mut [f64],
) -> Result<()> {
    let n = params.steps();
    let length = params.length();
    let a = params.step_height();
    let f = chemical_potential_with_coefficient(x, params, coefficient)?;
    let d = spacings(x, length);
    let dz: Vec<f64> = (0..n).map(|i| z[(i + 1) % n] - z[i]).collect();

    let w = PI / length;
    let pair = 2.0 * a / length;
    let mut df = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            if j != i {
                let s = (w * wrap(x[j] - x[i], length)).sin();
                acc += w * w / (s * s) * (z[j] - z[i]);
            }
        }
        df[i] = pair * acc;
    }
    let a2 = a * a;
    for i in 0..n {
        let im = (i + n - 1) % n;
        let (plus, minus) = (d[i], d[im]);
        df[i] += -coefficient * (dz[i] / (plus * plus) - dz[im] / (minus * minus))
            - 3.0 * a2 * (dz[i] / plus.powi(4) - dz[im] / minus.powi(4));
    }
    let dflux = |i: usize| {
        let ip = (i + 1) % n;
        (df[ip] - df[i]) / d[i] - (f[ip] - f[i]) * dz[i] / (d[i] * d[i])
    };
    for i in 0..n {
        out[i] = (dflux(i) - dflux((i + n - 1) % n)) / a;
    }
    Ok(())
}

/// Step velocities.
pub fn ode_rhs(s: &StepTrain, v: PotentialVariant) -> Result<Vec<f64>> {
    let mut out = vec![0.0; s.len()];
    rhs_slice(
        s.positions(),
        s.params(),
        v.coefficient(s.params()),
        &mut out,
    )?;
    Ok(out)
}

fn energy_slice(x: &[f64], params: DomainParams, coefficient: f64) -> Result<f64> {
    let n = params.steps();
    if x.len() != n {
        return Err(StepflowError::LengthMismatch {
            expected: n,
            actual: x.len(),
        });
    }
    let length = params.length();
    let a = params.step_height();
    let d = spacings(x, length);
    check_positive_spacings(0.0, &d)?;
    let w = PI / length;
    let mut pair = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in (i + 1)..n {
            row += (w * wrap(x[j] - x[i], length)).sin().abs().ln();
        }
        pair += row;
    }
    let terraces: f64 = d
        .iter()
        .map(|&di| -coefficient * (di / a).ln() + 0.5 * a * a / (di * di))
        .sum();
    Ok(a * a * (2.0 / length) * pair + a * terraces)
}

/// `E^N = a^2 sum_{i<j} (2/L) ln|sin(pi (x_j - x_i)/L)| + a sum_i [-ln(D_i/a) + (a^2/2)/D_i^2]`.
pub fn discrete_energy(s: &StepTrain) -> Result<f64> {
    discrete_energy_for(s, PotentialVariant::Standard)
}

/// Energy whose scaled gradient is the chosen variant's chemical potential
/// (the `-ln` terrace term carries `c_v`).
pub fn discrete_energy_for(s: &StepTrain, v: PotentialVariant) -> Result<f64> {
    energy_slice(s.positions(), s.params(), v.coefficient(s.params()))
}

fn dissipation_from_potential(x: &[f64], f: &[f64], length: f64) -> f64 {
    let n = x.len();
    let d = spacings(x, length);
    (0..n)
        .map(|i| {
            let df = f[(i + 1) % n] - f[i];
            df * df / d[i]
        })
        .sum()
}

/// `D = sum_i (f_{i+1} - f_i)^2 / (x_{i+1} - x_i)`.
pub fn dissipation_rate(s: &StepTrain, v: PotentialVariant) -> Result<f64> {
    let f = chemical_potential(s, v)?;
    Ok(dissipation_from_potential(
        s.positions(),
        &f,
        s.params().length(),
    ))
}

/// `J_ij = d x_i' / d x_j` by central differences with step `1e-7 a L`.
pub fn ode_jacobian(s: &StepTrain, v: PotentialVariant) -> Result<DMatrix<f64>> {
    let params = s.params();
    let c = v.coefficient(params);
    let h = 1e-7 * params.step_height() * params.length();
    fd_jacobian(|z, out| rhs_slice(z, params, c, out), s.positions(), h)
}

pub(crate) struct StepSystem {
    pub params: DomainParams,
    pub coefficient: f64,
    pub threshold: f64,
}

impl OdeSystem for StepSystem {
    fn dim(&self) -> usize {
        self.params.steps()
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        rhs_slice(y, self.params, self.coefficient, dy)
    }

    fn jacobian(&self, _t: f64, y: &[f64]) -> Result<DMatrix<f64>> {
        let h = 1e-7 * self.params.step_height() * self.params.length();
        fd_jacobian(
            |z, out| rhs_slice(z, self.params, self.coefficient, out),
            y,
            h,
        )
    }

    fn check_accepted(&self, t: f64, y: &[f64]) -> Result<()> {
        let d = spacings(y, self.params.length());
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min >= self.threshold) {
            return Err(StepflowError::StepCollision {
                time: t,
                spacing: min,
                threshold: self.threshold,
            });
        }
        Ok(())
    }
}

/// Integrates the step ODE to time `t_end`.
pub fn integrate_ode(
    s0: &StepTrain,
    t_end: f64,
    opts: &IntegratorOptions,
    v: PotentialVariant,
) -> IntegrationResult<StepTrain> {
    let fail = |error| IntegrationFailure {
        error,
        partial: Trajectory::empty(),
    };
    if let Err(e) = opts.validate() {
        return Err(fail(e));
    }
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(fail(StepflowError::InvalidParameter(format!(
            "final time must be positive, got {t_end}"
        ))));
    }
    let params = s0.params();
    let coefficient = v.coefficient(params);
    let system = StepSystem {
        params,
        coefficient,
        threshold: opts.collision_eps * params.step_height() * params.length(),
    };
    let length = params.length();
    let t_start = s0.time();

    let diagnostics = |x: &[f64]| -> (f64, f64) {
        let e = energy_slice(x, params, coefficient).unwrap_or(f64::NAN);
        let d = chemical_potential_with_coefficient(x, params, coefficient)
            .map(|f| dissipation_from_potential(x, &f, length))
            .unwrap_or(f64::NAN);
        (e, d)
    };

    let mut traj = Trajectory::empty();
    let mut previous: Option<(f64, Vec<f64>, f64)> = None;
    let mut count = 0usize;
    let mut last_snapshot = usize::MAX;
    let outcome = integrator::integrate(
        &system,
        t_start,
        s0.positions(),
        t_start + t_end,
        &opts.step_control(),
        |t, y| {
            let (e, d) = diagnostics(y);
            let residual = match &previous {
                Some((tp, yp, ep)) => {
                    let mid: Vec<f64> = yp.iter().zip(y).map(|(a, b)| 0.5 * (a + b)).collect();
                    let (_, dmid) = diagnostics(&mid);
                    ((e - ep) / (t - tp) + dmid).abs()
                }
                None => 0.0,
            };
            traj.energy.push(EnergyRecord {
                t,
                energy: e,
                dissipation: d,
                identity_residual: residual,
            });
            if count.is_multiple_of(opts.snapshot_stride) {
                traj.times.push(t);
                traj.states.push(StepTrain::from_raw(params, y.to_vec(), t));
                last_snapshot = count;
            }
            previous = Some((t, y.to_vec(), e));
            count += 1;
        },
    );
    traj.stats = outcome.stats;
    if last_snapshot + 1 != count && count > 0 {
        traj.times.push(outcome.t);
        traj.states
            .push(StepTrain::from_raw(params, outcome.y.clone(), outcome.t));
    }
    match outcome.error {
        None => Ok(traj),
        Some(error) => Err(IntegrationFailure {
            error,
            partial: traj,
        }),
    }
}
