//! State representations of a periodic vicinal surface and the conversions
//! between them.
//!
//! The continuum surface is stored through its periodic parts: the height
//! profile `h(x) = -x/L + p(x)` on a uniform `x`-grid over `[0, L)`, and its
//! inverse, the step-location function `phi(alpha) = -L alpha + q(alpha)` on
//! a uniform `alpha`-grid over `[0, 1)`. The discrete surface is a train of
//! `N` ordered step positions per period, each step dropping the height by
//! `a = 1/N`.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Result, StepflowError};
use crate::spectral::{self, TrigInterpolant};

/// Roundoff allowance applied to the admissibility bounds.
///
/// Initial data may touch the bound exactly (the profile family attains its
/// maximal slope on a grid node), so comparisons allow `1e-12 * |bound|`.
pub const ADMISSIBILITY_SLACK: f64 = 1e-12;

const BISECTION_WIDTH: f64 = 1e-13;
const INVERSION_RESIDUAL: f64 = 1e-12;

/// Period length and number of steps per period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DomainParams {
    length: f64,
    steps: usize,
}

impl DomainParams {
    pub fn new(length: f64, steps: usize) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(StepflowError::InvalidParameter(format!(
                "period length must be positive, got {length}"
            )));
        }
        if steps < 2 {
            return Err(StepflowError::InvalidParameter(format!(
                "need at least two steps per period, got {steps}"
            )));
        }
        Ok(Self { length, steps })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Step height `a = 1/N`.
    pub fn step_height(&self) -> f64 {
        1.0 / self.steps as f64
    }
}

/// Single-mode test profile `h(x) = -x/L + A/(2 pi k) sin(2 pi k x / L)`,
/// so that `h_x = (-1 + A cos(2 pi k x / L)) / L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Profile {
    pub amplitude: f64,
    pub mode: u32,
}

impl Profile {
    pub fn new(amplitude: f64, mode: u32) -> Result<Self> {
        if !amplitude.is_finite() || amplitude.abs() >= 1.0 {
            return Err(StepflowError::ProfileNotMonotone { amplitude });
        }
        if mode == 0 {
            return Err(StepflowError::InvalidParameter(
                "profile mode must be >= 1".into(),
            ));
        }
        Ok(Self { amplitude, mode })
    }

    pub fn flat() -> Self {
        Self {
            amplitude: 0.0,
            mode: 1,
        }
    }

    pub fn periodic_part(&self, x: f64, length: f64) -> f64 {
        let k = self.mode as f64;
        self.amplitude / (2.0 * PI * k) * (2.0 * PI * k * x / length).sin()
    }

    pub fn slope(&self, x: f64, length: f64) -> f64 {
        let k = self.mode as f64;
        (-1.0 + self.amplitude * (2.0 * PI * k * x / length).cos()) / length
    }

    /// The bound `beta` with `h_x <= beta / 2` on the initial profile.
    pub fn beta(&self, length: f64) -> f64 {
        -2.0 * (1.0 - self.amplitude.abs()) / length
    }
}

fn check_grid(size: usize, min: usize) -> Result<()> {
    if size < min || !spectral::is_power_of_two(size) {
        return Err(StepflowError::GridSize { size, min });
    }
    Ok(())
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(StepflowError::InvalidParameter(
            "field samples must be finite".into(),
        ))
    }
}

/// Height profile `h(x) = -x/L + p(x)` sampled at `x_j = j L / M`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeightField {
    length: f64,
    steps: Option<usize>,
    p: Vec<f64>,
    t: f64,
    beta: Option<f64>,
}

impl HeightField {
    /// Wraps samples of the periodic part. The field is not flagged
    /// admissible until [`HeightField::with_beta`] succeeds.
    pub fn new(length: f64, p: Vec<f64>, t: f64) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(StepflowError::InvalidParameter(format!(
                "period length must be positive, got {length}"
            )));
        }
        check_grid(p.len(), 4)?;
        check_finite(&p)?;
        Ok(Self {
            length,
            steps: None,
            p,
            t,
            beta: None,
        })
    }

    /// Flags the field admissible for `beta`, i.e. checks `h_x <= beta/2 < 0`.
    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        if !(beta < 0.0) {
            return Err(StepflowError::InvalidParameter(format!(
                "beta must be negative, got {beta}"
            )));
        }
        self.check_slope_bound(beta / 2.0)?;
        self.beta = Some(beta);
        Ok(self)
    }

    /// Flags the field admissible with `beta = 2 max_j h_x(x_j)`.
    pub fn with_tight_beta(self) -> Result<Self> {
        let max = self.slope().into_iter().fold(f64::NEG_INFINITY, f64::max);
        if !(max < 0.0) {
            return Err(StepflowError::InverseUndefined);
        }
        self.with_beta(2.0 * max)
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = Some(steps);
        self
    }

    pub fn with_time(mut self, t: f64) -> Self {
        self.t = t;
        self
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn steps(&self) -> Option<usize> {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn beta(&self) -> Option<f64> {
        self.beta
    }

    pub fn periodic_part(&self) -> &[f64] {
        &self.p
    }

    pub fn nodes(&self) -> Vec<f64> {
        let m = self.p.len() as f64;
        (0..self.p.len())
            .map(|j| j as f64 * self.length / m)
            .collect()
    }

    /// Total height at the grid nodes.
    pub fn values(&self) -> Vec<f64> {
        self.nodes()
            .iter()
            .zip(&self.p)
            .map(|(x, p)| -x / self.length + p)
            .collect()
    }

    /// `h_x` at the nodes (spectral).
    pub fn slope(&self) -> Vec<f64> {
        spectral::derivative(&self.p, self.length, 1)
            .into_iter()
            .map(|d| d - 1.0 / self.length)
            .collect()
    }

    /// `d^order h / dx^order` at the nodes for `order >= 2`.
    pub fn higher_derivative(&self, order: u32) -> Vec<f64> {
        assert!(order >= 2, "use slope() for the first derivative");
        spectral::derivative(&self.p, self.length, order)
    }

    pub fn interpolant(&self) -> HeightInterpolant {
        HeightInterpolant {
            length: self.length,
            p: TrigInterpolant::new(&self.p, self.length),
        }
    }

    /// Checks the admissibility bound recorded on the field.
    pub fn check_admissible(&self) -> Result<()> {
        match self.beta {
            Some(beta) => self.check_slope_bound(beta / 2.0),
            None => self.check_slope_bound(0.0),
        }
    }

    /// Checks `h_x <= bound` at every node (with roundoff slack).
    pub fn check_slope_bound(&self, bound: f64) -> Result<()> {
        let slack = ADMISSIBILITY_SLACK * bound.abs().max(1.0 / self.length);
        for s in self.slope() {
            let violated = if bound == 0.0 {
                !(s < 0.0)
            } else {
                !(s <= bound + slack)
            };
            if violated {
                return Err(StepflowError::MonotonicityLost {
                    time: self.t,
                    slope: s,
                    bound,
                });
            }
        }
        Ok(())
    }

    pub(crate) fn replace_periodic_part(&self, p: Vec<f64>, t: f64) -> Self {
        Self {
            length: self.length,
            steps: self.steps,
            p,
            t,
            beta: self.beta,
        }
    }
}

/// Off-grid evaluation of a height field by trigonometric interpolation.
#[derive(Debug, Clone)]
pub struct HeightInterpolant {
    length: f64,
    p: TrigInterpolant,
}

impl HeightInterpolant {
    pub fn eval(&self, x: f64) -> f64 {
        -x / self.length + self.p.eval(x)
    }

    pub fn slope(&self, x: f64) -> f64 {
        -1.0 / self.length + self.p.eval_derivative(x, 1)
    }

    pub fn derivative(&self, x: f64, order: u32) -> f64 {
        match order {
            0 => self.eval(x),
            1 => self.slope(x),
            _ => self.p.eval_derivative(x, order),
        }
    }
}

/// Step-location function `phi(alpha) = -L alpha + q(alpha)` sampled at
/// `alpha_j = j / K`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhiField {
    length: f64,
    q: Vec<f64>,
    t: f64,
    beta: Option<f64>,
}

impl PhiField {
    pub fn new(length: f64, q: Vec<f64>, t: f64) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(StepflowError::InvalidParameter(format!(
                "period length must be positive, got {length}"
            )));
        }
        check_grid(q.len(), 4)?;
        check_finite(&q)?;
        Ok(Self {
            length,
            q,
            t,
            beta: None,
        })
    }

    /// Flags the field admissible for `beta2`, i.e. checks `phi_alpha <= beta2 < 0`.
    pub fn with_beta(mut self, beta2: f64) -> Result<Self> {
        if !(beta2 < 0.0) {
            return Err(StepflowError::InvalidParameter(format!(
                "beta2 must be negative, got {beta2}"
            )));
        }
        self.check_slope_bound(beta2)?;
        self.beta = Some(beta2);
        Ok(self)
    }

    /// Flags the field admissible with `beta2 = max_j phi_alpha(alpha_j)`.
    pub fn with_tight_beta(self) -> Result<Self> {
        let max = self.slope().into_iter().fold(f64::NEG_INFINITY, f64::max);
        if !(max < 0.0) {
            return Err(StepflowError::InverseUndefined);
        }
        self.with_beta(max)
    }

    pub fn with_time(mut self, t: f64) -> Self {
        self.t = t;
        self
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn beta(&self) -> Option<f64> {
        self.beta
    }

    pub fn periodic_part(&self) -> &[f64] {
        &self.q
    }

    pub fn nodes(&self) -> Vec<f64> {
        let k = self.q.len() as f64;
        (0..self.q.len()).map(|j| j as f64 / k).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.nodes()
            .iter()
            .zip(&self.q)
            .map(|(a, q)| -self.length * a + q)
            .collect()
    }

    /// `phi_alpha` at the nodes.
    pub fn slope(&self) -> Vec<f64> {
        spectral::derivative(&self.q, 1.0, 1)
            .into_iter()
            .map(|d| d - self.length)
            .collect()
    }

    /// `d^order phi / d alpha^order` at the nodes for `order >= 2`.
    pub fn higher_derivative(&self, order: u32) -> Vec<f64> {
        assert!(order >= 2, "use slope() for the first derivative");
        spectral::derivative(&self.q, 1.0, order)
    }

    pub fn interpolant(&self) -> PhiInterpolant {
        PhiInterpolant {
            length: self.length,
            q: TrigInterpolant::new(&self.q, 1.0),
        }
    }

    pub fn check_admissible(&self) -> Result<()> {
        self.check_slope_bound(self.beta.unwrap_or(0.0))
    }

    /// Checks `phi_alpha <= bound` at every node (with roundoff slack).
    pub fn check_slope_bound(&self, bound: f64) -> Result<()> {
        let slack = ADMISSIBILITY_SLACK * bound.abs().max(self.length);
        for s in self.slope() {
            let violated = if bound == 0.0 {
                !(s < 0.0)
            } else {
                !(s <= bound + slack)
            };
            if violated {
                return Err(StepflowError::MonotonicityLost {
                    time: self.t,
                    slope: s,
                    bound,
                });
            }
        }
        Ok(())
    }

    pub(crate) fn replace_periodic_part(&self, q: Vec<f64>, t: f64) -> Self {
        Self {
            length: self.length,
            q,
            t,
            beta: self.beta,
        }
    }
}

/// Off-grid evaluation of a step-location function.
#[derive(Debug, Clone)]
pub struct PhiInterpolant {
    length: f64,
    q: TrigInterpolant,
}

impl PhiInterpolant {
    pub fn eval(&self, alpha: f64) -> f64 {
        -self.length * alpha + self.q.eval(alpha)
    }

    pub fn derivative(&self, alpha: f64, order: u32) -> f64 {
        match order {
            0 => self.eval(alpha),
            1 => -self.length + self.q.eval_derivative(alpha, 1),
            _ => self.q.eval_derivative(alpha, order),
        }
    }
}

/// Solves `f(x) = target` for a strictly decreasing `f` bracketed by
/// `[lo, hi]`: bisection to `BISECTION_WIDTH`, then one Newton polish.
fn invert_decreasing(
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64) -> f64,
    target: f64,
    mut lo: f64,
    mut hi: f64,
) -> Result<f64> {
    let g = |x: f64| f(x) - target;
    if !(g(lo) >= 0.0 && g(hi) <= 0.0) {
        return Err(StepflowError::InversionFailed { target });
    }
    let scale = hi.abs().max(lo.abs()).max(1.0);
    let mut iterations = 0;
    while hi - lo > BISECTION_WIDTH * scale {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
        if iterations > 200 {
            return Err(StepflowError::InversionFailed { target });
        }
    }
    let mut x = 0.5 * (lo + hi);
    let d = df(x);
    if d < 0.0 {
        let polished = x - g(x) / d;
        if polished.is_finite() && (polished - x).abs() <= (hi - lo).max(1e-15 * scale) * 4.0 {
            x = polished;
        }
    }
    if g(x).abs() > INVERSION_RESIDUAL {
        return Err(StepflowError::InversionFailed { target });
    }
    Ok(x)
}

/// Finds `x` with `h(x) = alpha` on an admissible height field.
pub fn invert_height(interp: &HeightInterpolant, range: (f64, f64), alpha: f64) -> Result<f64> {
    let length = interp.length;
    let (pmin, pmax) = range;
    let pad = 0.1 * (pmax - pmin) + 1e-9;
    let lo = length * (pmin - pad - alpha);
    let hi = length * (pmax + pad - alpha);
    invert_decreasing(|x| interp.eval(x), |x| interp.slope(x), alpha, lo, hi)
}

fn sample_range(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Builds the single-mode test profile on an `M`-point grid.
pub fn build_height_field(profile: Profile, length: f64, grid: usize) -> Result<HeightField> {
    let profile = Profile::new(profile.amplitude, profile.mode)?;
    check_grid(grid, 16)?;
    let xs: Vec<f64> = (0..grid).map(|j| j as f64 * length / grid as f64).collect();
    let p = xs
        .iter()
        .map(|&x| profile.periodic_part(x, length))
        .collect();
    HeightField::new(length, p, 0.0)?.with_beta(profile.beta(length))
}

fn require_decreasing_height(h: &HeightField) -> Result<()> {
    if h.slope().iter().all(|&s| s < 0.0) {
        Ok(())
    } else {
        Err(StepflowError::InverseUndefined)
    }
}

/// Inverts `alpha = h(phi(alpha))` on the grid `alpha_j = j / K`.
pub fn height_to_phi(h: &HeightField, grid: usize) -> Result<PhiField> {
    check_grid(grid, 4)?;
    require_decreasing_height(h)?;
    let interp = h.interpolant();
    let range = sample_range(h.periodic_part());
    let length = h.length();
    let q = (0..grid)
        .map(|j| {
            let alpha = j as f64 / grid as f64;
            invert_height(&interp, range, alpha).map(|x| x + length * alpha)
        })
        .collect::<Result<Vec<_>>>()?;
    PhiField::new(length, q, h.time())?.with_tight_beta()
}

/// Inverts `phi` back to the height profile on the grid `x_j = j L / M`.
pub fn phi_to_height(phi: &PhiField, grid: usize) -> Result<HeightField> {
    check_grid(grid, 4)?;
    if !phi.slope().iter().all(|&s| s < 0.0) {
        return Err(StepflowError::InverseUndefined);
    }
    let interp = phi.interpolant();
    let length = phi.length();
    let (qmin, qmax) = sample_range(phi.periodic_part());
    let pad = 0.1 * (qmax - qmin) + 1e-9 * length;
    let p = (0..grid)
        .map(|j| {
            let x = j as f64 * length / grid as f64;
            let lo = (qmin - pad - x) / length;
            let hi = (qmax + pad - x) / length;
            invert_decreasing(|a| interp.eval(a), |a| interp.derivative(a, 1), x, lo, hi)
                .map(|alpha| alpha + x / length)
        })
        .collect::<Result<Vec<_>>>()?;
    HeightField::new(length, p, phi.time())?.with_tight_beta()
}

/// Step density `rho = -h_x` at the grid nodes.
pub fn height_to_density(h: &HeightField) -> Result<Vec<f64>> {
    let rho: Vec<f64> = h.slope().into_iter().map(|s| -s).collect();
    if rho.iter().all(|&r| r > 0.0) {
        Ok(rho)
    } else {
        Err(StepflowError::InverseUndefined)
    }
}

/// The mean-zero periodic potential `u` with `u_x = -h - x/L + k_0`.
pub fn height_to_u(h: &HeightField) -> Result<Vec<f64>> {
    require_decreasing_height(h)?;
    let p = h.periodic_part();
    let mean = spectral::mean(p);
    let ux: Vec<f64> = p.iter().map(|v| -(v - mean)).collect();
    Ok(spectral::antiderivative(&ux, h.length()))
}

/// One period of ordered step positions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepTrain {
    params: DomainParams,
    t: f64,
    x: Vec<f64>,
}

impl StepTrain {
    pub fn new(params: DomainParams, x: Vec<f64>, t: f64) -> Result<Self> {
        if x.len() != params.steps() {
            return Err(StepflowError::LengthMismatch {
                expected: params.steps(),
                actual: x.len(),
            });
        }
        if let Some(bad) = x.iter().position(|v| !v.is_finite()) {
            return Err(StepflowError::InvalidTrain(format!(
                "non-finite position at index {bad}"
            )));
        }
        if let Some(i) = x.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(StepflowError::InvalidTrain(format!(
                "positions not strictly increasing at index {i}"
            )));
        }
        if !(x[x.len() - 1] - x[0] < params.length()) {
            return Err(StepflowError::InvalidTrain(
                "train spans more than one period".into(),
            ));
        }
        Ok(Self { params, t, x })
    }

    /// Wraps positions without validation (states produced by the integrator).
    pub(crate) fn from_raw(params: DomainParams, x: Vec<f64>, t: f64) -> Self {
        Self { params, t, x }
    }

    /// Equally spaced train `x_i = offset + i L / N`, `i = 1..N`.
    pub fn uniform(params: DomainParams, offset: f64) -> Self {
        let n = params.steps();
        let spacing = params.length() / n as f64;
        let x = (1..=n).map(|i| offset + i as f64 * spacing).collect();
        Self { params, t: 0.0, x }
    }

    pub fn params(&self) -> DomainParams {
        self.params
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn positions(&self) -> &[f64] {
        &self.x
    }

    pub fn into_positions(self) -> Vec<f64> {
        self.x
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn with_time(mut self, t: f64) -> Self {
        self.t = t;
        self
    }

    /// Terrace widths `x_{i+1} - x_i` with `x_{N+1} = x_1 + L`.
    pub fn spacings(&self) -> Vec<f64> {
        spacings(&self.x, self.params.length())
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacings().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn translated(&self, shift: f64) -> Self {
        Self {
            params: self.params,
            t: self.t,
            x: self.x.iter().map(|v| v + shift).collect(),
        }
    }
}

pub(crate) fn spacings(x: &[f64], length: f64) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            if i + 1 < n {
                x[i + 1] - x[i]
            } else {
                x[0] + length - x[n - 1]
            }
        })
        .collect()
}

/// Samples step positions `x_i = phi((N - i) / N)`, `i = 1..N`.
pub fn sample_step_train(phi: &PhiField, steps: usize) -> Result<StepTrain> {
    let params = DomainParams::new(phi.length(), steps)?;
    let interp = phi.interpolant();
    let x: Vec<f64> = (1..=steps)
        .map(|i| interp.eval((steps - i) as f64 / steps as f64))
        .collect();
    if let Some(i) = x.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(StepflowError::SamplingCollision { index: i + 1 });
    }
    if !(x[steps - 1] - x[0] < phi.length()) {
        return Err(StepflowError::SamplingCollision { index: steps - 1 });
    }
    StepTrain::new(params, x, phi.time())
}

/// Piecewise-constant height `h_N(x) = (N - i)/N` on `[x_i, x_{i+1})`,
/// extended by `h_N(x + L) = h_N(x) - 1`.
#[derive(Debug, Clone)]
pub struct StepHeightProfile {
    length: f64,
    x: Vec<f64>,
}

impl StepHeightProfile {
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.x.len();
        let shift = ((x - self.x[0]) / self.length).floor();
        let mut y = x - shift * self.length;
        // Guard against roundoff pushing y out of [x_1, x_1 + L).
        let mut shift = shift;
        if y < self.x[0] {
            y += self.length;
            shift -= 1.0;
        } else if y >= self.x[0] + self.length {
            y -= self.length;
            shift += 1.0;
        }
        // Largest i with x_i <= y.
        let i = self.x.partition_point(|&xi| xi <= y);
        (n - i) as f64 / n as f64 - shift
    }
}

pub fn step_train_to_height_profile(train: &StepTrain) -> StepHeightProfile {
    StepHeightProfile {
        length: train.params().length(),
        x: train.positions().to_vec(),
    }
}
