//! Consistency residuals, convergence studies and stability probes that
//! connect the step ODE to its continuum limit.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::continuum::{height_rhs, integrate_pde};
use crate::error::{Result, StepflowError};
use crate::geometry::{
    build_height_field, height_to_phi, sample_step_train, HeightField, PhiField, Profile, StepTrain,
};
use crate::hilbert_quadrature::{cot_sums, hilbert_pv_direct, hilbert_values};
use crate::integrator::{self, OdeSystem};
use crate::mesoscopic::{
    integrate_ode, ode_jacobian, rhs_directional, rhs_from_potential, IntegratorOptions,
    PotentialVariant, StepSystem,
};
use crate::spectral::{self, TrigInterpolant};

/// Residuals at or below this level are treated as rounding noise.
pub const ROUNDOFF_FLOOR: f64 = 1e-11;

/// Resolution of the continuum fields used as consistency targets.
const TARGET_GRID: usize = 128;

/// Least-squares fit of `ln err = slope ln a + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

fn least_squares(pairs: &[(f64, f64)]) -> OrderFit {
    let n = pairs.len() as f64;
    let pts: Vec<(f64, f64)> = pairs.iter().map(|&(a, e)| (a.ln(), e.ln())).collect();
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    OrderFit {
        slope,
        intercept,
        r2,
    }
}

/// Fits the observed order from `(a, err)` pairs.
pub fn fit_order(pairs: &[(f64, f64)]) -> Result<OrderFit> {
    if pairs.len() < 3 {
        return Err(StepflowError::DegenerateFit(format!(
            "need at least 3 pairs, got {}",
            pairs.len()
        )));
    }
    if let Some(&(a, e)) = pairs
        .iter()
        .find(|(a, e)| !(*a > 0.0 && *e > 0.0 && a.is_finite() && e.is_finite()))
    {
        return Err(StepflowError::DegenerateFit(format!(
            "non-positive pair ({a}, {e})"
        )));
    }
    let a0 = pairs[0].0;
    if pairs.iter().all(|p| p.0 == a0) {
        return Err(StepflowError::DegenerateFit(
            "all step heights equal".into(),
        ));
    }
    Ok(least_squares(pairs))
}

/// Observed order of a residual sequence that may reach the rounding floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OrderEstimate {
    /// Every residual is at or below the floor.
    Exact,
    /// Fit over the residuals above the floor.
    Fitted { fit: OrderFit, points: usize },
    /// Only the coarsest residual is above the floor; `order` is the rate
    /// needed to reach the floor at the next refinement.
    AtLeast { order: f64 },
    /// Residuals do not decrease.
    Degenerate,
}

impl OrderEstimate {
    /// Order as a number: infinite when exact, NaN when degenerate.
    pub fn order(&self) -> f64 {
        match self {
            OrderEstimate::Exact => f64::INFINITY,
            OrderEstimate::Fitted { fit, .. } => fit.slope,
            OrderEstimate::AtLeast { order } => *order,
            OrderEstimate::Degenerate => f64::NAN,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, OrderEstimate::Degenerate)
    }

    pub fn at_least(&self, order: f64) -> bool {
        self.order() >= order
    }

    pub fn at_most(&self, order: f64) -> bool {
        matches!(
            self,
            OrderEstimate::Fitted { .. } | OrderEstimate::AtLeast { .. }
        ) && self.order() <= order
    }
}

impl std::fmt::Display for OrderEstimate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OrderEstimate::Exact => write!(f, "exact (at rounding floor)"),
            OrderEstimate::Fitted { fit, points } => {
                write!(f, "{:.3} (r2 = {:.4}, {points} points)", fit.slope, fit.r2)
            }
            OrderEstimate::AtLeast { order } => write!(f, ">= {order:.3}"),
            OrderEstimate::Degenerate => write!(f, "degenerate"),
        }
    }
}

/// Order estimate from `(a, err)` pairs sorted by decreasing `a`, ignoring
/// residuals at or below `floor`.
pub fn estimate_order(pairs: &[(f64, f64)], floor: f64) -> OrderEstimate {
    let above: Vec<(f64, f64)> = pairs.iter().copied().filter(|p| p.1 > floor).collect();
    match above.len() {
        0 => OrderEstimate::Exact,
        1 => {
            let (a, e) = above[0];
            match pairs.iter().find(|p| p.0 < a) {
                Some(&(next, _)) => OrderEstimate::AtLeast {
                    order: (e / floor).ln() / (a / next).ln(),
                },
                None => OrderEstimate::Degenerate,
            }
        }
        n => {
            let fit = least_squares(&above);
            if fit.slope > 0.0 && fit.slope.is_finite() {
                OrderEstimate::Fitted { fit, points: n }
            } else {
                OrderEstimate::Degenerate
            }
        }
    }
}

/// `sqrt(sum_i a (x_i - phi_i)^2)`.
pub fn weighted_l2_diff(x: &StepTrain, phi_nodes: &[f64]) -> Result<f64> {
    if x.len() != phi_nodes.len() {
        return Err(StepflowError::LengthMismatch {
            expected: x.len(),
            actual: phi_nodes.len(),
        });
    }
    let a = x.params().step_height();
    Ok(x.positions()
        .iter()
        .zip(phi_nodes)
        .map(|(p, q)| a * (p - q) * (p - q))
        .sum::<f64>()
        .sqrt())
}

/// Correction fields of the consistency expansion on the grid of `phi`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrectionFields {
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub v3: Vec<f64>,
    pub r0: Vec<f64>,
}

/// `v1 = -phi_aa / (L phi_a^2)`,
/// `v2 = -phi4 / (12 phi_a^2) + (phi_aa / phi_a^4)(phi_a phi3 / 3 - phi_aa^2 / 4)`,
/// `v3 = (-(5/2) phi_aa^3 - (1/4) phi_a^2 phi4 + 2 phi_a phi_aa phi3) / phi_a^6`,
/// `r0 = v1_a phi_aa / phi_a^2 - v1_aa / phi_a`.
pub fn correction_fields(phi: &PhiField) -> Result<CorrectionFields> {
    phi.check_slope_bound(0.0)?;
    let length = phi.length();
    let p1 = phi.slope();
    let p2 = phi.higher_derivative(2);
    let p3 = phi.higher_derivative(3);
    let p4 = phi.higher_derivative(4);
    let k = phi.len();
    let v1: Vec<f64> = (0..k).map(|j| -p2[j] / (length * p1[j] * p1[j])).collect();
    let v2 = (0..k)
        .map(|j| {
            let (d1, d2) = (p1[j], p2[j]);
            -p4[j] / (12.0 * d1 * d1) + d2 / d1.powi(4) * (d1 * p3[j] / 3.0 - 0.25 * d2 * d2)
        })
        .collect();
    let v3 = (0..k)
        .map(|j| {
            let (d1, d2) = (p1[j], p2[j]);
            (-2.5 * d2.powi(3) - 0.25 * d1 * d1 * p4[j] + 2.0 * d1 * d2 * p3[j]) / d1.powi(6)
        })
        .collect();
    let v1a = spectral::derivative(&v1, 1.0, 1);
    let v1aa = spectral::derivative(&v1, 1.0, 2);
    let r0 = (0..k)
        .map(|j| v1a[j] * p2[j] / (p1[j] * p1[j]) - v1aa[j] / p1[j])
        .collect();
    Ok(CorrectionFields { v1, v2, v3, r0 })
}

/// Sup-norm residuals at one `N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConsistencyRow {
    pub steps: usize,
    pub a: f64,
    /// `I1 - (-(2 pi/L) H(h_x) + v1 a)`.
    pub i1: f64,
    /// `I1 + (2 pi/L) H(h_x)`, without the `v1 a` term.
    pub i1_leading: f64,
    /// `I1` against the target with `v1 = -phi_aa / (2 phi_a^2)`.
    pub i1_half_v1: f64,
    /// `I2 - (h_xx/h_x + v2 a^2)`.
    pub i2: f64,
    /// `I2 - h_xx/h_x`.
    pub i2_leading: f64,
    /// `I3 - (3 h_x h_xx + v3 a^2)`.
    pub i3: f64,
    /// `I3 - 3 h_x h_xx`.
    pub i3_leading: f64,
    /// `F - d phi/dt - r0 a`.
    pub f: f64,
    /// `F - d phi/dt`.
    pub f_leading: f64,
    /// `F - d phi/dt - r0 a` with `r0` built from `v1 = -phi_aa / (2 phi_a^2)`.
    pub f_half_v1: f64,
    /// `fbar - mu - v1 a - (v2 + v3) a^2`.
    pub fbar: f64,
    /// `fbar - mu`.
    pub fbar_leading: f64,
}

/// Observed orders of the residual families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConsistencyOrders {
    pub i1: OrderEstimate,
    pub i1_leading: OrderEstimate,
    pub i1_half_v1: OrderEstimate,
    pub i2: OrderEstimate,
    pub i2_leading: OrderEstimate,
    pub i3: OrderEstimate,
    pub i3_leading: OrderEstimate,
    pub f: OrderEstimate,
    pub f_leading: OrderEstimate,
    pub f_half_v1: OrderEstimate,
    pub fbar: OrderEstimate,
    pub fbar_leading: OrderEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub sweep: Vec<usize>,
    pub rows: Vec<ConsistencyRow>,
    pub orders: ConsistencyOrders,
}

fn check_sweep(sweep: &[usize], min: usize) -> Result<()> {
    if sweep.is_empty() {
        return Err(StepflowError::InvalidParameter("empty N sweep".into()));
    }
    for w in sweep.windows(2) {
        if w[1] != 2 * w[0] {
            return Err(StepflowError::InvalidParameter(format!(
                "N sweep must be dyadic, got {} after {}",
                w[1], w[0]
            )));
        }
    }
    if sweep[0] < min || !spectral::is_power_of_two(sweep[0]) {
        return Err(StepflowError::InvalidParameter(format!(
            "N sweep must start at a power of two >= {min}, got {}",
            sweep[0]
        )));
    }
    Ok(())
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

struct Targets {
    h: HeightField,
    phi: PhiField,
    hilbert: TrigInterpolant,
    ratio: TrigInterpolant,
    cubic: TrigInterpolant,
    velocity: TrigInterpolant,
    fields: [TrigInterpolant; 4],
}

impl Targets {
    fn new(profile: Profile, length: f64) -> Result<Self> {
        let h = build_height_field(profile, length, TARGET_GRID)?;
        let phi = height_to_phi(&h, TARGET_GRID)?;
        let hx = h.slope();
        let hxx = h.higher_derivative(2);
        let ratio: Vec<f64> = hxx.iter().zip(&hx).map(|(b, a)| b / a).collect();
        let cubic: Vec<f64> = hxx.iter().zip(&hx).map(|(b, a)| 3.0 * a * b).collect();
        let c = correction_fields(&phi)?;
        Ok(Self {
            hilbert: TrigInterpolant::new(&hilbert_values(&hx), length),
            ratio: TrigInterpolant::new(&ratio, length),
            cubic: TrigInterpolant::new(&cubic, length),
            velocity: TrigInterpolant::new(&height_rhs(&h)?, length),
            fields: [
                TrigInterpolant::new(&c.v1, 1.0),
                TrigInterpolant::new(&c.v2, 1.0),
                TrigInterpolant::new(&c.v3, 1.0),
                TrigInterpolant::new(&c.r0, 1.0),
            ],
            h,
            phi,
        })
    }
}

/// Discrete terms `I1, I2, I3` of the potential at nodes `x` (with the
/// wrap rule `x_{N+1} = x_1 + L`).
fn potential_terms(x: &[f64], length: f64) -> Result<[Vec<f64>; 3]> {
    let n = x.len();
    let a = 1.0 / n as f64;
    let i1: Vec<f64> = cot_sums(x, length)?
        .into_iter()
        .map(|s| 2.0 / length * s)
        .collect();
    let d: Vec<f64> = (0..n)
        .map(|i| {
            if i + 1 < n {
                x[i + 1] - x[i]
            } else {
                x[0] + length - x[i]
            }
        })
        .collect();
    let mut i2 = vec![0.0; n];
    let mut i3 = vec![0.0; n];
    for i in 0..n {
        let (plus, minus) = (d[i], d[(i + n - 1) % n]);
        i2[i] = 1.0 / plus - 1.0 / minus;
        i3[i] = a * a * (plus.powi(-3) - minus.powi(-3));
    }
    Ok([i1, i2, i3])
}

/// Evaluates the discrete potential terms on the sampled profile and
/// compares them with their continuum expansions.
pub fn consistency_report(
    profile: Profile,
    length: f64,
    sweep: &[usize],
) -> Result<ConsistencyReport> {
    check_sweep(sweep, 16)?;
    let targets = Targets::new(profile, length)?;
    targets.h.check_admissible()?;
    let lambda = 2.0 * PI / length;
    let hinterp = targets.h.interpolant();
    let mut rows = Vec::with_capacity(sweep.len());
    for &n in sweep {
        let train = sample_step_train(&targets.phi, n)?;
        let x = train.positions();
        let a = 1.0 / n as f64;
        let alpha: Vec<f64> = (1..=n).map(|i| (n - i) as f64 * a).collect();
        let [i1, i2, i3] = potential_terms(x, length)?;
        let at = |f: &TrigInterpolant| -> Vec<f64> { x.iter().map(|&xi| f.eval(xi)).collect() };
        let field =
            |k: usize| -> Vec<f64> { alpha.iter().map(|&s| targets.fields[k].eval(s)).collect() };
        let h_term: Vec<f64> = at(&targets.hilbert).iter().map(|v| -lambda * v).collect();
        let ratio = at(&targets.ratio);
        let cubic = at(&targets.cubic);
        let (v1, v2, v3, r0) = (field(0), field(1), field(2), field(3));
        let shifted = |base: &[f64], corr: &[f64], scale: f64| -> Vec<f64> {
            base.iter().zip(corr).map(|(b, c)| b + scale * c).collect()
        };

        // v1 and r0 are linear in the 1/L factor of v1.
        let half_l = 0.5 * length;
        let v1_alt: Vec<f64> = v1.iter().map(|v| half_l * v).collect();
        let r0_alt: Vec<f64> = r0.iter().map(|v| half_l * v).collect();
        let mu: Vec<f64> = (0..n).map(|i| h_term[i] + ratio[i] + cubic[i]).collect();
        let v23: Vec<f64> = v2.iter().zip(&v3).map(|(a, b)| a + b).collect();

        let fbar: Vec<f64> = (0..n).map(|i| i1[i] + i2[i] + i3[i]).collect();
        let mut flux_rhs = vec![0.0; n];
        rhs_from_potential(x, &fbar, length, a, &mut flux_rhs);
        let velocity: Vec<f64> = x
            .iter()
            .map(|&xi| -targets.velocity.eval(xi) / hinterp.slope(xi))
            .collect();

        rows.push(ConsistencyRow {
            steps: n,
            a,
            i1: sup_diff(&i1, &shifted(&h_term, &v1, a)),
            i1_leading: sup_diff(&i1, &h_term),
            i1_half_v1: sup_diff(&i1, &shifted(&h_term, &v1_alt, a)),
            i2: sup_diff(&i2, &shifted(&ratio, &v2, a * a)),
            i2_leading: sup_diff(&i2, &ratio),
            i3: sup_diff(&i3, &shifted(&cubic, &v3, a * a)),
            i3_leading: sup_diff(&i3, &cubic),
            f: sup_diff(&flux_rhs, &shifted(&velocity, &r0, a)),
            f_leading: sup_diff(&flux_rhs, &velocity),
            f_half_v1: sup_diff(&flux_rhs, &shifted(&velocity, &r0_alt, a)),
            fbar: sup_diff(&fbar, &shifted(&shifted(&mu, &v1, a), &v23, a * a)),
            fbar_leading: sup_diff(&fbar, &mu),
        });
    }
    let est = |g: fn(&ConsistencyRow) -> f64| {
        let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.a, g(r))).collect();
        estimate_order(&pairs, ROUNDOFF_FLOOR)
    };
    let orders = ConsistencyOrders {
        i1: est(|r| r.i1),
        i1_leading: est(|r| r.i1_leading),
        i1_half_v1: est(|r| r.i1_half_v1),
        i2: est(|r| r.i2),
        i2_leading: est(|r| r.i2_leading),
        i3: est(|r| r.i3),
        i3_leading: est(|r| r.i3_leading),
        f: est(|r| r.f),
        f_leading: est(|r| r.f_leading),
        f_half_v1: est(|r| r.f_half_v1),
        fbar: est(|r| r.fbar),
        fbar_leading: est(|r| r.fbar_leading),
    };
    Ok(ConsistencyReport {
        sweep: sweep.to_vec(),
        rows,
        orders,
    })
}

/// Sup-norm error of the cotangent grid sum against the adaptive PV oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadratureRow {
    pub steps: usize,
    pub a: f64,
    pub corrected: f64,
    pub uncorrected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadratureStudy {
    pub rows: Vec<QuadratureRow>,
    pub corrected: OrderEstimate,
    pub uncorrected: OrderEstimate,
}

/// Compares `sum_{j != i} a (pi/L) cot(pi (phi_i - phi_j)/L)`, with and
/// without the `(a/2) phi_aa/phi_a^2` term, against
/// `PV int_0^1 (pi/L) cot(pi (phi_i - phi(b))/L) db = -pi H(h_x)(phi_i)`.
pub fn quadrature_study(profile: Profile, length: f64, sweep: &[usize]) -> Result<QuadratureStudy> {
    check_sweep(sweep, 4)?;
    let grid = (4 * sweep[sweep.len() - 1]).max(TARGET_GRID);
    let h = build_height_field(profile, length, TARGET_GRID)?;
    let phi = height_to_phi(&h, grid)?;
    let interp = phi.interpolant();
    let slope = |x: f64| profile.slope(x, length);
    let mut rows = Vec::with_capacity(sweep.len());
    for &n in sweep {
        let a = 1.0 / n as f64;
        let train = sample_step_train(&phi, n)?;
        let x = train.positions();
        let sums = cot_sums(x, length)?;
        let mut corrected = 0.0f64;
        let mut uncorrected = 0.0f64;
        for i in 0..n {
            let alpha = (n - 1 - i) as f64 * a;
            let oracle = -PI * hilbert_pv_direct(slope, x[i], length)?;
            let ratio = interp.derivative(alpha, 2) / interp.derivative(alpha, 1).powi(2);
            corrected = corrected.max((sums[i] + 0.5 * a * ratio - oracle).abs());
            uncorrected = uncorrected.max((sums[i] - oracle).abs());
        }
        rows.push(QuadratureRow {
            steps: n,
            a,
            corrected,
            uncorrected,
        });
    }
    let pairs = |g: fn(&QuadratureRow) -> f64| -> Vec<(f64, f64)> {
        rows.iter().map(|r| (r.a, g(r))).collect()
    };
    Ok(QuadratureStudy {
        corrected: estimate_order(&pairs(|r| r.corrected), ROUNDOFF_FLOOR),
        uncorrected: estimate_order(&pairs(|r| r.uncorrected), ROUNDOFF_FLOOR),
        rows,
    })
}

/// Options of a convergence study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceOptions {
    /// Step ODE integration.
    pub ode: IntegratorOptions,
    /// Reference `phi`-PDE integration.
    pub reference: IntegratorOptions,
    /// Reference grid; defaults to `max(4 max N, 128)`.
    pub reference_grid: Option<usize>,
    /// Maximum number of concurrent per-`N` sub-runs.
    pub jobs: usize,
}

impl Default for ConvergenceOptions {
    fn default() -> Self {
        Self {
            ode: IntegratorOptions {
                rtol: 1e-10,
                atol: 1e-12,
                snapshot_stride: usize::MAX,
                ..IntegratorOptions::default()
            },
            reference: IntegratorOptions {
                rtol: 1e-12,
                atol: 1e-14,
                snapshot_stride: usize::MAX,
                ..IntegratorOptions::default()
            },
            reference_grid: None,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub steps: usize,
    pub a: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub variant: PotentialVariant,
    pub t_end: f64,
    pub reference_grid: usize,
    /// Sorted by increasing `N`.
    pub rows: Vec<ConvergenceRow>,
    /// `None` when some error is at the rounding floor.
    pub fit: Option<OrderFit>,
    pub errors_monotone: bool,
}

/// Weighted-l2 distance at time `t_end` between the step ODE started from
/// `x(0) = phi_N(0)` and the `phi`-PDE evaluated at the step nodes.
pub fn convergence_study(
    profile: Profile,
    length: f64,
    sweep: &[usize],
    t_end: f64,
    v: PotentialVariant,
    opts: &ConvergenceOptions,
) -> Result<ConvergenceTable> {
    check_sweep(sweep, 4)?;
    let max_n = sweep[sweep.len() - 1];
    let grid = opts.reference_grid.unwrap_or((4 * max_n).max(TARGET_GRID));
    if grid < 4 * max_n {
        return Err(StepflowError::InvalidParameter(format!(
            "reference grid {grid} must be at least 4 max N = {}",
            4 * max_n
        )));
    }
    let h0 = build_height_field(profile, length, grid)?;
    let phi0 = height_to_phi(&h0, grid)?;
    let reference =
        integrate_pde(&phi0, t_end, &opts.reference).map_err(|f| StepflowError::SubRun {
            steps: 0,
            source: Box::new(f.error),
        })?;
    let phi_end = reference
        .final_state()
        .ok_or_else(|| StepflowError::InvalidParameter("empty reference trajectory".into()))?;
    let run_one = |n: usize| -> Result<ConvergenceRow> {
        let wrap_err = |e: StepflowError| StepflowError::SubRun {
            steps: n,
            source: Box::new(e),
        };
        let x0 = sample_step_train(&phi0, n).map_err(wrap_err)?;
        let traj = integrate_ode(&x0, t_end, &opts.ode, v).map_err(|f| wrap_err(f.error))?;
        let x_end = traj
            .final_state()
            .ok_or_else(|| wrap_err(StepflowError::InvalidParameter("empty trajectory".into())))?;
        let nodes = sample_step_train(phi_end, n).map_err(wrap_err)?;
        Ok(ConvergenceRow {
            steps: n,
            a: 1.0 / n as f64,
            error: weighted_l2_diff(x_end, nodes.positions())?,
        })
    };
    let rows = run_parallel(sweep, opts.jobs, run_one)?;
    let errors_monotone = rows.windows(2).all(|w| w[1].error < w[0].error);
    let fit = if rows.iter().all(|r| r.error > ROUNDOFF_FLOOR) && rows.len() >= 3 {
        let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.a, r.error)).collect();
        Some(fit_order(&pairs)?)
    } else {
        None
    };
    Ok(ConvergenceTable {
        variant: v,
        t_end,
        reference_grid: grid,
        rows,
        fit,
        errors_monotone,
    })
}

/// Maps `f` over `items` on up to `jobs` threads, keeping the input order.
/// The first error in input order is returned.
fn run_parallel<T: Send>(
    items: &[usize],
    jobs: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(|&n| f(n)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<T>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= items.len() {
                    break;
                }
                let r = f(items[k]);
                *slots[k].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .unwrap_or_else(|e| e.into_inner())
                .unwrap_or_else(|| {
                    Err(StepflowError::InvalidParameter(
                        "sub-run did not complete".into(),
                    ))
                })
        })
        .collect()
}

/// Largest real part of the eigenvalues of the ODE Jacobian at `s`.
pub fn spectral_abscissa(s: &StepTrain, v: PotentialVariant) -> Result<f64> {
    let jac = ode_jacobian(s, v)?;
    Ok(jac
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

struct Linearized {
    base: StepSystem,
    n: usize,
}

impl OdeSystem for Linearized {
    fn dim(&self) -> usize {
        2 * self.n
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let (x, z) = y.split_at(self.n);
        let (dx, dz) = dy.split_at_mut(self.n);
        self.base.rhs(t, x, dx)?;
        rhs_directional(x, z, self.base.params, self.base.coefficient, dz)
    }

    /// Block lower-triangular `[[J, 0], [*, J]]` with the second-derivative
    /// block dropped; Newton only needs an approximation.
    fn jacobian(&self, t: f64, y: &[f64]) -> Result<DMatrix<f64>> {
        let j = self.base.jacobian(t, &y[..self.n])?;
        let mut full = DMatrix::zeros(2 * self.n, 2 * self.n);
        full.view_mut((0, 0), (self.n, self.n)).copy_from(&j);
        full.view_mut((self.n, self.n), (self.n, self.n))
            .copy_from(&j);
        Ok(full)
    }

    fn check_accepted(&self, t: f64, y: &[f64]) -> Result<()> {
        self.base.check_accepted(t, &y[..self.n])
    }
}

/// Integrates the linearized equation `z' = J(x(t)) z` along the base
/// trajectory and returns `max_t |z(t)| / |z(0)|` in the weighted norm.
pub fn stability_probe(
    s0: &StepTrain,
    z0: &[f64],
    t_end: f64,
    v: PotentialVariant,
    opts: &IntegratorOptions,
) -> Result<f64> {
    let n = s0.len();
    if z0.len() != n {
        return Err(StepflowError::LengthMismatch {
            expected: n,
            actual: z0.len(),
        });
    }
    let norm = |z: &[f64]| z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let z_norm = norm(z0);
    opts.validate()?;
    if z_norm == 0.0 {
        // z stays zero; the ratio is taken as 1
        return Ok(1.0);
    }
    if !z_norm.is_finite() {
        return Err(StepflowError::InvalidParameter(
            "perturbation must be finite".into(),
        ));
    }
    let params = s0.params();
    let system = Linearized {
        base: StepSystem {
            params,
            coefficient: v.coefficient(params),
            threshold: opts.collision_eps * params.step_height() * params.length(),
        },
        n,
    };
    let mut y0 = s0.positions().to_vec();
    y0.extend_from_slice(z0);
    let mut growth = 1.0f64;
    let t0 = s0.time();
    let outcome = integrator::integrate(
        &system,
        t0,
        &y0,
        t0 + t_end,
        &opts.step_control(),
        |_, y| {
            growth = growth.max(norm(&y[n..]) / z_norm);
        },
    );
    match outcome.error {
        Some(e) => Err(e),
        None if growth.is_finite() => Ok(growth),
        None => Err(StepflowError::InvalidParameter(
            "linearized growth overflowed".into(),
        )),
    }
}

/// Wavy perturbation `z_i = sum_k c_k cos(2 pi k i / N + theta_k)` used by the probes.
pub fn probe_direction(steps: usize, modes: usize, scale: f64) -> Vec<f64> {
    (0..steps)
        .map(|i| {
            (1..=modes)
                .map(|k| {
                    let phase = 2.0 * PI * k as f64 * i as f64 / steps as f64 + 0.7 * k as f64;
                    scale * phase.cos() / k as f64
                })
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DomainParams;

    #[test]
    fn fit_recovers_power_law() {
        let pairs: Vec<(f64, f64)> = [0.1, 0.05, 0.025, 0.0125]
            .iter()
            .map(|&a| (a, 3.0 * a * a))
            .collect();
        let fit = fit_order(&pairs).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.intercept - 3.0f64.ln()).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_degenerate_input() {
        assert!(fit_order(&[(0.1, 1.0), (0.05, 0.5)]).is_err());
        assert!(fit_order(&[(0.1, 1.0), (0.05, 0.0), (0.025, 0.1)]).is_err());
        assert!(fit_order(&[(0.1, 1.0), (0.1, 0.5), (0.1, 0.2)]).is_err());
    }

    #[test]
    fn floor_aware_estimates() {
        let floor = 1e-11;
        let exact = [(0.1, 1e-13), (0.05, 2e-13), (0.025, 5e-14)];
        assert_eq!(estimate_order(&exact, floor), OrderEstimate::Exact);
        let one = [(0.1, 1e-9), (0.05, 1e-12), (0.025, 1e-12)];
        let est = estimate_order(&one, floor);
        assert!(matches!(est, OrderEstimate::AtLeast { .. }));
        assert!((est.order() - (100.0f64).ln() / 2.0f64.ln()).abs() < 1e-12);
        let growing = [(0.1, 1e-3), (0.05, 2e-3), (0.025, 4e-3)];
        assert!(estimate_order(&growing, floor).is_degenerate());
        let fitted = [(0.1, 1e-2), (0.05, 2.5e-3), (0.025, 1e-12)];
        match estimate_order(&fitted, floor) {
            OrderEstimate::Fitted { fit, points } => {
                assert_eq!(points, 2);
                assert!((fit.slope - 2.0).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
        assert!(!OrderEstimate::Exact.at_most(10.0));
        assert!(OrderEstimate::Exact.at_least(10.0));
    }

    #[test]
    fn weighted_norm_values() {
        let p = DomainParams::new(1.0, 4).unwrap();
        let s = StepTrain::uniform(p, 0.0);
        let shifted: Vec<f64> = s.positions().iter().map(|x| x + 0.1).collect();
        // sqrt(4 * (1/4) * 0.01)
        assert!((weighted_l2_diff(&s, &shifted).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(weighted_l2_diff(&s, s.positions()).unwrap(), 0.0);
        assert!(weighted_l2_diff(&s, &[0.0; 3]).is_err());

        let u: Vec<f64> = s.positions().iter().map(|x| x + 0.03 * x.sin()).collect();
        let t = StepTrain::new(p, u.clone(), 0.0).unwrap();
        let direct = weighted_l2_diff(&s, &shifted).unwrap();
        let via = weighted_l2_diff(&s, &u).unwrap() + weighted_l2_diff(&t, &shifted).unwrap();
        assert!(direct <= via + 1e-15);
    }

    #[test]
    fn correction_fields_vanish_on_flat_profile() {
        let phi = PhiField::new(1.0, vec![0.0; 32], 0.0).unwrap();
        let c = correction_fields(&phi).unwrap();
        for field in [&c.v1, &c.v2, &c.v3, &c.r0] {
            assert!(field.iter().all(|v| v.abs() < 1e-14));
        }
    }

    #[test]
    fn v1_matches_closed_form() {
        let (l, e) = (2.0, 0.1);
        let k = 64;
        let q: Vec<f64> = (0..k)
            .map(|j| e * (2.0 * PI * j as f64 / k as f64).sin())
            .collect();
        let c = correction_fields(&PhiField::new(l, q, 0.0).unwrap()).unwrap();
        for j in 0..k {
            let w = 2.0 * PI * j as f64 / k as f64;
            let p1 = -l + 2.0 * PI * e * w.cos();
            let p2 = -4.0 * PI * PI * e * w.sin();
            assert!((c.v1[j] + p2 / (l * p1 * p1)).abs() < 1e-10);
        }
    }

    #[test]
    fn uniform_profile_is_consistent_to_rounding() {
        let r = consistency_report(Profile::flat(), 1.0, &[16, 32, 64]).unwrap();
        let o = r.orders;
        for est in [o.i1, o.i2, o.i3, o.f, o.fbar] {
            assert_eq!(est, OrderEstimate::Exact, "{r:?}");
        }
    }

    #[test]
    fn sweeps_must_be_dyadic() {
        assert!(consistency_report(Profile::flat(), 1.0, &[16, 48]).is_err());
        assert!(quadrature_study(Profile::flat(), 1.0, &[]).is_err());
    }

    #[test]
    fn uniform_train_is_neutrally_stable() {
        let s = StepTrain::uniform(DomainParams::new(1.0, 16).unwrap(), 0.0);
        let abscissa = spectral_abscissa(&s, PotentialVariant::Standard).unwrap();
        assert!(abscissa <= 1e-6, "{abscissa}");
        let opts = IntegratorOptions::default();
        assert_eq!(
            stability_probe(&s, &[0.0; 16], 1e-4, PotentialVariant::Standard, &opts).unwrap(),
            1.0
        );
        // translation is a neutral direction
        let g = stability_probe(&s, &[1e-4; 16], 1e-4, PotentialVariant::Standard, &opts).unwrap();
        assert!((g - 1.0).abs() < 1e-12, "{g}");
        let z = probe_direction(16, 3, 1e-4);
        let g = stability_probe(&s, &z, 1e-4, PotentialVariant::Standard, &opts).unwrap();
        assert!((1.0..1.0 + 1e-9).contains(&g), "{g}");
        assert!(stability_probe(&s, &[0.0; 3], 1e-4, PotentialVariant::Standard, &opts).is_err());
    }

    #[test]
    fn probe_direction_has_zero_mean() {
        let z = probe_direction(32, 4, 0.5);
        assert_eq!(z, probe_direction(32, 4, 0.5));
        assert!(z.iter().sum::<f64>().abs() < 1e-12);
    }
}
