//! Periodic Hilbert transform and singular quadrature rules.
//!
//! `H` is the `L`-periodic Hilbert transform
//! `(Hu)(x) = (1/L) PV int_0^L u(x - s) cot(pi s / L) ds`,
//! which acts on `e^{2 pi i k x / L}` as the multiplier `-i sgn(k)`.

use std::f64::consts::{LN_2, PI};

use num_complex::Complex64;

use crate::error::{Result, StepflowError};
use crate::geometry::PhiField;
use crate::spectral;

/// `zeta'(-2) = -zeta(3) / (4 pi^2)`.
const ZETA_PRIME_MINUS_TWO: f64 = -0.030_448_457_058_393_27;

/// Samples of an `L`-periodic function at `x_j = j L / M`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicSamples {
    length: f64,
    values: Vec<f64>,
}

impl PeriodicSamples {
    pub fn new(length: f64, values: Vec<f64>) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(StepflowError::InvalidParameter(format!(
                "period length must be positive, got {length}"
            )));
        }
        if !spectral::is_power_of_two(values.len()) {
            return Err(StepflowError::GridSize {
                size: values.len(),
                min: 1,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StepflowError::InvalidParameter(
                "samples must be finite".into(),
            ));
        }
        Ok(Self { length, values })
    }

    /// Samples `f` on the `M`-point grid.
    pub fn from_fn(length: f64, size: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = (0..size)
            .map(|j| f(j as f64 * length / size as f64))
            .collect();
        Self::new(length, values)
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Hilbert transform as the Fourier multiplier `-i sgn(k)`; the zero and
/// Nyquist modes are annihilated.
pub fn hilbert_spectral(u: &PeriodicSamples) -> PeriodicSamples {
    let values = hilbert_values(&u.values);
    PeriodicSamples {
        length: u.length,
        values,
    }
}

pub(crate) fn hilbert_values(values: &[f64]) -> Vec<f64> {
    spectral::apply_multiplier(values, |k| Complex64::new(0.0, -(k.signum() as f64)))
}

/// Direct principal-value evaluation of `(Hu)(x)`.
///
/// Folds `s` and `-s` together, integrating the regular function
/// `(1/L) [u(x - s) - u(x + s)] cot(pi s / L)` over `(0, L/2)` by adaptive
/// Gauss-Kronrod quadrature.
pub fn hilbert_pv_direct(u: impl Fn(f64) -> f64, x: f64, length: f64) -> Result<f64> {
    let integrand = |s: f64| {
        if s <= 0.0 {
            return 0.0;
        }
        (u(x - s) - u(x + s)) / (PI * s / length).tan()
    };
    let value = adaptive_gauss_kronrod(&integrand, 0.0, 0.5 * length, 1e-13, 2000)?;
    Ok(value / length)
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const GAUSS_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One G7-K15 panel: (Kronrod estimate, |Kronrod - Gauss|).
fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = GK_WEIGHTS[7] * fc;
    let mut gauss = GAUSS_WEIGHTS[3] * fc;
    for j in 0..7 {
        let dx = h * GK_NODES[j];
        let pair = f(c - dx) + f(c + dx);
        kronrod += GK_WEIGHTS[j] * pair;
        if j % 2 == 1 {
            gauss += GAUSS_WEIGHTS[j / 2] * pair;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Globally adaptive G7-K15: bisects the panel with the largest error
/// estimate until the summed estimate is below `tol`.
fn adaptive_gauss_kronrod(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    tol: f64,
    max_panels: usize,
) -> Result<f64> {
    let mut panels = vec![(a, b, gk15(f, a, b))];
    loop {
        let (value, err) = panels
            .iter()
            .fold((0.0, 0.0), |(v, e), p| (v + p.2 .0, e + p.2 .1));
        if !value.is_finite() {
            return Err(StepflowError::QuadratureFailure(
                "non-finite integrand".into(),
            ));
        }
        if err <= tol {
            return Ok(value);
        }
        if panels.len() >= max_panels {
            return Err(StepflowError::QuadratureFailure(format!(
                "no convergence with {max_panels} panels, error estimate {err:e}"
            )));
        }
        let worst = (0..panels.len())
            .max_by(|&i, &j| panels[i].2 .1.total_cmp(&panels[j].2 .1))
            .expect("at least one panel");
        let (lo, hi, _) = panels.swap_remove(worst);
        let m = 0.5 * (lo + hi);
        panels.push((lo, m, gk15(f, lo, m)));
        panels.push((m, hi, gk15(f, m, hi)));
    }
}

/// Corrected cotangent grid sum approximating
/// `PV int_0^1 (pi/L) cot(pi (phi(alpha_i) - phi(alpha)) / L) d alpha`
/// on the nodes `alpha_j = (N - j)/N`, `j = 1..=N`:
///
/// `sum_{j != i} a (pi/L) cot(pi (phi_i - phi_j) / L) + (a/2) phi_aa / phi_a^2`.
///
/// `i` is 1-based.
pub fn pv_cot_grid_corrected(phi: &PhiField, i: usize, steps: usize) -> Result<f64> {
    if steps < 2 || i == 0 || i > steps {
        return Err(StepflowError::InvalidParameter(format!(
            "node index {i} out of range 1..={steps}"
        )));
    }
    let interp = phi.interpolant();
    let alpha = |j: usize| (steps - j) as f64 / steps as f64;
    let x: Vec<f64> = (1..=steps).map(|j| interp.eval(alpha(j))).collect();
    let ai = alpha(i);
    let ratio = interp.derivative(ai, 2) / interp.derivative(ai, 1).powi(2);
    let sum = cot_sum_at(&x, i - 1, phi.length())?;
    Ok(sum / steps as f64 + 0.5 / steps as f64 * ratio)
}

/// `sum_{j != i} (pi/L) cot(pi (x_i - x_j) / L)` (unweighted).
pub(crate) fn cot_sum_at(x: &[f64], i: usize, length: f64) -> Result<f64> {
    let w = PI / length;
    let mut sum = 0.0;
    for (j, &xj) in x.iter().enumerate() {
        if j == i {
            continue;
        }
        let t = (w * crate::mesoscopic::wrap(x[i] - xj, length)).tan();
        if t == 0.0 || !t.is_finite() {
            return Err(StepflowError::QuadratureCollision { index: i + 1 });
        }
        sum += w / t;
    }
    Ok(sum)
}

/// `a sum_{j != i} (pi/L) cot(pi (x_i - x_j) / L)` at every node, with
/// `a = 1/len`. The caller adds the diagonal correction.
pub(crate) fn cot_sums(x: &[f64], length: f64) -> Result<Vec<f64>> {
    let n = x.len();
    let w = PI / length;
    let mut out = vec![0.0; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let t = (w * crate::mesoscopic::wrap(x[i] - x[j], length)).tan();
            if t == 0.0 || !t.is_finite() {
                return Err(StepflowError::QuadratureCollision { index: i + 1 });
            }
            let c = w / t;
            out[i] += c;
            out[j] -= c;
        }
    }
    let a = 1.0 / n as f64;
    out.iter_mut().for_each(|v| *v *= a);
    Ok(out)
}

/// `(1/L) int_0^L int_0^L ln|sin(pi (x - y) / L)| f(x) g(y) dx dy`.
///
/// Uses `int int K f(x) g(y) = -L ln2 int f g - (1/2) int int K Df Dg` with
/// `Df = f(x) - f(y)`. The subtracted integrand vanishes on the diagonal;
/// the trapezoid rule on it is corrected by `2 zeta'(-2) h^3 int f' g'`.
pub fn log_sin_double_integral(f: &PeriodicSamples, g: &PeriodicSamples) -> Result<f64> {
    if f.len() != g.len() || f.length != g.length {
        return Err(StepflowError::GridMismatch(format!(
            "{} samples on L = {} vs {} samples on L = {}",
            f.len(),
            f.length,
            g.len(),
            g.length
        )));
    }
    let m = f.len();
    let length = f.length;
    let h = length / m as f64;
    let (fv, gv) = (&f.values, &g.values);

    let kernel: Vec<f64> = (0..m)
        .map(|d| {
            if d == 0 {
                0.0
            } else {
                (PI * d as f64 / m as f64).sin().abs().ln()
            }
        })
        .collect();

    let mut regular = 0.0;
    for i in 0..m {
        let mut row = 0.0;
        for j in 0..m {
            if i == j {
                continue;
            }
            let d = if i >= j { i - j } else { i + m - j };
            row += kernel[d] * (fv[i] - fv[j]) * (gv[i] - gv[j]);
        }
        regular += row;
    }
    regular *= h * h;

    let fx = spectral::derivative(fv, length, 1);
    let gx = spectral::derivative(gv, length, 1);
    let fg_prime: f64 = fx.iter().zip(&gx).map(|(a, b)| a * b).sum::<f64>() * h;
    // Each variable carries one factor h; the local s^2 ln|s| profile
    // contributes 2 zeta'(-2) h^3 per unit length along the diagonal.
    regular += 2.0 * ZETA_PRIME_MINUS_TWO * h.powi(3) * fg_prime;

    let fg: f64 = fv.iter().zip(gv).map(|(a, b)| a * b).sum::<f64>() * h;
    Ok((-length * LN_2 * fg - 0.5 * regular) / length)
}
