//! Fourier utilities for real periodic samples on uniform grids.
//!
//! All routines take samples `v_j = f(j P / n)`, `j = 0..n`, of a `P`-periodic
//! function. The Nyquist mode of an even-length grid is treated as a cosine,
//! so odd-order derivatives annihilate it and interpolation stays real.

use std::cell::RefCell;
use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub fn is_power_of_two(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// Signed wavenumber of DFT bin `j` on an `n`-point grid.
pub fn wavenumber(j: usize, n: usize) -> i64 {
    if j <= n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

fn is_nyquist(j: usize, n: usize) -> bool {
    n.is_multiple_of(2) && j == n / 2
}

/// Normalized DFT coefficients `c_k = (1/n) sum_j v_j e^{-2 pi i j k / n}`.
pub fn coefficients(values: &[f64]) -> Vec<Complex64> {
    let n = values.len();
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n).process(&mut buf));
    let scale = 1.0 / n as f64;
    buf.iter_mut().for_each(|c| *c *= scale);
    buf
}

/// Inverse of [`coefficients`], keeping the real part.
pub fn synthesize(coeffs: &[Complex64]) -> Vec<f64> {
    let n = coeffs.len();
    let mut buf = coeffs.to_vec();
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n).process(&mut buf));
    buf.iter().map(|c| c.re).collect()
}

/// Applies a Fourier multiplier `m(k)` given as a function of the signed
/// wavenumber. The Nyquist bin receives the real part of `m(n/2)`.
pub fn apply_multiplier(values: &[f64], multiplier: impl Fn(i64) -> Complex64) -> Vec<f64> {
    let n = values.len();
    let mut coeffs = coefficients(values);
    for (j, c) in coeffs.iter_mut().enumerate() {
        let m = multiplier(wavenumber(j, n));
        *c *= if is_nyquist(j, n) {
            Complex64::new(m.re, 0.0)
        } else {
            m
        };
    }
    synthesize(&coeffs)
}

/// `order`-th derivative of a `period`-periodic function from its samples.
pub fn derivative(values: &[f64], period: f64, order: u32) -> Vec<f64> {
    if order == 0 {
        return values.to_vec();
    }
    let base = 2.0 * PI / period;
    apply_multiplier(values, |k| {
        let ik = Complex64::new(0.0, base * k as f64);
        ik.powu(order)
    })
}

/// Mean-zero antiderivative of a mean-zero periodic function.
pub fn antiderivative(values: &[f64], period: f64) -> Vec<f64> {
    let base = 2.0 * PI / period;
    let n = values.len();
    let mut coeffs = coefficients(values);
    for (j, c) in coeffs.iter_mut().enumerate() {
        let k = wavenumber(j, n);
        if k == 0 || is_nyquist(j, n) {
            *c = Complex64::new(0.0, 0.0);
        } else {
            *c /= Complex64::new(0.0, base * k as f64);
        }
    }
    synthesize(&coeffs)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Trapezoid rule over one period, spectrally accurate for smooth data.
pub fn periodic_integral(values: &[f64], period: f64) -> f64 {
    period * mean(values)
}

/// Trigonometric interpolant of periodic samples, evaluable off-grid.
#[derive(Debug, Clone)]
pub struct TrigInterpolant {
    period: f64,
    coeffs: Vec<Complex64>,
}

impl TrigInterpolant {
    pub fn new(values: &[f64], period: f64) -> Self {
        Self {
            period,
            coeffs: coefficients(values),
        }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.eval_derivative(x, 0)
    }

    /// Exact `order`-th derivative of the interpolating trigonometric polynomial.
    pub fn eval_derivative(&self, x: f64, order: u32) -> f64 {
        let n = self.coeffs.len();
        let base = 2.0 * PI / self.period;
        let mut acc = if order == 0 { self.coeffs[0].re } else { 0.0 };
        for j in 1..n.div_ceil(2) {
            let k = j as f64 * base;
            let (s, c) = (k * x).sin_cos();
            let e = Complex64::new(c, s) * Complex64::new(0.0, k).powu(order);
            acc += 2.0 * (self.coeffs[j] * e).re;
        }
        if n.is_multiple_of(2) && n > 1 {
            let k = (n / 2) as f64 * base;
            let c = self.coeffs[n / 2].re;
            let theta = k * x;
            let d = match order % 4 {
                0 => theta.cos(),
                1 => -theta.sin(),
                2 => -theta.cos(),
                _ => theta.sin(),
            };
            acc += c * k.powi(order as i32) * d;
        }
        acc
    }
}
