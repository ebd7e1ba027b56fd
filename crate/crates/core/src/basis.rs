//! Sinusoidal basis: the fixed frequency set, robust standardisation, the
//! regularised least-squares coefficient fit and closed-form evaluation.

use std::f64::consts::PI;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::TimeValueSeries;
use crate::error::{DamError, Result};
use crate::hsr::{self, HsrConfig};
use crate::stats;

/// Tag stored alongside serialised coefficients and checkpoints.
pub const FREQUENCY_SET_VERSION: &str = "periods-437-v1";

/// Number of basis frequencies.
pub const N_FREQ: usize = 437;

/// Lower bound applied to the inter-quartile range.
pub const IQR_FLOOR: f64 = 1e-6;

/// Days per year used for the year-class periods (52 weeks).
pub const DAYS_PER_YEAR: f64 = 364.0;

const MINUTE_PERIODS: [f64; 12] = [1., 6., 11., 16., 21., 25., 31., 36., 41., 45., 50., 55.];

const HOUR_PERIODS: [f64; 92] = [
    1.0, 1.2, 1.5, 1.7, 2.0, 2.2, 2.5, 2.7, 3.0, 3.2, 3.5, 3.7, 4.0, 4.2, 4.5, 4.8, 5.0, 5.2, 5.5,
    5.8, 6.0, 6.3, 6.5, 6.7, 7.0, 7.3, 7.5, 7.8, 8.0, 8.2, 8.5, 8.7, 9.0, 9.2, 9.5, 9.7, 10.0, 10.3,
    10.5, 10.7, 11.0, 11.2, 11.5, 11.8, 12.0, 12.2, 12.5, 12.7, 13.0, 13.2, 13.5, 13.7, 14.0, 14.2,
    14.5, 14.8, 15.0, 15.3, 15.5, 15.7, 16.0, 16.2, 16.5, 16.8, 17.0, 17.2, 17.5, 17.8, 18.0, 18.3,
    18.5, 18.8, 19.0, 19.3, 19.5, 19.7, 20.0, 20.2, 20.5, 20.8, 21.0, 21.2, 21.5, 21.8, 22.0, 22.3,
    22.5, 22.7, 23.0, 23.3, 23.5, 23.7,
];

const DAY_PERIODS: [f64; 117] = [
    1.00, 1.01, 1.02, 1.03, 1.04, 1.05, 1.06, 1.07, 1.08, 1.09, 1.10, 1.11, 1.12, 1.14, 1.15, 1.16,
    1.17, 1.18, 1.19, 1.20, 1.21, 1.22, 1.23, 1.24, 1.25, 1.26, 1.27, 1.28, 1.29, 1.30, 1.31, 1.32,
    1.33, 1.34, 1.35, 1.36, 1.37, 1.39, 1.40, 1.41, 1.42, 1.43, 1.44, 1.45, 1.46, 1.47, 1.48, 1.49,
    1.50, 1.51, 1.52, 1.53, 1.54, 1.55, 1.56, 1.57, 1.58, 1.59, 1.60, 1.61, 1.62, 1.64, 1.65, 1.66,
    1.67, 1.68, 1.69, 1.70, 1.71, 1.72, 1.73, 1.74, 1.75, 1.76, 1.77, 1.78, 1.79, 1.80, 1.81, 1.82,
    1.83, 1.84, 1.85, 1.86, 1.87, 1.89, 1.90, 1.91, 1.92, 1.93, 1.94, 1.95, 1.96, 1.97, 1.98, 1.99,
    2.00, 2.25, 2.50, 2.75, 3.00, 3.25, 3.50, 3.75, 4.00, 4.25, 4.50, 4.75, 5.00, 5.25, 5.50, 5.75,
    6.00, 6.25, 6.50, 6.75, 7.00,
];

#[allow(clippy::approx_constant)]
const WEEK_PERIODS: [f64; 180] = [
    1.04, 1.07, 1.11, 1.14, 1.18, 1.21, 1.25, 1.29, 1.32, 1.36, 1.39, 1.43, 1.46, 1.50, 1.54, 1.57,
    1.61, 1.64, 1.68, 1.71, 1.75, 1.79, 1.82, 1.86, 1.89, 1.93, 1.96, 2.00, 2.04, 2.07, 2.11, 2.14,
    2.18, 2.21, 2.25, 2.29, 2.32, 2.36, 2.39, 2.43, 2.46, 2.50, 2.54, 2.57, 2.61, 2.64, 2.68, 2.71,
    2.75, 2.79, 2.82, 2.86, 2.89, 2.93, 2.96, 3.00, 3.04, 3.07, 3.11, 3.14, 3.18, 3.21, 3.25, 3.29,
    3.32, 3.36, 3.39, 3.43, 3.46, 3.50, 3.54, 3.57, 3.61, 3.64, 3.68, 3.71, 3.75, 3.79, 3.82, 3.86,
    3.89, 3.93, 3.96, 4.00, 4.50, 5.00, 5.50, 6.00, 6.50, 7.00, 7.50, 8.00, 8.50, 9.00, 9.50, 10.00,
    10.50, 11.00, 11.50, 12.00, 12.50, 13.00, 13.50, 14.00, 14.50, 15.00, 15.50, 16.00, 16.50,
    17.00, 17.50, 18.00, 18.50, 19.00, 19.50, 20.00, 20.50, 21.00, 21.50, 22.00, 22.50, 23.00,
    23.50, 24.00, 24.50, 25.00, 25.50, 26.00, 26.50, 27.00, 27.50, 28.00, 28.50, 29.00, 29.50,
    30.00, 30.50, 31.00, 31.50, 32.00, 32.50, 33.00, 33.50, 34.00, 34.50, 35.00, 35.50, 36.00,
    36.50, 37.00, 37.50, 38.00, 38.50, 39.00, 39.50, 40.00, 40.50, 41.00, 41.50, 42.00, 42.50,
    43.00, 43.50, 44.00, 44.50, 45.00, 45.50, 46.00, 46.50, 47.00, 47.50, 48.00, 48.50, 49.00,
    49.50, 50.00, 50.50, 51.00, 51.50, 52.00,
];

const YEAR_PERIODS: [f64; 36] = [
    1.25, 1.50, 1.75, 2.00, 2.25, 2.50, 2.75, 3.00, 3.25, 3.50, 3.75, 4.00, 4.25, 4.50, 4.75, 5.00,
    5.25, 5.50, 5.75, 6.00, 6.25, 6.50, 6.75, 7.00, 7.25, 7.50, 7.75, 8.00, 8.25, 8.50, 8.75, 9.00,
    9.25, 9.50, 9.75, 10.00,
];

/// Period classes in frequency-set order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeriodClass {
    Minutes,
    Hours,
    Days,
    Weeks,
    Years,
}

impl PeriodClass {
    pub const ALL: [PeriodClass; 5] = [
        PeriodClass::Minutes,
        PeriodClass::Hours,
        PeriodClass::Days,
        PeriodClass::Weeks,
        PeriodClass::Years,
    ];

    pub fn periods(self) -> &'static [f64] {
        match self {
            PeriodClass::Minutes => &MINUTE_PERIODS,
            PeriodClass::Hours => &HOUR_PERIODS,
            PeriodClass::Days => &DAY_PERIODS,
            PeriodClass::Weeks => &WEEK_PERIODS,
            PeriodClass::Years => &YEAR_PERIODS,
        }
    }

    /// Converts a period in this class's unit to days.
    pub fn to_days(self, period: f64) -> f64 {
        match self {
            PeriodClass::Minutes => period / 1440.0,
            PeriodClass::Hours => period / 24.0,
            PeriodClass::Days => period,
            PeriodClass::Weeks => period * 7.0,
            PeriodClass::Years => period * DAYS_PER_YEAR,
        }
    }
}

/// The fixed frequency set in cycles per day, minutes first.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    pub frequencies: Vec<f64>,
    pub class_sizes: [usize; 5],
}

impl BasisSpec {
    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    /// Periods in days.
    pub fn periods(&self) -> Vec<f64> {
        self.frequencies.iter().map(|f| 1.0 / f).collect()
    }
}

impl Default for BasisSpec {
    fn default() -> Self {
        build_frequency_set()
    }
}

pub fn build_frequency_set() -> BasisSpec {
    let mut frequencies = Vec::with_capacity(N_FREQ);
    let mut class_sizes = [0; 5];
    for (k, class) in PeriodClass::ALL.into_iter().enumerate() {
        let periods = class.periods();
        class_sizes[k] = periods.len();
        frequencies.extend(periods.iter().map(|&p| 1.0 / class.to_days(p)));
    }
    BasisSpec {
        frequencies,
        class_sizes,
    }
}

/// Per-datum median and inter-quartile range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustNorm {
    pub med: f64,
    pub iqr: f64,
}

impl RobustNorm {
    pub fn identity() -> Self {
        Self { med: 0.0, iqr: 1.0 }
    }

    pub fn fit(values: &[f64]) -> Self {
        let s = stats::sorted(values);
        let iqr = stats::quantile_sorted(&s, 0.75) - stats::quantile_sorted(&s, 0.25);
        Self {
            med: stats::quantile_sorted(&s, 0.5),
            iqr: iqr.max(IQR_FLOOR),
        }
    }

    pub fn standardize(&self, v: f64) -> f64 {
        (v - self.med) / self.iqr
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.iqr + self.med
    }
}

/// `(v - med) / iqr` with the IQR floored at [`IQR_FLOOR`].
///
/// # Panics
/// If `values` is empty.
pub fn robust_standardize(values: &[f64]) -> (Vec<f64>, RobustNorm) {
    assert!(!values.is_empty(), "robust_standardize needs at least one value");
    let norm = RobustNorm::fit(values);
    (values.iter().map(|&v| norm.standardize(v)).collect(), norm)
}

/// Sine and cosine coefficients per frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVector {
    pub sin: Vec<f64>,
    pub cos: Vec<f64>,
}

impl CoefficientVector {
    pub fn zeros(n: usize) -> Self {
        Self {
            sin: vec![0.0; n],
            cos: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.sin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sin.is_empty()
    }

    /// Row-major `n x 2` layout with cosine in column 0, sine in column 1.
    pub fn to_cos_sin_rows(&self) -> Vec<f64> {
        self.cos
            .iter()
            .zip(&self.sin)
            .flat_map(|(&c, &s)| [c, s])
            .collect()
    }

    pub fn from_cos_sin_rows(flat: &[f64]) -> Self {
        Self {
            cos: flat.iter().step_by(2).copied().collect(),
            sin: flat.iter().skip(1).step_by(2).copied().collect(),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.sin
            .iter()
            .chain(&self.cos)
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.sin.iter().chain(&self.cos).all(|x| x.is_finite())
    }

    /// Amplitude per frequency.
    pub fn amplitudes(&self) -> Vec<f64> {
        self.sin
            .iter()
            .zip(&self.cos)
            .map(|(s, c)| s.hypot(*c))
            .collect()
    }
}

/// Affine adjustment produced by the backbone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub scale: f64,
    pub offset: f64,
}

/// Minimum magnitude of the affine scale when it is used as a divisor.
pub const SCALE_FLOOR: f64 = 1e-6;

impl AffineParams {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            offset: 0.0,
        }
    }

    /// Scale with its magnitude floored at [`SCALE_FLOOR`], sign preserved.
    pub fn safe_scale(&self) -> f64 {
        if self.scale.abs() >= SCALE_FLOOR {
            self.scale
        } else if self.scale < 0.0 {
            -SCALE_FLOOR
        } else {
            SCALE_FLOOR
        }
    }
}

/// Order in which the affine adjustment and de-standardisation combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parameterization {
    /// `iqr * ((raw - offset) / scale) + med`, used for backbone output.
    #[default]
    Backbone,
    /// `iqr * (scale * raw - offset) + med`.
    Composition,
}

/// A closed-form forecast, evaluable at any real time (days from "now").
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastFunction {
    pub spec: BasisSpec,
    pub theta: CoefficientVector,
    pub norm: RobustNorm,
    pub affine: AffineParams,
    pub parameterization: Parameterization,
}

impl ForecastFunction {
    pub fn new(spec: BasisSpec, theta: CoefficientVector, norm: RobustNorm) -> Self {
        Self {
            spec,
            theta,
            norm,
            affine: AffineParams::identity(),
            parameterization: Parameterization::Backbone,
        }
    }

    /// The sinusoid sum before any affine or de-standardisation step.
    pub fn raw(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        for ((&nu, &s), &c) in self
            .spec
            .frequencies
            .iter()
            .zip(&self.theta.sin)
            .zip(&self.theta.cos)
        {
            let (sn, cs) = (2.0 * PI * nu * t).sin_cos();
            acc += s * sn + c * cs;
        }
        acc
    }

    /// Standardised-space prediction (affine applied, no de-standardisation).
    pub fn standardized(&self, t: f64) -> f64 {
        let raw = self.raw(t);
        match self.parameterization {
            Parameterization::Backbone => (raw - self.affine.offset) / self.affine.safe_scale(),
            Parameterization::Composition => self.affine.scale * raw - self.affine.offset,
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        self.norm.invert(self.standardized(t))
    }

    pub fn evaluate(&self, query_times: &[f64]) -> Vec<f64> {
        query_times.iter().map(|&t| self.at(t)).collect()
    }

    pub fn record_header(&self) -> String {
        let mut cols = vec![
            "version".to_string(),
            "parameterization".into(),
            "med".into(),
            "iqr".into(),
            "scale".into(),
            "offset".into(),
        ];
        for j in 0..self.theta.len() {
            cols.push(format!("cos_{j}"));
            cols.push(format!("sin_{j}"));
        }
        cols.join(",")
    }

    /// Flat CSV record: tags, normalisation, affine, then cos/sin pairs.
    pub fn to_record(&self) -> String {
        let mut cols = vec![
            FREQUENCY_SET_VERSION.to_string(),
            match self.parameterization {
                Parameterization::Backbone => "backbone".into(),
                Parameterization::Composition => "composition".into(),
            },
            format!("{}", self.norm.med),
            format!("{}", self.norm.iqr),
            format!("{}", self.affine.scale),
            format!("{}", self.affine.offset),
        ];
        cols.extend(self.theta.to_cos_sin_rows().iter().map(|x| format!("{x}")));
        cols.join(",")
    }

    pub fn from_record(record: &str) -> Result<Self> {
        let cols: Vec<&str> = record.trim().split(',').collect();
        let bad = |m: String| DamError::Config(format!("forecast record: {m}"));
        if cols.len() != 6 + 2 * N_FREQ {
            return Err(bad(format!(
                "expected {} fields, found {}",
                6 + 2 * N_FREQ,
                cols.len()
            )));
        }
        if cols[0] != FREQUENCY_SET_VERSION {
            return Err(bad(format!("unknown frequency set `{}`", cols[0])));
        }
        let parameterization = match cols[1] {
            "backbone" => Parameterization::Backbone,
            "composition" => Parameterization::Composition,
            other => return Err(bad(format!("unknown parameterization `{other}`"))),
        };
        let nums: Vec<f64> = cols[2..]
            .iter()
            .map(|c| c.parse().map_err(|_| bad(format!("bad number `{c}`"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: build_frequency_set(),
            norm: RobustNorm {
                med: nums[0],
                iqr: nums[1],
            },
            affine: AffineParams {
                scale: nums[2],
                offset: nums[3],
            },
            theta: CoefficientVector::from_cos_sin_rows(&nums[4..]),
            parameterization,
        })
    }
}

/// Free-function form of [`ForecastFunction::evaluate`].
pub fn evaluate(f: &ForecastFunction, query_times: &[f64]) -> Vec<f64> {
    f.evaluate(query_times)
}

/// Linear system strategy for [`init_theta_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Solver {
    /// Kernel form when there are fewer points than coefficients and the
    /// ridge is positive, else the normal equations.
    #[default]
    Auto,
    /// Cholesky on `X'X + lambda I'` (size `2F`).
    Primal,
    /// Cholesky on `X X' + lambda I` (size `n`) with a rank-one correction
    /// for the unregularised coefficient.
    Dual,
}

/// A column whose mean square falls below this is treated as identically
/// zero (its coefficient is unidentifiable and set to 0).
const DEAD_COLUMN_MS: f64 = 1e-12;
/// Relative pivot threshold for declaring the unregularised system singular.
const PIVOT_RTOL: f64 = 1e-12;

/// Design matrix `[sin(2 pi nu t) | cos(2 pi nu t)]`, row-major `n x 2F`.
pub fn design_matrix(times: &[f64], spec: &BasisSpec) -> Vec<f64> {
    let f = spec.len();
    let mut x = vec![0.0; times.len() * 2 * f];
    for (row, &t) in x.chunks_exact_mut(2 * f).zip(times) {
        let (s, c) = row.split_at_mut(f);
        for ((sj, cj), &nu) in s.iter_mut().zip(c.iter_mut()).zip(&spec.frequencies) {
            (*sj, *cj) = (2.0 * PI * nu * t).sin_cos();
        }
    }
    x
}

/// Ridge fit of basis coefficients to `(times, values)`.
///
/// Solves `(X'X + lambda I') theta = X'v` where `I'` is the identity with its
/// first diagonal entry zeroed, so the first sine coefficient is
/// unregularised.
pub fn init_theta(
    times: &[f64],
    values: &[f64],
    spec: &BasisSpec,
    lambda: f64,
) -> Result<CoefficientVector> {
    init_theta_with(times, values, spec, lambda, Solver::Auto)
}

pub fn init_theta_with(
    times: &[f64],
    values: &[f64],
    spec: &BasisSpec,
    lambda: f64,
    solver: Solver,
) -> Result<CoefficientVector> {
    if times.len() != values.len() {
        return Err(DamError::LengthMismatch {
            left: times.len(),
            right: values.len(),
        });
    }
    if times.is_empty() {
        return Err(DamError::InsufficientPoints {
            needed: 1,
            available: 0,
        });
    }
    if !(lambda >= 0.0) {
        return Err(DamError::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let n = times.len();
    let p = 2 * spec.len();
    let x = design_matrix(times, spec);
    let col0_ms = (0..n).map(|i| x[i * p] * x[i * p]).sum::<f64>() / n as f64;
    let dead0 = col0_ms < DEAD_COLUMN_MS;

    let use_dual = match solver {
        Solver::Auto => lambda > 0.0 && n < p,
        Solver::Primal => false,
        Solver::Dual => {
            if lambda <= 0.0 {
                return Err(DamError::Config("the kernel solver needs lambda > 0".into()));
            }
            true
        }
    };
    let theta = if use_dual {
        solve_dual(&x, values, n, p, lambda, dead0)?
    } else {
        solve_primal(&x, values, n, p, lambda, dead0)?
    };
    let f = spec.len();
    Ok(CoefficientVector {
        sin: theta[..f].to_vec(),
        cos: theta[f..].to_vec(),
    })
}

fn gemm_f64(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of `a` (m x k), `b` (k x n)
    // and the row-major `c` (m x n), checked by the callers' dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn solve_primal(
    x: &[f64],
    v: &[f64],
    n: usize,
    p: usize,
    lambda: f64,
    dead0: bool,
) -> Result<Vec<f64>> {
    let mut g = vec![0.0; p * p];
    // X' X
    gemm_f64(p, n, p, x, (1, p as isize), x, (p as isize, 1), &mut g);
    for i in 1..p {
        g[i * p + i] += lambda;
    }
    let mut rhs = vec![0.0; p];
    gemm_f64(p, n, 1, x, (1, p as isize), v, (1, 1), &mut rhs);
    let dropped = if dead0 { vec![0] } else { Vec::new() };
    let l = cholesky(&mut g, p, &dropped)?;
    Ok(cholesky_solve(&l, p, &rhs, &dropped))
}

fn solve_dual(
    x: &[f64],
    v: &[f64],
    n: usize,
    p: usize,
    lambda: f64,
    dead0: bool,
) -> Result<Vec<f64>> {
    let mut k = vec![0.0; n * n];
    // X X'
    gemm_f64(n, p, n, x, (p as isize, 1), x, (1, p as isize), &mut k);
    for i in 0..n {
        k[i * n + i] += lambda;
    }
    let l = cholesky(&mut k, n, &[])?;
    let alpha = cholesky_solve(&l, n, v, &[]);
    let mut theta = vec![0.0; p];
    gemm_f64(p, n, 1, x, (1, p as isize), &alpha, (1, 1), &mut theta);
    if dead0 {
        theta[0] = 0.0;
        return Ok(theta);
    }
    // Sherman-Morrison correction removing the ridge from coefficient 0.
    let x0: Vec<f64> = (0..n).map(|i| x[i * p]).collect();
    let beta = cholesky_solve(&l, n, &x0, &[]);
    let delta: f64 = x0.iter().zip(&beta).map(|(a, b)| a * b).sum();
    let mut xtb = vec![0.0; p];
    gemm_f64(p, n, 1, x, (1, p as isize), &beta, (1, 1), &mut xtb);
    let coef = theta[0] / delta;
    for (t, u) in theta.iter_mut().zip(&xtb) {
        *t -= u * coef;
    }
    theta[0] += coef;
    Ok(theta)
}

/// In-place lower Cholesky factor of the row-major SPD matrix `a`.
/// Indices in `dropped` are excluded (their rows and columns treated as absent).
fn cholesky(a: &mut [f64], n: usize, dropped: &[usize]) -> Result<Vec<f64>> {
    let max_diag = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    let tol = PIVOT_RTOL * max_diag.max(f64::MIN_POSITIVE);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        if dropped.contains(&i) {
            l[i * n + i] = 1.0;
            continue;
        }
        for j in 0..=i {
            if dropped.contains(&j) {
                continue;
            }
            let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
            let dot: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
            let s = a[i * n + j] - dot;
            if i == j {
                if s <= tol {
                    return Err(DamError::RankDeficient { pivot: i });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64], dropped: &[usize]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        if dropped.contains(&i) {
            continue;
        }
        let dot: f64 = l[i * n..i * n + i].iter().zip(&y).map(|(a, b)| a * b).sum();
        y[i] = (b[i] - dot) / l[i * n + i];
    }
    for i in (0..n).rev() {
        if dropped.contains(&i) {
            y[i] = 0.0;
            continue;
        }
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    y
}

/// Which observed points in the window feed an imputation fit.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ImputationPoints {
    /// Every unmasked point.
    #[default]
    All,
    /// An HSR draw anchored at the window centre, over past and future.
    Hsr { cfg: HsrConfig, seed: u64 },
}

/// Basis-only fit on the unmasked points of `window`, for imputation.
///
/// `mask[i] == true` marks index `i` as missing. The returned function takes
/// times relative to `series.times[window.start]`.
pub fn imputation_fit(
    series: &TimeValueSeries,
    mask: &[bool],
    window: Range<usize>,
    lambda: f64,
) -> Result<ForecastFunction> {
    imputation_fit_with(series, mask, window, lambda, ImputationPoints::All)
}

pub fn imputation_fit_with(
    series: &TimeValueSeries,
    mask: &[bool],
    window: Range<usize>,
    lambda: f64,
    points: ImputationPoints,
) -> Result<ForecastFunction> {
    if mask.len() != series.len() {
        return Err(DamError::LengthMismatch {
            left: mask.len(),
            right: series.len(),
        });
    }
    if window.end > series.len() || window.is_empty() {
        return Err(DamError::IndexOutOfRange {
            index: window.end,
            len: series.len(),
        });
    }
    let mut observed: Vec<usize> = window
        .clone()
        .filter(|&i| series.valid[i] && !mask[i])
        .collect();
    if observed.is_empty() {
        return Err(DamError::FullyMasked);
    }
    if let ImputationPoints::Hsr { cfg, seed } = points {
        let centre = (window.start + window.end) / 2;
        let support: Vec<i64> = observed.iter().map(|&i| i as i64 - centre as i64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = HsrConfig {
            n_points: cfg.n_points.min(support.len()),
            ..cfg
        };
        observed = hsr::draw_without_replacement(&support, &cfg, &mut rng)?
            .into_iter()
            .map(|x| (centre as i64 + x) as usize)
            .collect();
    }
    let origin = series.times[window.start];
    let times: Vec<f64> = observed.iter().map(|&i| series.times[i] - origin).collect();
    let raw: Vec<f64> = observed.iter().map(|&i| series.values[i]).collect();
    let (values, norm) = robust_standardize(&raw);
    let spec = build_frequency_set();
    let theta = init_theta(&times, &values, &spec, lambda)?;
    Ok(ForecastFunction::new(spec, theta, norm))
}
