//! Stability coefficients of the randomized asymmetric initializations.
//!
//! Under the mean-field assumptions a pre-activation, measured in units of the
//! root length of the previous layer, is modelled as
//!
//! ```text
//! x = sigma_w z + b u,   z ~ N(0, 1),   u ~ Beta(2, 1) (density 2u on [0, 1])
//! ```
//!
//! where `u` is the beta-substituted weight or bias and `b` stands for the
//! magnitude of the activation it multiplies. The two approximations differ only
//! in `b`:
//!
//! - [`Approximation::Rms`]: `b = 1`, the root mean square of a unit-length layer.
//! - [`Approximation::Mean`]: `b = E[relu(sigma_tilde z + u)]` with
//!   `sigma_tilde^2 = sigma2_w (1 - kappa/pi)`, the mean activation of the RMS
//!   model whose Gaussian width has been reduced by the anti-correlation.
//!
//! From this model:
//!
//! - the length coefficient is `zeta = E[relu(x)^2] - kappa E[relu(x)]^2`, the slope
//!   of the length map with the squared-mean penalty of anti-correlated rows;
//! - the chaos coefficient is `chi1 = sigma2_w E[relu'(x)^2]`.
//!
//! Stein's lemma gives `E[relu(x)^2] = sigma2_w E[relu'(x)] + b E[u relu(x)]`, so for
//! `kappa = 0` the two differ by the cross term `b E[u relu(x)]`.
//!
//! The Gaussian factor is integrated in closed form for each `u` (the ReLU kink
//! would otherwise limit Gauss-Hermite to a few digits); the beta factor uses
//! Gauss-Legendre on [0, 1] with the density folded into the weights.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::initkit::correlation_fraction;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Approximation {
    Rms,
    Mean,
}

impl Approximation {
    pub const ALL: [Approximation; 2] = [Approximation::Rms, Approximation::Mean];
}

impl fmt::Display for Approximation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Approximation::Rms => "RMS",
            Approximation::Mean => "Mean",
        })
    }
}

/// Nodes and weights of a one-dimensional rule.
#[derive(Clone, Debug, PartialEq)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Gauss-Legendre rule on [-1, 1] by Newton iteration on `P_n`.
pub fn gauss_legendre(n: usize) -> Rule {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    Rule { nodes, weights }
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for j in 2..=n {
        let j = j as f64;
        let p2 = ((2.0 * j - 1.0) * x * p1 - (j - 1.0) * p0) / j;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Gauss-Hermite rule for the standard normal measure (probabilists' form).
///
/// Computed for the weight `exp(-x^2)` with orthonormal recurrences, then
/// rescaled by `sqrt(2)` in the nodes and `1/sqrt(pi)` in the weights.
pub fn gauss_hermite_normal(n: usize) -> Rule {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0] / -SQRT_2,
            3 => 1.91 * z - 0.91 * nodes[1] / -SQRT_2,
            _ => 2.0 * z - nodes[i - 2] / -SQRT_2,
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let (p1, d) = hermite_orthonormal(n, z);
            pp = d;
            let dz = p1 / d;
            z -= dz;
            if dz.abs() < 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        let (_, d) = hermite_orthonormal(n, z);
        if d != 0.0 {
            pp = d;
        }
        let w = 2.0 / (pp * pp);
        nodes[i] = -z * SQRT_2;
        nodes[n - 1 - i] = z * SQRT_2;
        weights[i] = w / PI.sqrt();
        weights[n - 1 - i] = w / PI.sqrt();
    }
    Rule { nodes, weights }
}

/// Orthonormal Hermite polynomial `H~_n(z)` and its derivative.
fn hermite_orthonormal(n: usize, z: f64) -> (f64, f64) {
    let mut p1 = PI.powf(-0.25);
    let mut p2 = 0.0;
    for j in 1..=n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
    }
    let d = (2.0 * n as f64).sqrt() * p2;
    (p1, d)
}

/// Quadrature orders for the Gaussian and the Beta(2, 1) factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    pub hermite_order: usize,
    pub beta_order: usize,
}

impl Default for QuadratureGrid {
    fn default() -> Self {
        Self { hermite_order: 64, beta_order: 64 }
    }
}

impl QuadratureGrid {
    pub const MIN_ORDER: usize = 16;

    pub fn new(hermite_order: usize, beta_order: usize) -> Result<Self> {
        let g = Self { hermite_order, beta_order };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, n) in [("hermite_order", self.hermite_order), ("beta_order", self.beta_order)] {
            if n < Self::MIN_ORDER {
                return Err(Error::invalid(name, format!("must be >= {}, got {n}", Self::MIN_ORDER)));
            }
        }
        Ok(())
    }

    pub fn doubled(&self) -> Self {
        Self { hermite_order: 2 * self.hermite_order, beta_order: 2 * self.beta_order }
    }

    /// Rule for `u` on [0, 1] against the Beta(2, 1) density `2u`.
    pub fn beta_rule(&self) -> Rule {
        let gl = gauss_legendre(self.beta_order);
        let nodes: Vec<f64> = gl.nodes.iter().map(|x| 0.5 * (x + 1.0)).collect();
        let weights = gl.weights.iter().zip(&nodes).map(|(w, u)| 0.5 * w * 2.0 * u).collect();
        Rule { nodes, weights }
    }

    pub fn normal_rule(&self) -> Rule {
        gauss_hermite_normal(self.hermite_order)
    }

    /// Product-rule expectation of `g(z, u)`. Accurate for smooth `g`; integrands
    /// with a kink in `z` converge only algebraically.
    pub fn expect(&self, g: impl Fn(f64, f64) -> f64) -> f64 {
        let zr = self.normal_rule();
        let ur = self.beta_rule();
        ur.integrate(|u| zr.integrate(|z| g(z, u)))
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Moments of `relu(sigma z + b u)` over `z ~ N(0,1)`, `u ~ Beta(2,1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReluMoments {
    /// `E[relu'(x)^2] = P(x > 0)`; the kink is assigned derivative 0.
    pub gate: f64,
    /// `E[relu(x)]`, also equal to `E[relu'(x) relu(x)]`.
    pub mean: f64,
    /// `E[relu(x)^2]`.
    pub second: f64,
    /// `E[u relu(x)]`.
    pub beta_cross: f64,
}

/// Evaluates [`ReluMoments`] with the Gaussian factor in closed form.
pub fn relu_moments(sigma: f64, b: f64, grid: &QuadratureGrid) -> Result<ReluMoments> {
    grid.validate()?;
    ensure_finite("sigma", sigma)?;
    ensure_finite("b", b)?;
    if sigma < 0.0 {
        return Err(Error::invalid("sigma", format!("must be >= 0, got {sigma}")));
    }
    let ur = grid.beta_rule();
    let mut m = ReluMoments { gate: 0.0, mean: 0.0, second: 0.0, beta_cross: 0.0 };
    for (&u, &w) in ur.nodes.iter().zip(&ur.weights) {
        let t = b * u;
        let (p, mean, second) = if sigma > 0.0 {
            let a = t / sigma;
            let (cdf, pdf) = (normal_cdf(a), normal_pdf(a));
            (cdf, t * cdf + sigma * pdf, (t * t + sigma * sigma) * cdf + t * sigma * pdf)
        } else if t > 0.0 {
            (1.0, t, t * t)
        } else {
            (0.0, 0.0, 0.0)
        };
        m.gate += w * p;
        m.mean += w * mean;
        m.second += w * second;
        m.beta_cross += w * u * mean;
    }
    Ok(m)
}

fn check_variance(sigma2_w: f64) -> Result<()> {
    ensure_finite("sigma2_w", sigma2_w)?;
    if sigma2_w <= 0.0 {
        return Err(Error::invalid("sigma2_w", format!("must be > 0, got {sigma2_w}")));
    }
    Ok(())
}

fn check_k(k: f64) -> Result<()> {
    ensure_finite("k", k)?;
    if k <= -1.0 {
        return Err(Error::invalid("k", format!("must be > -1, got {k}")));
    }
    Ok(())
}

/// Coefficient `b` multiplying the beta entry.
pub fn beta_scale(sigma2_w: f64, k: f64, grid: &QuadratureGrid, approx: Approximation) -> Result<f64> {
    match approx {
        Approximation::Rms => Ok(1.0),
        Approximation::Mean => {
            let reduced = sigma2_w * (1.0 - correlation_fraction(k) / PI);
            Ok(relu_moments(reduced.sqrt(), 1.0, grid)?.mean)
        }
    }
}

fn moments_at(sigma2_w: f64, k: f64, grid: &QuadratureGrid, approx: Approximation) -> Result<ReluMoments> {
    check_variance(sigma2_w)?;
    check_k(k)?;
    let b = beta_scale(sigma2_w, k, grid, approx)?;
    relu_moments(sigma2_w.sqrt(), b, grid)
}

/// Length-map slope for RAAI rows with correlation strength `k`.
pub fn zeta_raai(sigma2_w: f64, k: f64, grid: &QuadratureGrid, approx: Approximation) -> Result<f64> {
    let m = moments_at(sigma2_w, k, grid, approx)?;
    Ok(m.second - correlation_fraction(k) * m.mean * m.mean)
}

/// Correlation-map slope at `c = 1` for RAAI rows with correlation strength `k`.
pub fn chi1_raai(sigma2_w: f64, k: f64, grid: &QuadratureGrid, approx: Approximation) -> Result<f64> {
    Ok(sigma2_w * moments_at(sigma2_w, k, grid, approx)?.gate)
}

pub fn zeta_rai(sigma2_w: f64, grid: &QuadratureGrid, approx: Approximation) -> Result<f64> {
    zeta_raai(sigma2_w, 0.0, grid, approx)
}

pub fn chi1_rai(sigma2_w: f64, grid: &QuadratureGrid, approx: Approximation) -> Result<f64> {
    chi1_raai(sigma2_w, 0.0, grid, approx)
}

/// `b E[u relu(x)]`, the part of the length slope not captured by `chi1` when `k = 0`.
pub fn beta_cross_term(sigma2_w: f64, grid: &QuadratureGrid, approx: Approximation) -> Result<f64> {
    let b = beta_scale(sigma2_w, 0.0, grid, approx)?;
    Ok(b * moments_at(sigma2_w, 0.0, grid, approx)?.beta_cross)
}

/// `sigma2_w E[relu'^2] + sigma_w E[relu' relu]` with `b = 1`. This form tends to
/// zero with `sigma_w` and crosses one near 0.55; kept for comparison with the
/// RMS length coefficient.
pub fn printed_zeta_rai(sigma2_w: f64, grid: &QuadratureGrid) -> Result<f64> {
    check_variance(sigma2_w)?;
    let m = relu_moments(sigma2_w.sqrt(), 1.0, grid)?;
    Ok(sigma2_w * m.gate + sigma2_w.sqrt() * m.mean)
}

/// Bisection for `coefficient(x) = 1` on `bracket`, stopping when the bracket is
/// narrower than `tol` or the residual is below `tol`.
pub fn find_critical_variance(coefficient: impl Fn(f64) -> Result<f64>, bracket: (f64, f64), tol: f64) -> Result<f64> {
    let (mut lo, mut hi) = bracket;
    if !(lo < hi) || !(tol > 0.0) {
        return Err(Error::invalid("bracket", format!("need lo < hi and tol > 0, got ({lo}, {hi}), {tol}")));
    }
    let mut f_lo = coefficient(lo)? - 1.0;
    let f_hi = coefficient(hi)? - 1.0;
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() {
        return Err(Error::NotBracketed { lo, hi });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f_mid = coefficient(mid)? - 1.0;
        if f_mid.abs() < tol && hi - lo < tol {
            return Ok(mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
        if hi - lo < tol * 1e-3 || hi - lo <= f64::EPSILON * hi.abs() {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Default bracket for all critical-variance searches.
pub const DEFAULT_BRACKET: (f64, f64) = (0.1, 4.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantity {
    /// Length boundary, `zeta = 1`.
    Length,
    /// Order-to-chaos boundary, `chi1 = 1`.
    Chaos,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub approximation: Approximation,
    pub scheme: String,
    pub quantity: Quantity,
    pub k: f64,
    pub critical_sigma2_w: f64,
}

/// The three critical variances per approximation: RAI length, RAAI chaos and
/// RAAI length, the latter two at correlation strength `k`.
pub fn critical_points(
    approxs: &[Approximation],
    k: f64,
    grid: &QuadratureGrid,
    tol: f64,
) -> Result<Vec<CriticalPoint>> {
    let mut out = Vec::new();
    for &approx in approxs {
        let rai_len = find_critical_variance(|s| zeta_rai(s, grid, approx), DEFAULT_BRACKET, tol)?;
        let raai_chaos = find_critical_variance(|s| chi1_raai(s, k, grid, approx), DEFAULT_BRACKET, tol)?;
        let raai_len = find_critical_variance(|s| zeta_raai(s, k, grid, approx), DEFAULT_BRACKET, tol)?;
        out.push(CriticalPoint {
            approximation: approx,
            scheme: "RAI".into(),
            quantity: Quantity::Length,
            k: 0.0,
            critical_sigma2_w: rai_len,
        });
        out.push(CriticalPoint {
            approximation: approx,
            scheme: "RAAI".into(),
            quantity: Quantity::Chaos,
            k,
            critical_sigma2_w: raai_chaos,
        });
        out.push(CriticalPoint {
            approximation: approx,
            scheme: "RAAI".into(),
            quantity: Quantity::Length,
            k,
            critical_sigma2_w: raai_len,
        });
    }
    Ok(out)
}
