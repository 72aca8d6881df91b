//! Closed-form mean-field maps for ReLU networks with correlated Gaussian weights.
//!
//! With `kappa = k/(1+k)` the length and overlap maps are
//!
//! ```text
//! q'   = (sigma2_w/2) (1 - kappa/pi) q + sigma2_b
//! q12' = (sigma2_w/2) (f(c) - kappa/pi) sqrt(q1 q2) + sigma2_b
//! ```
//!
//! The subtracted `kappa/pi` comes from the anti-correlation between weights
//! entering the same node, which cancels part of the squared mean activation.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::initkit::correlation_fraction;

/// Divergence threshold for length iteration.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Slack allowed when clamping correlations that drifted just outside [-1, 1].
const CLAMP_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapParams {
    pub sigma2_w: f64,
    pub sigma2_b: f64,
    pub k: f64,
}

impl MapParams {
    pub fn new(sigma2_w: f64, sigma2_b: f64, k: f64) -> Result<Self> {
        let p = Self { sigma2_w, sigma2_b, k };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite("sigma2_w", self.sigma2_w)?;
        ensure_finite("sigma2_b", self.sigma2_b)?;
        ensure_finite("k", self.k)?;
        if self.sigma2_w < 0.0 {
            return Err(Error::invalid("sigma2_w", format!("must be >= 0, got {}", self.sigma2_w)));
        }
        if self.sigma2_b < 0.0 {
            return Err(Error::invalid("sigma2_b", format!("must be >= 0, got {}", self.sigma2_b)));
        }
        if self.k <= -1.0 {
            return Err(Error::invalid("k", format!("must be > -1, got {}", self.k)));
        }
        Ok(())
    }

    /// `kappa / pi`, the share of the squared mean removed by anti-correlation.
    fn mean_penalty(&self) -> f64 {
        correlation_fraction(self.k) / PI
    }

    /// Slope of the length map.
    pub fn length_slope(&self) -> f64 {
        0.5 * self.sigma2_w * (1.0 - self.mean_penalty())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapState {
    pub q1: f64,
    pub q2: f64,
    pub q12: f64,
}

impl MapState {
    /// Two signals of equal length `q` with correlation `c`.
    pub fn symmetric(q: f64, c: f64) -> Self {
        Self { q1: q, q2: q, q12: c * q }
    }

    /// Correlation coefficient, `None` when either length is zero.
    pub fn correlation(&self) -> Option<f64> {
        let norm = (self.q1 * self.q2).sqrt();
        (norm > 0.0).then(|| (self.q12 / norm).clamp(-1.0, 1.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PhaseLabel {
    BoundedOrdered,
    BoundedChaotic,
    Unbounded,
}

impl fmt::Display for PhaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhaseLabel::BoundedOrdered => "BoundedOrdered",
            PhaseLabel::BoundedChaotic => "BoundedChaotic",
            PhaseLabel::Unbounded => "Unbounded",
        })
    }
}

/// `c/2 + c asin(c)/pi + sqrt(1 - c^2)/pi`, the normalized ReLU cross moment.
pub fn f_corr(c: f64) -> Result<f64> {
    if !c.is_finite() || c.abs() > 1.0 + CLAMP_SLACK {
        return Err(Error::CorrelationDomain(c));
    }
    let c = c.clamp(-1.0, 1.0);
    Ok(0.5 * c + (c * c.asin() + (1.0 - c * c).max(0.0).sqrt()) / PI)
}

pub fn length_step(q: f64, p: &MapParams) -> f64 {
    p.length_slope() * q + p.sigma2_b
}

/// One layer of the joint length/overlap map.
pub fn corr_step(s: &MapState, p: &MapParams) -> Result<MapState> {
    let norm = (s.q1 * s.q2).sqrt();
    let overlap = if norm > 0.0 {
        let c = s.q12 / norm;
        0.5 * p.sigma2_w * (f_corr(c)? - p.mean_penalty()) * norm + p.sigma2_b
    } else if p.sigma2_b > 0.0 {
        p.sigma2_b
    } else {
        return Err(Error::DegenerateState("zero-length signal with sigma2_b = 0"));
    };
    let q1 = length_step(s.q1, p);
    let q2 = length_step(s.q2, p);
    // Roundoff can push the overlap a hair past Cauchy-Schwarz at c = 1.
    let bound = (q1 * q2).sqrt();
    Ok(MapState { q1, q2, q12: overlap.clamp(-bound, bound) })
}

/// Slope of the correlation map at `c = 1`: `sigma2_w / 2`, independent of `k`.
pub fn chi1(p: &MapParams) -> f64 {
    0.5 * p.sigma2_w
}

/// Length-divergence boundary `2 / (1 - kappa/pi)`.
pub fn g_k(k: f64) -> Result<f64> {
    ensure_finite("k", k)?;
    if k <= -1.0 {
        return Err(Error::invalid("k", format!("must be > -1, got {k}")));
    }
    let denom = 1.0 - correlation_fraction(k) / PI;
    if denom <= 0.0 {
        return Err(Error::BoundaryAtInfinity(k));
    }
    Ok(2.0 / denom)
}

/// Phase of `(sigma2_w, k)`. Boundary values fall on the bounded, ordered side.
pub fn classify_phase(p: &MapParams) -> Result<PhaseLabel> {
    p.validate()?;
    Ok(if p.sigma2_w > g_k(p.k)? {
        PhaseLabel::Unbounded
    } else if chi1(p) > 1.0 {
        PhaseLabel::BoundedChaotic
    } else {
        PhaseLabel::BoundedOrdered
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum LengthFixedPoint {
    Finite(f64),
    /// Signals shrink to zero (no bias, slope below one).
    Vanishing,
    Divergent,
}

impl LengthFixedPoint {
    pub fn value(&self) -> Option<f64> {
        match self {
            LengthFixedPoint::Finite(q) => Some(*q),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPoints {
    pub q_star: LengthFixedPoint,
    /// `None` when the length diverges.
    pub c_star: Option<f64>,
    pub iterations: usize,
}

/// Iterates the maps to their fixed points.
///
/// `q*` is obtained by iterating from `q = 1`. For `sigma2_b = 0` and slope below
/// one the length vanishes; `c*` then comes from the scale-free ratio map
/// `c' = (f(c) - kappa/pi) / (1 - kappa/pi)`. `c*` is searched from `c = 0.5`.
pub fn solve_fixed_points(p: &MapParams, tol: f64, max_iter: usize) -> Result<FixedPoints> {
    p.validate()?;
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", format!("must be > 0, got {tol}")));
    }
    let slope = p.length_slope();
    if slope >= 1.0 && (p.sigma2_b > 0.0 || slope > 1.0) {
        return Ok(FixedPoints { q_star: LengthFixedPoint::Divergent, c_star: None, iterations: 0 });
    }
    let mut iterations = 0;
    let q_star = if p.sigma2_b == 0.0 {
        if slope == 1.0 {
            // Critical and bias-free: every q is fixed, the iteration starts at 1.
            LengthFixedPoint::Finite(1.0)
        } else {
            LengthFixedPoint::Vanishing
        }
    } else {
        let mut q = 1.0;
        loop {
            let next = length_step(q, p);
            iterations += 1;
            if next > DIVERGENCE_LIMIT {
                return Ok(FixedPoints { q_star: LengthFixedPoint::Divergent, c_star: None, iterations });
            }
            if (next - q).abs() <= tol * next.max(1.0) {
                break LengthFixedPoint::Finite(next);
            }
            if iterations >= max_iter {
                return Err(Error::NonConvergence { iterations, last: next });
            }
            q = next;
        }
    };

    let mut c = 0.5;
    let mut c_iter = 0;
    let step = |c: f64| -> Result<f64> {
        match q_star {
            LengthFixedPoint::Finite(q) => {
                let s = corr_step(&MapState::symmetric(q, c), p)?;
                Ok(s.correlation().unwrap_or(1.0))
            }
            _ => {
                let pen = p.mean_penalty();
                Ok(((f_corr(c)? - pen) / (1.0 - pen)).clamp(-1.0, 1.0))
            }
        }
    };
    loop {
        let next = step(c)?;
        c_iter += 1;
        if (next - c).abs() < tol {
            c = next;
            break;
        }
        if c_iter >= max_iter {
            return Err(Error::NonConvergence { iterations: c_iter, last: next });
        }
        c = next;
    }
    Ok(FixedPoints { q_star, c_star: Some(c), iterations: iterations + c_iter })
}

/// One row of a phase-diagram sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub params: MapParams,
    pub phase: PhaseLabel,
    pub fixed: FixedPoints,
}

pub fn phase_point(p: &MapParams) -> Result<PhasePoint> {
    Ok(PhasePoint { params: *p, phase: classify_phase(p)?, fixed: solve_fixed_points(p, 1e-10, 100_000)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params(sigma2_w: f64, sigma2_b: f64, k: f64) -> MapParams {
        MapParams::new(sigma2_w, sigma2_b, k).unwrap()
    }

    #[test]
    fn f_corr_endpoints() {
        assert_relative_eq!(f_corr(1.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(f_corr(0.0).unwrap(), 1.0 / PI, epsilon = 1e-15);
        assert_relative_eq!(f_corr(-1.0).unwrap(), 0.0, epsilon = 1e-15);
        assert!(f_corr(1.0 + 1e-13).is_ok());
        assert!(matches!(f_corr(1.0 + 1e-9), Err(Error::CorrelationDomain(_))));
        assert!(f_corr(f64::NAN).is_err());
    }

    #[test]
    fn f_corr_monotone_and_above_diagonal() {
        let n = 10_000;
        let mut prev = f_corr(-1.0).unwrap();
        for i in 1..=n {
            let c = -1.0 + 2.0 * i as f64 / n as f64;
            let v = f_corr(c).unwrap();
            assert!(v >= prev - 1e-15, "not monotone at {c}");
            assert!((0.0..=1.0 + 1e-15).contains(&v));
            if c >= 0.0 {
                assert!(v >= c - 1e-15);
            }
            prev = v;
        }
    }

    #[test]
    fn length_examples() {
        assert_eq!(length_step(0.7, &params(2.0, 0.0, 0.0)), 0.7);
        let p = params(1.0, 0.1, 0.0);
        assert_relative_eq!(length_step(0.2, &p), 0.2, epsilon = 1e-15);
        assert_relative_eq!(params(g_k(100.0).unwrap(), 0.0, 100.0).length_slope(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn corr_examples() {
        let p = params(2.0, 0.0, 0.0);
        let s = corr_step(&MapState::symmetric(1.0, 0.0), &p).unwrap();
        assert_relative_eq!(s.correlation().unwrap(), 1.0 / PI, epsilon = 1e-15);

        let p = params(1.0, 0.0, 0.0);
        let err = corr_step(&MapState { q1: 0.0, q2: 1.0, q12: 0.0 }, &p).unwrap_err();
        assert!(matches!(err, Error::DegenerateState(_)));
    }

    #[test]
    fn boundaries() {
        assert_eq!(g_k(0.0).unwrap(), 2.0);
        // 2 / (1 - (100/101)/pi), evaluated in extended precision.
        assert_relative_eq!(g_k(100.0).unwrap(), 2.920_382_928_209_292, epsilon = 1e-13);
        assert_relative_eq!(g_k(-0.5).unwrap(), 1.517_093_985_989_552_3, epsilon = 1e-13);
        assert!(g_k(-1.0).is_err());
        assert_eq!(chi1(&params(2.0, 0.3, 100.0)), 1.0);
        assert_eq!(chi1(&params(1.0, 0.0, 0.0)), 0.5);
        assert_eq!(chi1(&params(2.5, 0.0, 0.0)), 1.25);
    }

    #[test]
    fn phase_examples() {
        use PhaseLabel::*;
        assert_eq!(classify_phase(&params(1.5, 0.0, 0.0)).unwrap(), BoundedOrdered);
        assert_eq!(classify_phase(&params(2.5, 0.0, 100.0)).unwrap(), BoundedChaotic);
        assert_eq!(classify_phase(&params(3.5, 0.0, 100.0)).unwrap(), Unbounded);
        // Tie rule: boundary values sit on the bounded / ordered side.
        assert_eq!(classify_phase(&params(2.0, 0.0, 0.0)).unwrap(), BoundedOrdered);
        assert_eq!(classify_phase(&params(2.0, 0.0, 100.0)).unwrap(), BoundedOrdered);
        let g = g_k(100.0).unwrap();
        assert_eq!(classify_phase(&params(g, 0.0, 100.0)).unwrap(), BoundedChaotic);
    }

    #[test]
    fn fixed_point_examples() {
        let fp = solve_fixed_points(&params(1.0, 0.1, 0.0), 1e-12, 10_000).unwrap();
        assert_relative_eq!(fp.q_star.value().unwrap(), 0.2, epsilon = 1e-10);
        assert_relative_eq!(fp.c_star.unwrap(), 1.0, epsilon = 1e-5);

        // Pinned with 30-digit arithmetic.
        let fp = solve_fixed_points(&params(2.5, 0.1, 100.0), 1e-13, 100_000).unwrap();
        assert_relative_eq!(fp.q_star.value().unwrap(), 0.694_695_890_874_842_5, epsilon = 1e-10);
        assert_relative_eq!(fp.c_star.unwrap(), 0.575_477_970_581_376_6, epsilon = 1e-9);

        let fp = solve_fixed_points(&params(3.0, 0.1, 100.0), 1e-10, 10_000).unwrap();
        assert_eq!(fp.q_star, LengthFixedPoint::Divergent);
        assert_eq!(fp.c_star, None);

        let fp = solve_fixed_points(&params(2.5, 0.0, 100.0), 1e-13, 100_000).unwrap();
        assert_eq!(fp.q_star, LengthFixedPoint::Vanishing);
        assert_relative_eq!(fp.c_star.unwrap(), 0.017_308_120_893_022_674, epsilon = 1e-9);
    }

    #[test]
    fn c_star_independent_of_start_with_evolving_lengths() {
        let p = params(2.5, 0.1, 100.0);
        let mut s = MapState::symmetric(1.0, 0.6);
        for _ in 0..2000 {
            s = corr_step(&s, &p).unwrap();
        }
        assert_relative_eq!(s.correlation().unwrap(), 0.575_477_970_581_376_6, epsilon = 1e-9);
    }

    #[test]
    fn non_convergence_is_reported() {
        let err = solve_fixed_points(&params(1.99, 0.1, 0.0), 1e-14, 5).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { iterations: 5, .. }));
    }

    #[test]
    fn chi1_matches_finite_difference() {
        for &(w, b, k) in &[(1.0, 0.1, 0.0), (2.5, 0.1, 100.0), (1.5, 0.05, 3.0)] {
            let p = params(w, b, k);
            let q = solve_fixed_points(&p, 1e-13, 100_000).unwrap().q_star.value().unwrap();
            let eps = 1e-5;
            let c_of = |c: f64| corr_step(&MapState::symmetric(q, c), &p).unwrap().correlation().unwrap();
            let slope = (c_of(1.0) - c_of(1.0 - eps)) / eps;
            assert!((slope - chi1(&p)).abs() < 1e-2, "{slope} vs {}", chi1(&p));
        }
    }

    proptest! {
        #[test]
        fn corr_step_respects_cauchy_schwarz(
            q1 in 0.0f64..10.0, q2 in 0.0f64..10.0, c in -1.0f64..=1.0,
            w in 0.0f64..4.0, b in 0.0f64..1.0, k in -0.99f64..1000.0,
        ) {
            prop_assume!(b > 0.0 || (q1 > 0.0 && q2 > 0.0));
            let s = MapState { q1, q2, q12: c * (q1 * q2).sqrt() };
            let n = corr_step(&s, &params(w, b, k)).unwrap();
            prop_assert!(n.q12.abs() <= (n.q1 * n.q2).sqrt() * (1.0 + 1e-12));
        }

        #[test]
        fn unit_correlation_is_fixed(w in 0.1f64..2.9, b in 0.01f64..1.0, k in -0.5f64..1000.0) {
            let p = params(w, b, k);
            prop_assume!(p.length_slope() < 0.999);
            let q = solve_fixed_points(&p, 1e-13, 1_000_000).unwrap().q_star.value().unwrap();
            let n = corr_step(&MapState::symmetric(q, 1.0), &p).unwrap();
            prop_assert!((n.correlation().unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn uncorrelated_weights_never_chaotic(w in 0.0f64..10.0, b in 0.0f64..5.0) {
            prop_assert_ne!(classify_phase(&params(w, b, 0.0)).unwrap(), PhaseLabel::BoundedChaotic);
        }
    }
}
