//! Monte Carlo propagation of input signals through ensembles of random networks.
//!
//! Each network in the ensemble is an independent work unit with its own random
//! streams, so results do not depend on the number of worker threads. Per-network
//! traces are collected in network order and reduced sequentially.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::initkit::{sample_layer, InitScheme, LayerWeights};
use crate::rng::{self, tag, StreamRng};

/// Squared lengths above this are treated as overflow.
const OVERFLOW_LIMIT: f64 = 1e250;

/// Layers over which decorrelation must persist.
pub const TAIL_LAYERS: usize = 10;

/// Layers used by the growth estimator. Once signals align, each layer carries
/// only one effective sample per network, so shorter windows are too noisy.
pub const GROWTH_WINDOW: usize = 20;

/// Per-layer growth above one required before a length counts as diverging.
pub const GROWTH_TOL: f64 = 0.01;

/// Correlation drop below one that marks the chaotic phase.
pub const CHAOS_MARGIN: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub scheme: InitScheme,
    /// Nodes per layer, also the input dimension.
    pub width: usize,
    pub depth: usize,
    /// Number of signal pairs (`2 * n_inputs` signals) for curves, number of
    /// signals for dead-node counting.
    pub n_inputs: usize,
    pub n_networks: usize,
    pub input_correlation: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl PropagationConfig {
    /// N = 256, L = 30, M = 128, 8 networks.
    pub fn desk(scheme: InitScheme) -> Self {
        Self { scheme, width: 256, depth: 30, n_inputs: 128, n_networks: 8, input_correlation: 0.5, seed: 0 }
    }

    /// N = 2048, L = 60, M = 1024, 40 networks.
    pub fn paper(scheme: InitScheme) -> Self {
        Self { width: 2048, depth: 60, n_inputs: 1024, n_networks: 40, ..Self::desk(scheme) }
    }

    pub fn preset(preset: Preset, scheme: InitScheme) -> Self {
        match preset {
            Preset::Desk => Self::desk(scheme),
            Preset::Paper => Self::paper(scheme),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scheme.validate()?;
        if self.width < 2 {
            return Err(Error::invalid("width", format!("must be >= 2, got {}", self.width)));
        }
        for (name, v) in [("depth", self.depth), ("n_inputs", self.n_inputs), ("n_networks", self.n_networks)] {
            if v == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        if !(-1.0..=1.0).contains(&self.input_correlation) {
            return Err(Error::invalid(
                "input_correlation",
                format!("must lie in [-1, 1], got {}", self.input_correlation),
            ));
        }
        Ok(())
    }
}

/// Per-layer statistics for a batch of signals through one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalTrace {
    /// `q[l][a]`: mean squared pre-activation of signal `a` at layer `l`.
    pub q: Vec<Vec<f64>>,
    /// `overlap[l][p]`: mean pre-activation product of tracked pair `p`.
    pub overlap: Vec<Vec<f64>>,
    /// Fraction of non-positive pre-activations at each layer.
    pub dead: Vec<f64>,
    /// First layer whose activations overflowed; the trace stops before it.
    pub overflow_at: Option<usize>,
}

impl SignalTrace {
    pub fn layers(&self) -> usize {
        self.q.len()
    }

    /// Correlation coefficient of each tracked pair at layer `l`.
    pub fn correlations(&self, l: usize, pairs: &[(usize, usize)]) -> Vec<f64> {
        pairs.iter().zip(&self.overlap[l]).map(|(&(a, b), &o)| o / (self.q[l][a] * self.q[l][b]).sqrt()).collect()
    }
}

struct Propagator<'a> {
    signals: Array2<f64>,
    pairs: &'a [(usize, usize)],
    trace: SignalTrace,
}

impl<'a> Propagator<'a> {
    fn new(inputs: Array2<f64>, pairs: &'a [(usize, usize)]) -> Self {
        Self {
            signals: inputs,
            pairs,
            trace: SignalTrace { q: Vec::new(), overlap: Vec::new(), dead: Vec::new(), overflow_at: None },
        }
    }

    /// Applies one layer; returns false once the signals overflow.
    fn step(&mut self, layer: &LayerWeights) -> Result<bool> {
        if self.trace.overflow_at.is_some() {
            return Ok(false);
        }
        if layer.n_in() != self.signals.ncols() {
            return Err(Error::Shape(format!(
                "layer {} expects {} inputs, signals have {}",
                self.trace.q.len(),
                layer.n_in(),
                self.signals.ncols()
            )));
        }
        let mut h = self.signals.dot(&layer.weights.t());
        h += &layer.bias;
        let n = h.ncols() as f64;
        let q: Vec<f64> = h.rows().into_iter().map(|r| r.dot(&r) / n).collect();
        if q.iter().any(|v| !v.is_finite() || *v > OVERFLOW_LIMIT) {
            self.trace.overflow_at = Some(self.trace.q.len());
            return Ok(false);
        }
        let overlap = self.pairs.iter().map(|&(a, b)| h.row(a).dot(&h.row(b)) / n).collect();
        let dead = h.iter().filter(|&&x| x <= 0.0).count() as f64 / h.len() as f64;
        self.trace.q.push(q);
        self.trace.overlap.push(overlap);
        self.trace.dead.push(dead);
        h.mapv_inplace(|x| x.max(0.0));
        self.signals = h;
        Ok(true)
    }
}

/// Propagates `inputs` (one signal per row) through `layers`, applying ReLU between
/// layers, and records lengths and pair overlaps of the pre-activations.
pub fn forward_signals(layers: &[LayerWeights], inputs: &Array2<f64>, pairs: &[(usize, usize)]) -> Result<SignalTrace> {
    for &(a, b) in pairs {
        if a >= inputs.nrows() || b >= inputs.nrows() {
            return Err(Error::Shape(format!("pair ({a}, {b}) outside {} signals", inputs.nrows())));
        }
    }
    let mut prop = Propagator::new(inputs.clone(), pairs);
    for layer in layers {
        if !prop.step(layer)? {
            break;
        }
    }
    Ok(prop.trace)
}

/// `n_pairs` signal pairs with correlation `c0`, each signal scaled to mean square
/// one. Rows `2p` and `2p + 1` form pair `p`.
pub fn correlated_pairs<R: Rng + ?Sized>(n_pairs: usize, dim: usize, c0: f64, rng: &mut R) -> Array2<f64> {
    let mut x = Array2::zeros((2 * n_pairs, dim));
    let mix = (1.0 - c0 * c0).max(0.0).sqrt();
    for p in 0..n_pairs {
        for j in 0..dim {
            let a: f64 = rng.sample(StandardNormal);
            let xi: f64 = rng.sample(StandardNormal);
            x[[2 * p, j]] = a;
            x[[2 * p + 1, j]] = c0 * a + mix * xi;
        }
    }
    for mut row in x.rows_mut() {
        let norm = (row.dot(&row) / dim as f64).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    x
}

fn pair_indices(n_pairs: usize) -> Vec<(usize, usize)> {
    (0..n_pairs).map(|p| (2 * p, 2 * p + 1)).collect()
}

fn run_network(
    cfg: &PropagationConfig,
    net: usize,
    inputs: Array2<f64>,
    pairs: &[(usize, usize)],
    layer_tag: u64,
) -> Result<SignalTrace> {
    let mut wrng: StreamRng = rng::stream(cfg.seed, &[layer_tag, net as u64]);
    let mut prop = Propagator::new(inputs, pairs);
    for _ in 0..cfg.depth {
        let layer = sample_layer(&cfg.scheme, cfg.width, cfg.width, &mut wrng)?;
        if !prop.step(&layer)? {
            break;
        }
    }
    Ok(prop.trace)
}

/// Ensemble statistics per layer. Means and standard deviations pool all
/// (network, signal) samples; correlations pool all (network, pair) samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerStatsCurve {
    pub mean_q: Vec<f64>,
    pub std_q: Vec<f64>,
    pub mean_c: Vec<f64>,
    pub std_c: Vec<f64>,
    /// Mean of `ln q`, used for growth-rate estimates.
    pub mean_log_q: Vec<f64>,
    pub dead_fraction: Vec<f64>,
    /// Layer at which some network overflowed; the curve stops before it.
    pub overflow_at: Option<usize>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

impl LayerStatsCurve {
    pub fn layers(&self) -> usize {
        self.mean_q.len()
    }

    pub fn is_truncated(&self) -> bool {
        self.overflow_at.is_some()
    }

    fn from_traces(traces: &[SignalTrace], pairs: &[(usize, usize)]) -> Self {
        let layers = traces.iter().map(SignalTrace::layers).min().unwrap_or(0);
        let overflow_at = traces.iter().filter_map(|t| t.overflow_at).min();
        let mut curve = LayerStatsCurve { overflow_at, ..Default::default() };
        for l in 0..layers {
            let qs = traces.iter().flat_map(|t| t.q[l].iter().copied());
            let (mq, sq) = mean_std(qs.clone());
            let (mlq, _) = mean_std(qs.map(f64::ln));
            let cs: Vec<f64> = traces.iter().flat_map(|t| t.correlations(l, pairs)).collect();
            let (mc, sc) = mean_std(cs.iter().copied());
            let (md, _) = mean_std(traces.iter().map(|t| t.dead[l]));
            curve.mean_q.push(mq);
            curve.std_q.push(sq);
            curve.mean_c.push(mc);
            curve.std_c.push(sc);
            curve.mean_log_q.push(mlq);
            curve.dead_fraction.push(md);
        }
        curve
    }

    /// Per-layer growth factor `exp(slope)` of a least-squares line through
    /// `mean_log_q` over the last `window` layers. Infinite if the curve overflowed.
    pub fn growth_rate(&self, window: usize) -> f64 {
        if self.is_truncated() {
            return f64::INFINITY;
        }
        let n = window.min(self.layers());
        if n < 2 {
            return f64::NAN;
        }
        let ys = &self.mean_log_q[self.layers() - n..];
        let xm = (n as f64 - 1.0) / 2.0;
        let ym = ys.iter().sum::<f64>() / n as f64;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (i, y) in ys.iter().enumerate() {
            let dx = i as f64 - xm;
            sxy += dx * (y - ym);
            sxx += dx * dx;
        }
        (sxy / sxx).exp()
    }

    /// Mean of `mean_q` over the last `window` layers.
    pub fn plateau_q(&self, window: usize) -> f64 {
        let n = window.min(self.layers());
        self.mean_q[self.layers() - n..].iter().sum::<f64>() / n as f64
    }

    pub fn final_c(&self) -> Option<f64> {
        self.mean_c.last().copied()
    }

    /// True when `mean_c` stays below `1 - margin` over the last `window` layers.
    pub fn persistently_decorrelated(&self, window: usize, margin: f64) -> bool {
        let n = window.min(self.layers());
        n > 0 && self.mean_c[self.layers() - n..].iter().all(|&c| c < 1.0 - margin)
    }
}

/// Runs the ensemble and reduces it to per-layer statistics.
pub fn measure_curves(cfg: &PropagationConfig) -> Result<LayerStatsCurve> {
    cfg.validate()?;
    let pairs = pair_indices(cfg.n_inputs);
    let traces = (0..cfg.n_networks)
        .into_par_iter()
        .map(|net| {
            let mut irng = rng::stream(cfg.seed, &[tag::MCPROP_INPUTS, net as u64]);
            let inputs = correlated_pairs(cfg.n_inputs, cfg.width, cfg.input_correlation, &mut irng);
            run_network(cfg, net, inputs, &pairs, tag::MCPROP_LAYER)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerStatsCurve::from_traces(&traces, &pairs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeadNodeReport {
    pub scheme: InitScheme,
    /// Fraction of (node, input) pairs with non-positive pre-activation, over all
    /// layers and networks.
    pub probability: f64,
    /// Standard deviation of the per-network fraction.
    pub std_across_networks: f64,
    pub per_layer: Vec<f64>,
}

/// Dead-node probability for `n_inputs` standard normal inputs.
pub fn dead_node_probability(cfg: &PropagationConfig) -> Result<DeadNodeReport> {
    cfg.validate()?;
    let traces = (0..cfg.n_networks)
        .into_par_iter()
        .map(|net| {
            let mut irng = rng::stream(cfg.seed, &[tag::DEADNODE_INPUTS, net as u64]);
            let inputs = Array2::from_shape_simple_fn((cfg.n_inputs, cfg.width), || irng.sample(StandardNormal));
            run_network(cfg, net, inputs, &[], tag::DEADNODE_LAYER)
        })
        .collect::<Result<Vec<_>>>()?;
    let per_net: Vec<f64> = traces.iter().map(|t| t.dead.iter().sum::<f64>() / t.dead.len().max(1) as f64).collect();
    let layers = traces.iter().map(SignalTrace::layers).min().unwrap_or(0);
    let per_layer = (0..layers).map(|l| traces.iter().map(|t| t.dead[l]).sum::<f64>() / traces.len() as f64).collect();
    let (probability, std_across_networks) = mean_std(per_net.iter().copied());
    Ok(DeadNodeReport { scheme: cfg.scheme, probability, std_across_networks, per_layer })
}

/// One grid point of a boundary sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryProbe {
    pub sigma2_w: f64,
    pub growth: f64,
    pub final_c: Option<f64>,
    pub diverging: bool,
    pub chaotic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalBoundary {
    pub length_boundary: Option<f64>,
    pub chaos_boundary: Option<f64>,
    pub probes: Vec<BoundaryProbe>,
}

/// Sweeps `sigma2_w` over `grid` with the other settings of `cfg`.
///
/// The length boundary is the smallest grid value whose growth over the last
/// [`GROWTH_WINDOW`] layers exceeds `1 + GROWTH_TOL`. The chaos boundary is the
/// smallest value whose `mean_c` stays below `1 - CHAOS_MARGIN` over the last
/// [`TAIL_LAYERS`] layers. A grid where every point, or no point, diverges does
/// not bracket the length boundary.
pub fn locate_empirical_boundary(cfg: &PropagationConfig, grid: &[f64]) -> Result<EmpiricalBoundary> {
    if grid.len() < 2 {
        return Err(Error::invalid("grid", "need at least two points"));
    }
    let curves = sweep_curves(cfg, grid)?;
    let probes: Vec<BoundaryProbe> = grid.iter().zip(&curves).map(|(&s, c)| BoundaryProbe::from_curve(s, c)).collect();
    boundary_from_probes(probes, &cfg.scheme.label())
}

/// Curves for each `sigma2_w` in `grid`, all other settings taken from `cfg`.
pub fn sweep_curves(cfg: &PropagationConfig, grid: &[f64]) -> Result<Vec<LayerStatsCurve>> {
    grid.par_iter()
        .map(|&s| measure_curves(&PropagationConfig { scheme: cfg.scheme.with_sigma2_w(s), ..*cfg }))
        .collect()
}

impl BoundaryProbe {
    pub fn from_curve(sigma2_w: f64, curve: &LayerStatsCurve) -> Self {
        let growth = curve.growth_rate(GROWTH_WINDOW);
        BoundaryProbe {
            sigma2_w,
            growth,
            final_c: curve.final_c(),
            diverging: growth > 1.0 + GROWTH_TOL,
            chaotic: !curve.is_truncated() && curve.persistently_decorrelated(TAIL_LAYERS, CHAOS_MARGIN),
        }
    }
}

/// Applies the boundary rules of [`locate_empirical_boundary`] to probes.
pub fn boundary_from_probes(probes: Vec<BoundaryProbe>, label: &str) -> Result<EmpiricalBoundary> {
    let first =
        |pred: fn(&BoundaryProbe) -> bool| probes.iter().filter(|p| pred(p)).map(|p| p.sigma2_w).min_by(f64::total_cmp);
    let length_boundary = first(|p| p.diverging);
    let chaos_boundary = first(|p| p.chaotic);
    let lowest = probes.iter().map(|p| p.sigma2_w).min_by(f64::total_cmp);
    match length_boundary {
        None => Err(Error::BoundaryNotBracketed(format!("no grid point diverges for {label}"))),
        Some(b) if Some(b) == lowest => {
            Err(Error::BoundaryNotBracketed(format!("every grid point diverges for {label}")))
        }
        _ => Ok(EmpiricalBoundary { length_boundary, chaos_boundary, probes }),
    }
}
