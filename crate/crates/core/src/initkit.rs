//! Weight and bias samplers for He, correlated-Gaussian, RAI and RAAI initialization.
//!
//! Weights incoming to one node form a row. Rows are independent of each other;
//! within a row the Gaussian part has covariance
//!
//! ```text
//! A = (sigma2_w / n) (I - k/(1+k) J / d)
//! ```
//!
//! where `J` is the all-ones matrix, `d` the row dimension and `n` the fan-in
//! (`d = n` for the correlated-Gaussian family, `d = n + 1` for RAAI, whose
//! correlated block also covers the bias). Rows are drawn with the rank-one
//! transform `w = sqrt(sigma2_w / n) (z - beta * mean(z))` with
//! `beta = 1 - 1/sqrt(1+k)`, which reproduces `A` exactly because
//! `2 beta - beta^2 = k/(1+k)`.

use std::fmt;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InitFamily {
    He,
    CorrelatedGaussian,
    #[serde(rename = "RAI")]
    Rai,
    #[serde(rename = "RAAI")]
    Raai,
}

impl fmt::Display for InitFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitFamily::He => "He",
            InitFamily::CorrelatedGaussian => "CorrelatedGaussian",
            InitFamily::Rai => "RAI",
            InitFamily::Raai => "RAAI",
        })
    }
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

/// An initialization family together with its parameters.
///
/// Serialized as `{"family", "sigma2_w", "sigma2_b", "k"}`. The beta substitution
/// flag only matters for RAI/RAAI and is written only when switched off.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitScheme {
    pub family: InitFamily,
    pub sigma2_w: f64,
    pub sigma2_b: f64,
    pub k: f64,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub beta_substitution: bool,
}

impl InitScheme {
    pub fn he() -> Self {
        Self::gaussian(InitFamily::He, 2.0, 0.0, 0.0)
    }

    /// Anti-correlated initialization at the order-to-chaos point `(2, 0)`, `k = 100`.
    pub fn aci() -> Self {
        Self::correlated(2.0, 0.0, 100.0)
    }

    pub fn rai() -> Self {
        Self::gaussian(InitFamily::Rai, 0.36, 0.0, 0.0)
    }

    pub fn raai() -> Self {
        Self::gaussian(InitFamily::Raai, 0.9, 0.0, 100.0)
    }

    pub fn correlated(sigma2_w: f64, sigma2_b: f64, k: f64) -> Self {
        Self::gaussian(InitFamily::CorrelatedGaussian, sigma2_w, sigma2_b, k)
    }

    /// Default parameters of a family.
    pub fn default_for(family: InitFamily) -> Self {
        match family {
            InitFamily::He => Self::he(),
            InitFamily::CorrelatedGaussian => Self::aci(),
            InitFamily::Rai => Self::rai(),
            InitFamily::Raai => Self::raai(),
        }
    }

    fn gaussian(family: InitFamily, sigma2_w: f64, sigma2_b: f64, k: f64) -> Self {
        Self { family, sigma2_w, sigma2_b, k, beta_substitution: true }
    }

    pub fn with_sigma2_w(mut self, sigma2_w: f64) -> Self {
        self.sigma2_w = sigma2_w;
        self
    }

    pub fn with_sigma2_b(mut self, sigma2_b: f64) -> Self {
        self.sigma2_b = sigma2_b;
        self
    }

    pub fn with_k(mut self, k: f64) -> Self {
        self.k = k;
        self
    }

    pub fn without_beta_substitution(mut self) -> Self {
        self.beta_substitution = false;
        self
    }

    /// `k / (1 + k)`.
    pub fn kappa(&self) -> f64 {
        correlation_fraction(self.k)
    }

    pub fn has_beta_entry(&self) -> bool {
        matches!(self.family, InitFamily::Rai | InitFamily::Raai) && self.beta_substitution
    }

    /// Short label used in reports: He, ACI (k > 0), PCI (k < 0), RAI, RAAI.
    pub fn label(&self) -> String {
        match self.family {
            InitFamily::He => "He".into(),
            InitFamily::CorrelatedGaussian if self.k == 0.0 => "He".into(),
            InitFamily::CorrelatedGaussian if self.k > 0.0 => format!("ACI(k={})", self.k),
            InitFamily::CorrelatedGaussian => format!("PCI(k={})", self.k),
            InitFamily::Rai => "RAI".into(),
            InitFamily::Raai => format!("RAAI(k={})", self.k),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite("sigma2_w", self.sigma2_w)?;
        ensure_finite("sigma2_b", self.sigma2_b)?;
        ensure_finite("k", self.k)?;
        if self.sigma2_w <= 0.0 {
            return Err(Error::invalid("sigma2_w", format!("must be > 0, got {}", self.sigma2_w)));
        }
        if self.sigma2_b < 0.0 {
            return Err(Error::invalid("sigma2_b", format!("must be >= 0, got {}", self.sigma2_b)));
        }
        if self.k <= -1.0 {
            return Err(Error::invalid(
                "k",
                format!("must be > -1 for a positive definite covariance, got {}", self.k),
            ));
        }
        if matches!(self.family, InitFamily::He | InitFamily::Rai) && self.k != 0.0 {
            return Err(Error::invalid("k", format!("{} has uncorrelated weights, got k = {}", self.family, self.k)));
        }
        Ok(())
    }
}

/// `k / (1 + k)`.
pub fn correlation_fraction(k: f64) -> f64 {
    k / (1.0 + k)
}

/// Shift `beta` of the rank-one transform, solving `2 beta - beta^2 = k/(1+k)`.
pub fn rank_one_shift(k: f64) -> f64 {
    1.0 - 1.0 / (1.0 + k).sqrt()
}

fn check_row_params(n_in: usize, sigma2_w: f64, k: f64) -> Result<()> {
    if n_in == 0 {
        return Err(Error::invalid("n_in", "must be at least 1"));
    }
    ensure_finite("sigma2_w", sigma2_w)?;
    ensure_finite("k", k)?;
    if sigma2_w <= 0.0 {
        return Err(Error::invalid("sigma2_w", format!("must be > 0, got {sigma2_w}")));
    }
    if k <= -1.0 {
        return Err(Error::invalid("k", format!("must be > -1, got {k}")));
    }
    Ok(())
}

/// Fills `row` with `scale * (z - beta * mean(z))`, `z` standard normal.
fn fill_correlated<R: Rng + ?Sized>(row: &mut [f64], scale: f64, beta: f64, rng: &mut R) {
    for x in row.iter_mut() {
        *x = rng.sample(StandardNormal);
    }
    let mean = row.iter().sum::<f64>() / row.len() as f64;
    for x in row.iter_mut() {
        *x = scale * (*x - beta * mean);
    }
}

/// One row of weights with covariance `(sigma2_w/n_in)(I - k/(1+k) J/n_in)`.
pub fn sample_correlated_row<R: Rng + ?Sized>(n_in: usize, sigma2_w: f64, k: f64, rng: &mut R) -> Result<Array1<f64>> {
    check_row_params(n_in, sigma2_w, k)?;
    let mut row = vec![0.0; n_in];
    fill_correlated(&mut row, (sigma2_w / n_in as f64).sqrt(), rank_one_shift(k), rng);
    Ok(Array1::from(row))
}

/// A Beta(2, 1) draw by inverse CDF: `F(u) = u^2`, so `u = sqrt(v)`.
pub fn sample_beta21<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>().sqrt()
}

/// One layer's parameters plus the scheme and seed that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    /// `n_out x n_in`; row `i` holds the weights incoming to node `i`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub scheme: InitScheme,
    pub seed: u64,
    /// Index of the beta-substituted entry in each augmented `(weights, bias)` row;
    /// `n_in` denotes the bias. Empty for schemes without substitution.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub substituted: Vec<usize>,
}

impl LayerWeights {
    /// Samples a layer from a fresh stream seeded with `seed`.
    pub fn sample(scheme: &InitScheme, n_in: usize, n_out: usize, seed: u64) -> Result<Self> {
        let mut rng = StreamRng::seed_from_u64(seed);
        let mut layer = sample_layer(scheme, n_in, n_out, &mut rng)?;
        layer.seed = seed;
        Ok(layer)
    }

    /// Builds a layer from explicit parameters (tests, hand-set networks).
    pub fn from_parts(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::Shape(format!("{} weight rows but {} biases", weights.nrows(), bias.len())));
        }
        Ok(Self { weights, bias, scheme: InitScheme::he(), seed: 0, substituted: Vec::new() })
    }

    pub fn n_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|x| x.is_finite())
    }

    /// Row-major CSV: one line per node with `n_in` weights followed by the bias.
    ///
    /// Header lines start with `#`:
    /// ```text
    /// # relu-corr layer weights v1
    /// # scheme={...json...}
    /// # seed=<u64> n_out=<rows> n_in=<cols>
    /// # columns: w_0..w_{n_in-1},bias
    /// ```
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("# relu-corr layer weights v1\n");
        out.push_str(&format!("# scheme={}\n", serde_json::to_string(&self.scheme)?));
        out.push_str(&format!("# seed={} n_out={} n_in={}\n", self.seed, self.n_out(), self.n_in()));
        out.push_str("# columns: w_0..w_{n_in-1},bias\n");
        for (row, b) in self.weights.rows().into_iter().zip(self.bias.iter()) {
            let mut fields: Vec<String> = row.iter().map(|x| crate::report::fmt_f64(*x)).collect();
            fields.push(crate::report::fmt_f64(*b));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Little-endian binary dump: magic `RCLW`, `u32` version 1, `u64` n_out,
    /// `u64` n_in, `u64` seed, then `n_out * (n_in + 1)` `f64` values, row-major,
    /// each row being the weights followed by the bias.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(32 + 8 * self.n_out() * (self.n_in() + 1));
        buf.extend_from_slice(b"RCLW");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&(self.n_out() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.n_in() as u64).to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        for (row, b) in self.weights.rows().into_iter().zip(self.bias.iter()) {
            for x in row.iter().chain(std::iter::once(b)) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Reads back a dump written by [`LayerWeights::write_binary`]. The scheme is
    /// not stored in the binary format and is reported as He.
    pub fn read_binary(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |what: &str| Error::Config(format!("{}: {what}", path.display()));
        if bytes.len() < 32 || &bytes[..4] != b"RCLW" {
            return Err(bad("not a layer dump"));
        }
        let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != 1 {
            return Err(bad("unsupported version"));
        }
        let (n_out, n_in, seed) = (u64_at(8) as usize, u64_at(16) as usize, u64_at(24));
        let body = &bytes[32..];
        if body.len() != 8 * n_out * (n_in + 1) {
            return Err(bad("truncated body"));
        }
        let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let augmented = Array2::from_shape_vec((n_out, n_in + 1), values).map_err(|e| bad(&e.to_string()))?;
        let mut layer =
            Self::from_parts(augmented.slice(ndarray::s![.., ..n_in]).to_owned(), augmented.column(n_in).to_owned())?;
        layer.seed = seed;
        Ok(layer)
    }
}

/// Samples one layer. Rows are drawn one after another from `rng`.
///
/// - He / correlated Gaussian: each row via [`sample_correlated_row`], bias i.i.d.
///   `N(0, sigma2_b)`.
/// - RAI: augmented rows of `n_in + 1` i.i.d. `N(0, sigma2_w/n_in)` entries.
/// - RAAI: augmented rows with covariance `(sigma2_w/n_in)(I - k/(1+k) J/(n_in+1))`.
///
/// For RAI and RAAI one uniformly chosen entry of each augmented row is then
/// replaced by a Beta(2, 1) draw and the last column becomes the bias.
/// `sigma2_b` is unused by these two families.
pub fn sample_layer<R: Rng + ?Sized>(
    scheme: &InitScheme,
    n_in: usize,
    n_out: usize,
    rng: &mut R,
) -> Result<LayerWeights> {
    scheme.validate()?;
    if n_in == 0 || n_out == 0 {
        return Err(Error::invalid("layer shape", format!("got {n_out} x {n_in}")));
    }
    let scale = (scheme.sigma2_w / n_in as f64).sqrt();
    let beta = rank_one_shift(scheme.k);
    match scheme.family {
        InitFamily::He | InitFamily::CorrelatedGaussian => {
            let mut weights = Array2::zeros((n_out, n_in));
            for mut row in weights.rows_mut() {
                fill_correlated(row.as_slice_mut().expect("standard layout"), scale, beta, rng);
            }
            let sd_b = scheme.sigma2_b.sqrt();
            let bias = Array1::from_shape_fn(n_out, |_| sd_b * rng.sample::<f64, _>(StandardNormal));
            Ok(LayerWeights { weights, bias, scheme: *scheme, seed: 0, substituted: Vec::new() })
        }
        InitFamily::Rai | InitFamily::Raai => {
            let row_beta = if scheme.family == InitFamily::Raai { beta } else { 0.0 };
            let mut augmented = Array2::zeros((n_out, n_in + 1));
            let mut substituted = Vec::new();
            for mut row in augmented.rows_mut() {
                let row = row.as_slice_mut().expect("standard layout");
                fill_correlated(row, scale, row_beta, rng);
                if scheme.beta_substitution {
                    let idx = rng.random_range(0..=n_in);
                    row[idx] = sample_beta21(rng);
                    substituted.push(idx);
                }
            }
            Ok(LayerWeights {
                weights: augmented.slice(ndarray::s![.., ..n_in]).to_owned(),
                bias: augmented.column(n_in).to_owned(),
                scheme: *scheme,
                seed: 0,
                substituted,
            })
        }
    }
}

/// Analytic covariance of the Gaussian part of one row's first `n_in` entries.
pub fn analytic_row_covariance(scheme: &InitScheme, n_in: usize) -> Array2<f64> {
    let (variance, divisor) = match scheme.family {
        InitFamily::He | InitFamily::CorrelatedGaussian => (scheme.sigma2_w / n_in as f64, n_in),
        InitFamily::Rai => (scheme.sigma2_w / n_in as f64, n_in + 1),
        InitFamily::Raai => (scheme.sigma2_w / n_in as f64, n_in + 1),
    };
    let kappa = match scheme.family {
        InitFamily::Rai => 0.0,
        _ => scheme.kappa(),
    };
    let off = -variance * kappa / divisor as f64;
    Array2::from_shape_fn((n_in, n_in), |(i, j)| if i == j { variance + off } else { off })
}

/// Sample covariance (divisor `n_samples - 1`) of the Gaussian part of rows
/// drawn from `scheme`, restricted to the `n_in` weight entries.
pub fn empirical_row_covariance<R: Rng + ?Sized>(
    scheme: &InitScheme,
    n_in: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    scheme.validate()?;
    if n_in == 0 {
        return Err(Error::invalid("n_in", "must be at least 1"));
    }
    if n_samples < 1000 {
        return Err(Error::invalid("n_samples", format!("need at least 1000, got {n_samples}")));
    }
    let gaussian_only = scheme.without_beta_substitution();
    let (dim, beta) = match scheme.family {
        InitFamily::He | InitFamily::CorrelatedGaussian => (n_in, rank_one_shift(scheme.k)),
        InitFamily::Rai => (n_in + 1, 0.0),
        InitFamily::Raai => (n_in + 1, rank_one_shift(scheme.k)),
    };
    debug_assert!(!gaussian_only.has_beta_entry());
    let scale = (scheme.sigma2_w / n_in as f64).sqrt();
    let mut samples = Array2::<f64>::zeros((n_samples, n_in));
    let mut row = vec![0.0; dim];
    for mut target in samples.rows_mut() {
        fill_correlated(&mut row, scale, beta, rng);
        target.assign(&ndarray::ArrayView1::from(&row[..n_in]));
    }
    let mean = samples.mean_axis(ndarray::Axis(0)).expect("non-empty");
    samples -= &mean;
    let cov = samples.t().dot(&samples) / (n_samples as f64 - 1.0);
    Ok(cov)
}
