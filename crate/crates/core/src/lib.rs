//! Signal propagation in deep ReLU networks with correlated weights.
//!
//! The crate is organised around the pieces of a small research workflow:
//!
//! - [`initkit`]: He, correlated-Gaussian (ACI), RAI and RAAI weight samplers.
//! - [`meanfield`]: closed-form length/correlation maps, fixed points and phase labels.
//! - [`quadrature`]: stability coefficients of the asymmetric (beta-substituted) schemes
//!   and the critical variances derived from them.
//! - [`mcprop`]: Monte Carlo propagation of signal ensembles through random networks.
//! - [`trainer`]: a from-scratch MLP with SGD/Adam for teacher-student comparisons.
//! - [`report`] and [`cli`]: CSV/JSON emission, run manifests and the command line.
//!
//! All randomness flows through [`rng::stream`], so results depend only on the global
//! seed and never on thread scheduling.

pub mod cli;
pub mod error;
pub mod initkit;
pub mod mcprop;
pub mod meanfield;
pub mod quadrature;
pub mod report;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use initkit::{InitFamily, InitScheme, LayerWeights};
pub use mcprop::{LayerStatsCurve, PropagationConfig};
pub use meanfield::{MapParams, MapState, PhaseLabel};
pub use quadrature::{Approximation, QuadratureGrid};
