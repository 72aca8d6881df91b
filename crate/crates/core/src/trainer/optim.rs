//! Plain SGD and Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::mlp::{Gradients, Mlp};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        OptimizerConfig::Sgd { lr: 0.01 }
    }

    pub fn adam() -> Self {
        OptimizerConfig::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-7 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerConfig::Sgd { .. } => "sgd",
            OptimizerConfig::Adam { .. } => "adam",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr } => lr > 0.0 && lr.is_finite(),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr > 0.0 && lr.is_finite() && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("optimizer", format!("bad hyperparameters {self:?}")))
        }
    }
}

pub fn step_sgd(params: &mut [f64], grads: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

/// First and second moment estimates and the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One Adam update of a flat parameter slice; `t` is the 1-based step count.
pub fn step_adam(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, hyper: (f64, f64, f64, f64)) {
    let (lr, b1, b2, eps) = hyper;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
    }
}

/// Optimizer bound to one network's parameter layout.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    adam: Option<AdamState>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, net: &Mlp) -> Result<Self> {
        config.validate()?;
        let adam = matches!(config, OptimizerConfig::Adam { .. }).then(|| AdamState::new(net.n_params()));
        Ok(Self { config, adam })
    }

    /// Applies one update. Returns false if any parameter became non-finite.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> bool {
        let mut offset = 0;
        if let Some(state) = self.adam.as_mut() {
            state.t += 1;
        }
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let parts = [
                (
                    layer.weights.as_slice_mut().expect("standard layout"),
                    grads.weights[l].as_slice().expect("standard layout"),
                ),
                (layer.bias.as_slice_mut().expect("contiguous"), grads.bias[l].as_slice().expect("contiguous")),
            ];
            for (p, g) in parts {
                let n = p.len();
                match (self.config, self.adam.as_mut()) {
                    (OptimizerConfig::Sgd { lr }, _) => step_sgd(p, g, lr),
                    (OptimizerConfig::Adam { lr, beta1, beta2, eps }, Some(s)) => step_adam(
                        p,
                        g,
                        &mut s.m[offset..offset + n],
                        &mut s.v[offset..offset + n],
                        s.t,
                        (lr, beta1, beta2, eps),
                    ),
                    (OptimizerConfig::Adam { .. }, None) => unreachable!("adam state created in new"),
                }
                offset += n;
            }
        }
        net.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_example() {
        let mut p = [0.0];
        step_sgd(&mut p, &[1.0], 0.1);
        assert_eq!(p, [-0.1]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        for g in [3.0, -0.02, 1e3] {
            let mut p = [1.0];
            let (mut m, mut v) = ([0.0], [0.0]);
            step_adam(&mut p, &[g], &mut m, &mut v, 1, (1e-3, 0.9, 0.999, 1e-7));
            assert!((p[0] - (1.0 - 1e-3 * f64::signum(g))).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_zero_gradient_never_moves() {
        let mut p = [0.7, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        for t in 1..=1000 {
            step_adam(&mut p, &[0.0, 0.0], &mut m, &mut v, t, (1e-3, 0.9, 0.999, 1e-7));
        }
        assert_eq!(p, [0.7, -2.0]);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(OptimizerConfig::Sgd { lr: -1.0 }.validate().is_err());
        assert!(OptimizerConfig::Adam { lr: 1e-3, beta1: 1.0, beta2: 0.999, eps: 1e-7 }.validate().is_err());
        assert!(OptimizerConfig::adam().validate().is_ok());
    }
}
