//! Teacher networks and the datasets they label.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Mlp};
use crate::error::Result;
use crate::initkit::InitScheme;

/// Width of the simple teacher's single hidden layer.
pub const SIMPLE_TEACHER_WIDTH: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherSpec {
    /// ReLU network of the student's shape, He initialized.
    Standard,
    /// ReLU network with one hidden layer of 10 nodes, He initialized.
    Simple,
    /// Tanh network of the student's shape at `(sigma2_w, sigma2_b) = (1.5, 0)`.
    Complex,
}

impl TeacherSpec {
    pub fn scheme(&self) -> InitScheme {
        match self {
            TeacherSpec::Standard | TeacherSpec::Simple => InitScheme::he(),
            TeacherSpec::Complex => InitScheme::he().with_sigma2_w(1.5),
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            TeacherSpec::Complex => Activation::Tanh,
            _ => Activation::Relu,
        }
    }

    /// Instantiates the teacher for a student with `hidden` layers of `width` nodes.
    pub fn build<R: Rng + ?Sized>(&self, input_dim: usize, width: usize, hidden: usize, rng: &mut R) -> Result<Mlp> {
        let (width, hidden) = match self {
            TeacherSpec::Simple => (SIMPLE_TEACHER_WIDTH, 1),
            _ => (width, hidden),
        };
        Mlp::init(&self.scheme(), input_dim, width, hidden, self.activation(), rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `n` standard normal inputs labelled by `teacher`.
pub fn make_dataset<R: Rng + ?Sized>(teacher: &Mlp, n: usize, rng: &mut R) -> Result<Dataset> {
    let inputs = Array2::from_shape_simple_fn((n, teacher.input_dim()), || rng.sample(StandardNormal));
    let targets = teacher.predict(&inputs)?;
    Ok(Dataset { inputs, targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn same_seed_same_data() {
        let t = TeacherSpec::Standard.build(8, 8, 3, &mut stream(1, &[])).unwrap();
        let a = make_dataset(&t, 20, &mut stream(2, &[])).unwrap();
        let b = make_dataset(&t, 20, &mut stream(2, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn simple_teacher_shape() {
        let t = TeacherSpec::Simple.build(16, 64, 10, &mut stream(1, &[])).unwrap();
        assert_eq!(t.layers.len(), 2);
        assert_eq!(t.layers[0].n_out(), SIMPLE_TEACHER_WIDTH);
        assert_eq!(t.activation, Activation::Relu);
    }

    #[test]
    fn complex_targets_bounded_by_readout_norm() {
        let t = TeacherSpec::Complex.build(12, 12, 4, &mut stream(3, &[])).unwrap();
        assert_eq!(t.activation, Activation::Tanh);
        let readout = t.layers.last().unwrap();
        let bound = readout.weights.iter().map(|w| w.abs()).sum::<f64>() + readout.bias[0].abs();
        let d = make_dataset(&t, 200, &mut stream(4, &[])).unwrap();
        assert!(d.targets.iter().all(|y| y.abs() < bound));
    }
}
