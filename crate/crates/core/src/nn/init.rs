use ndarray::IxDyn;
use rand::Rng;

use super::graph::Arr;

/// Initialization family for one tensor.
#[derive(Debug, Clone, Copy)]
pub enum WeightInit {
    /// He/Kaiming uniform over `fan_in`, the default for conv and hidden
    /// affine weights feeding rectifier-like activations.
    HeUniform { fan_in: usize },
    /// Glorot uniform, used for output heads.
    GlorotUniform { fan_in: usize, fan_out: usize },
    Zeros,
}

pub fn he_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Arr {
    uniform_init(rng, shape, (6.0 / fan_in as f64).sqrt())
}

pub fn uniform_init(rng: &mut impl Rng, shape: &[usize], limit: f64) -> Arr {
    Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-limit..limit))
}

impl WeightInit {
    pub fn sample(self, rng: &mut impl Rng, shape: &[usize]) -> Arr {
        match self {
            WeightInit::HeUniform { fan_in } => he_uniform(rng, shape, fan_in),
            WeightInit::GlorotUniform { fan_in, fan_out } => {
                uniform_init(rng, shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
            }
            WeightInit::Zeros => Arr::zeros(IxDyn(shape)),
        }
    }
}
