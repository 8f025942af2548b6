use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::tensor::{Scalar, Tensor};

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// `N(0, 1/fan_in)`, the SELU prescription.
    LecunNormal,
    /// `N(0, 2/fan_in)` for RELU stacks.
    HeNormal,
}

impl InitScheme {
    pub fn std(self, fan_in: usize) -> f64 {
        match self {
            InitScheme::LecunNormal => (1.0 / fan_in as f64).sqrt(),
            InitScheme::HeNormal => (2.0 / fan_in as f64).sqrt(),
        }
    }

    pub fn for_activation(act: Activation) -> Self {
        match act {
            Activation::Selu => InitScheme::LecunNormal,
            Activation::Relu => InitScheme::HeNormal,
        }
    }
}

/// Zero-mean normal draws scaled by the scheme's standard deviation.
/// Values are drawn in `f64` and then rounded, so both precisions see the
/// same initialization.
pub fn init_weights<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    scheme: InitScheme,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::InvalidArgument("fan_in must be >= 1".into()));
    }
    let std = scheme.std(fan_in);
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::from_f64(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn init_weights_seeded<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    scheme: InitScheme,
    seed: u64,
) -> Result<Tensor<T>> {
    init_weights(shape, fan_in, scheme, &mut ChaCha8Rng::seed_from_u64(seed))
}
