//! Latent priors and their deterministic samplers.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LatentKind {
    StandardNormal,
    Zeros,
    Ones,
    /// Uniform on `[0, 1)`.
    Uniform01,
}

impl LatentKind {
    pub const ALL: [LatentKind; 4] = [
        LatentKind::StandardNormal,
        LatentKind::Zeros,
        LatentKind::Ones,
        LatentKind::Uniform01,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LatentKind::StandardNormal => "normal",
            LatentKind::Zeros => "zeros",
            LatentKind::Ones => "ones",
            LatentKind::Uniform01 => "uniform",
        }
    }
}

impl fmt::Display for LatentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown latent kind {0:?} (expected normal, zeros, ones or uniform)")]
pub struct ParseLatentError(pub String);

impl FromStr for LatentKind {
    type Err = ParseLatentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LatentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ParseLatentError(s.to_string()))
    }
}

/// Prior over latent images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentSpec {
    pub kind: LatentKind,
    pub seed: u64,
}

impl LatentSpec {
    pub fn new(kind: LatentKind, seed: u64) -> Self {
        LatentSpec { kind, seed }
    }
}

/// Draws a latent tensor of `shape`.
///
/// Each draw uses a ChaCha8 generator keyed by `spec.seed` on stream
/// `draw_index`; normal variates come from the ziggurat sampler of
/// `rand_distr`. The result depends only on `(seed, draw_index, shape)`.
pub fn sample_latent<T: Scalar>(spec: &LatentSpec, shape: &[usize], draw_index: u64) -> Tensor<T> {
    match spec.kind {
        LatentKind::Zeros => Tensor::zeros(shape),
        LatentKind::Ones => Tensor::ones(shape),
        LatentKind::StandardNormal => {
            let mut rng = stream_rng(spec.seed, draw_index);
            Tensor::from_fn(shape, |_| T::of(rng.sample::<f64, _>(StandardNormal)))
        }
        LatentKind::Uniform01 => {
            let mut rng = stream_rng(spec.seed, draw_index);
            Tensor::from_fn(shape, |_| T::of(rng.random::<f64>()))
        }
    }
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
