//! Forward and backward primitives shared by the attention module and the
//! backbone.

pub mod activation;
pub mod conv;
pub mod dropout;
pub mod gradcheck;
pub mod norm;
pub mod pool;
pub mod upsample;

pub use activation::{activate, activate_backward, sigmoid, Activation};
pub use conv::{conv_out_extent, Conv3d, Conv3dGrads};
pub use dropout::{dropout3d, dropout3d_backward, DropoutMask};
pub use gradcheck::{gradcheck, GradCase, GradReport, GradcheckOptions};
pub use norm::{BatchNorm, BatchNormCache, BatchNormGrads};
pub use pool::{maxpool3d, maxpool3d_backward, PoolIndices};
pub use upsample::{
    upsample_bilinear_spatial, upsample_bilinear_spatial_backward, upsample_temporal,
    upsample_temporal_backward, upsample_to, upsample_to_backward,
};

use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and active dropout; `seed` drives the dropout masks.
    Train { seed: u64 },
    Eval,
}

impl Mode {
    pub const fn train(seed: u64) -> Self {
        Mode::Train { seed }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }

    /// Independent sub-mode for layer `index`.
    pub fn derive(&self, index: u64) -> Self {
        match *self {
            Mode::Train { seed } => Mode::Train { seed: rng::mix(seed, index) },
            Mode::Eval => Mode::Eval,
        }
    }
}
