//! Neural-network primitives with forward and backward passes.

mod conv;
mod head;
mod norm;

pub use conv::{conv3d, conv_3d, conv_framewise_2d, conv_temporal_1d, ConvKernel, ConvKind};
pub use head::{global_avg_pool, linear, softmax_cross_entropy, softmax_rows, LinearHead};
pub use norm::{
    batch_norm_eval, batch_norm_train, layer_norm, BatchNorm, BatchStats, LayerNorm, BN_EPS,
    BN_MOMENTUM, LN_EPS, RunningStats,
};

use serde::{Deserialize, Serialize};

/// Whether batch norm uses batch statistics (and updates running ones).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}
