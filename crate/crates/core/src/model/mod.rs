//! ViT encoder used for both teacher and student.

mod checkpoint;
mod config;
mod forward;
mod weights;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::ModelConfig;
pub use forward::{patchify, EncoderOutput, ForwardTrace, LN_EPS};
pub use weights::{param_count, LayerWeights, ModelWeights, INIT_STD};

pub(crate) use weights::TruncatedNormal;

use crate::error::Result;
use crate::real::Real;

/// Builds freshly initialized weights for `config`.
pub fn init_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelWeights<T>> {
    ModelWeights::init(config, seed)
}
