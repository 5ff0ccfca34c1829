//! Network construction, initialization, weight transfer and checkpoints.

pub mod arch;
pub mod checkpoint;
pub mod init;
pub mod transfer;
pub mod weights;

pub use arch::{
    apply_bn_updates, build_byol_heads, build_encoder, build_unet, mlp_forward, unet_forward, unet_logits,
    DecoderConfig, EncoderConfig, EncoderVariant, ForwardCtx, HeadConfig,
};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use init::{kaiming_bound, kaiming_uniform_init};
pub use transfer::{adapt_input_layer, transfer_encoder_weights};
pub use weights::{cast_params, is_buffer, is_trainable, params_bit_equal, NetworkWeights, Params, WeightsMeta};

/// Momentum of batch-norm running statistics updates.
pub const BN_MOMENTUM: f64 = 0.1;
