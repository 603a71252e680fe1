//! The network: configuration, parameters, forward passes and loss.

mod config;
mod loss;
mod network;
mod params;

pub use config::{receptive_field, receptive_field_of, required_depth, FusionMode, GgpfnConfig, RfLayer};
pub use loss::{global_loss, patch_loss, total_loss, GlobalTargets, PatchTargets};
pub use network::{
    build_model, decoder_forward, encode, encoder_forward, forward_patch, global_forward, global_heads,
    multiscale_heads, one_off_encoder_forward, param_specs, subpixel_coords, subpixel_gather, EncoderPyramid,
    GlobalFeatures, ParamSpec, PatchOutputs, PatchWindow, GLOBAL_STAGE_CONVS,
};
pub use params::{BoundParams, Checkpoint, Param, ParamGroup, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
