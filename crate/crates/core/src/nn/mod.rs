//! The derivative network, its optimizer and checkpoint format.

mod adam;
mod checkpoint;
mod mlp;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, LayerParams, TrainingMeta, FORMAT_VERSION};
pub use mlp::{
    mlp_forward, mlp_grad_input, mlp_grad_params, mlp_init, smoothness_grad_params, Activation, Gradient,
    MlpArch, MlpModel, Trace, MAX_HIDDEN_LAYERS, MAX_HIDDEN_SIZE,
};
pub(crate) use mlp::check_env_indices;
