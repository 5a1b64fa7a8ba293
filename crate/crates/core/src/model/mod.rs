//! The toy vision-language model: a patch transformer encoder, an affine
//! projector and a causal transformer decoder over `[vision ‖ text]`.

mod block;
mod checkpoint;
mod config;
mod forward;
mod hooks;
mod params;
mod train;

pub use checkpoint::{
    checkpoint_hash, decode_vtim, encode_vtim, read_vtim, write_vtim, VTIM_MAGIC, VTIM_VERSION,
};
pub use config::ModelConfig;
pub use forward::{
    argmax, DecoderSession, DecoderTrace, Generation, GenerationTrace, StepTrace, ToyLvlm,
    VisionTrace,
};
pub use hooks::{Hook, HookSet, HookSite, Positions};
pub use params::{ParamEntry, ParamLayout, Params, INIT_STD};
pub use train::{
    accumulate_gradient, example_loss, loss_and_gradient, train, train_from, Segment,
    TrainExample, TrainOptions, TrainOutcome,
};
