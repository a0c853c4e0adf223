//! The DynaMixer operation, block, layer and full classifier.

mod block;
mod model;
mod op;
pub mod weights;

pub use block::{dynamixer_block, mix_cols, mix_rows, reweight};
pub use model::{
    drop_path, embed_stage, mixer_layer, mixing_matrix, model_forward, model_grad_check, model_grad_check_coords,
    patchify, Direction, Mode, Model, LAYER_NORM_EPS, PREDICT_CHUNK,
};
pub use op::{dynamixer_op, generate_mixing_matrices};
pub use weights::{
    build_model, model_layout, BlockWeights, DynaMixerOpWeights, LayerWeights, Leaf, MixGenerator, ModelWeights,
    ParamSpec, Params,
};
