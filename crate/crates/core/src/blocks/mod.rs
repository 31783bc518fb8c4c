//! Macro block designs, the four-stage backbone and its cost accounting.

mod block;
mod cost;
mod layers;
mod model;

pub use block::{block_forward, Block, BlockSpec, Mlp, BRANCH_CONV_KERNEL};
pub use cost::{
    block_flops, block_params, count_costs, mila_block_closed_form, transformer_block_closed_form, CostReport, FlopTerms,
    Residual, StageCost, COST_SCHEMA_VERSION, FLOP_CONVENTION,
};
pub use layers::{conv_output_grid, Activation, Conv2d, LayerNorm, Linear, Parameterized, NORM_EPS};
pub use model::{
    build_model, BlockTemplate, Downsample, Model, ModelSpec, Reference, Stage, StageSpec, Stem, IMAGE_CHANNELS,
    MODEL_NAMES, MODEL_SCHEMA_VERSION, TOTAL_STRIDE,
};
