//! Network construction, training primitives and persistence.

pub mod checkpoint;
mod config;
mod network;
mod newbob;

pub use config::{
    ModelConfig, StackKind, Toggle, CONTEXT_FRAMES, DEFAULT_CNN_WIDTHS, DEFAULT_DNN_WIDTH, DEFAULT_STAGE_BLOCKS,
    FEATURE_DIM, STACKED_DIM,
};
pub use network::{
    ActLayer, ActivationTap, Census, Flatten, Gradients, Layer, Network, OpCensus, ParamInfo, ParamKind, Residual,
    Unit, BN_ADDS_PER_ELEMENT, BN_MULTIPLIES_PER_ELEMENT,
};
pub use newbob::{newbob_schedule, newbob_with, Newbob, NewbobDecision, NewbobParams};
