//! The echo-cancellation network.

mod checkpoint;
mod config;
mod forward;
mod params;
mod stream;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{receptive_field, Fusion, ModelConfig, ReceptiveField};
pub use forward::{
    canceller_step, conv_path_features, decode, encode, extractor_forward, forward_full,
    forward_graph, CancellerState, CancellerStep, ForwardGraph, ForwardOutput,
};
pub use params::ModelParams;
pub use stream::{BlockState, StreamState, StreamingAec};
