//! Minimal reverse-mode autodiff for small networks: a tensor tape, MLP and
//! LSTM layers, Adam, and a manifest-plus-blob checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, load_checkpoint_like, save_checkpoint};
pub use error::{NnError, Result};
pub use layers::{lstm_forward, mlp_forward, Activation, LstmSpec, MlpSpec};
pub use params::ParamSet;
pub use tape::{softplus, tanh, Bound, Gradients, Tape, Var};
pub use tensor::Tensor;
