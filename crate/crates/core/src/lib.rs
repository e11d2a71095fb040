//! Context-aware neuron mining and neuron-guided instruction tuning on a
//! micro decoder-only language model.

pub mod attribution;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod mask;
pub mod model;
pub mod neuron;
pub mod params;
pub mod tensor;
pub mod text;
pub mod tuning;

pub use error::{NritError, Result};
pub use mask::{GradientMask, Selection, UpdateMask};
pub use neuron::{Group, NeuronId, NeuronSets};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
