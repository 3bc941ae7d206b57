//! Differentiation substrate: tensors, parameter store, tape, small MLPs,
//! Adam, the frozen image encoder and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod mlp;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig, Moments};
pub use checkpoint::Checkpoint;
pub use conv::{ConvEncoder, FeatureMap};
pub use mlp::{Activation, Mlp};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{LeafGrads, RefGroup, RefView, Tape, Trainable, Var};
pub use tensor::Tensor;
