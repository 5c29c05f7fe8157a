//! The noise-prediction network and the signals that condition it.

pub mod gradcheck;
pub mod graph;
pub mod guidance;
pub mod tensor;
pub mod unet;

pub use gradcheck::{check_gradients, GroupCheck, GRADIENT_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use guidance::{drop_condition, GuidanceKind, GuidanceSignal, SpatialGuidance};
pub use tensor::Tensor;
pub use unet::{norm_groups, timestep_sinusoid, DenoiserConfig, UNet, IMAGE_CHANNELS, TIME_EMBED_DIM, TIME_SINUSOID_DIM};
