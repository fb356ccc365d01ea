//! A byte-scale decoder-only language model whose feed-forward neurons route
//! among four candidate activations, with the training pipeline and routing
//! diagnostics around it.

pub mod analysis;
pub mod layers;
pub mod model;
pub mod pipeline;
pub mod polyglu;
pub mod seeds;
pub mod tensor;
