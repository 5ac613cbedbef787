//! Minimal neural-network building blocks on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names; layers hold
//! cheap clones of the underlying [`Var`]s. Buffers (batch-norm running
//! statistics) are stored alongside but never handed to an optimizer.

mod conv;
mod layers;
mod norm;
mod optim;
mod params;

pub use conv::conv2d;
pub use norm::{channel_stats, standardize, Groups};
pub use layers::{reflection_pad2d, BatchNorm2d, Conv2d, InstanceNorm2d, Linear, Mode, Padding};
pub use optim::{Direction, Sgd, SgdConfig};
pub use params::ParamStore;
