//! Strong lottery tickets in convolutional and residual networks.
//!
//! Given a target network, the crate plans a larger random source network,
//! samples it, and computes a binary mask whose surviving parameters
//! approximate the target. Every masked-in parameter keeps its original
//! random value; target weights are recovered as sums of random products
//! chosen by subset-sum search.

pub mod activation;
pub mod cli;
pub mod construction;
pub mod error;
pub mod network;
pub mod subset_sum;
pub mod tensor;
pub mod verification;

pub use activation::{Activation, Linearization};
pub use error::{Error, Result};
pub use network::{apply_mask, count_nonzero, Mask, NetworkSpec};
pub use tensor::{ChannelTensor, Filter, SkipKind, SkipOperator};
