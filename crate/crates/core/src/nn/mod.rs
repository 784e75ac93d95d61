//! A small CPU neural-network engine: convolutional feature extractors with
//! a linear head, exact backprop to both parameters and input pixels.

mod arch;
mod layers;
mod network;
mod train;

pub use arch::Architecture;
pub use layers::{OpSpec, Shape3};
pub use network::{softmax, ArchSpec, FeatureTape, Network, Normalization};
pub use train::{train, TrainConfig, TrainLog};
