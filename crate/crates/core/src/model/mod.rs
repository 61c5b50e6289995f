//! Classifiers, aligners and discriminators built on the autograd engine.

pub mod aligner;
pub mod checkpoint;
pub mod classifier;
pub mod discriminator;
pub mod layers;

pub use aligner::{Aligner, Direction, DEFAULT_ALIGNER_WIDTH};
pub use classifier::{Arch, Classifier};
pub use discriminator::{DiscOutput, Discriminator, DEFAULT_DISCRIMINATOR_WIDTH};
pub use layers::{copy_state, Module, Snapshot};
