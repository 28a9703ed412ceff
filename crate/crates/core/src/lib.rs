//! Cooperative generative hashing.
//!
//! A class-conditional contrastive pair generator and a multi-headed
//! energy-based descriptor are trained jointly: the generator seeds short-run
//! Langevin chains under the descriptor's energy head, the revised samples
//! train the generator through the descriptor's inference head, and the
//! descriptor's hash head learns from real-synthetic triplets. The binary hash
//! function is `sign` of the hash head, searched with a packed Hamming index.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod frechet;
pub mod losses;
pub mod mcmc;
pub mod nets;
pub mod optim;
pub mod retrieval;
pub mod rng;
pub mod training;
pub mod types;

pub use config::TrainConfig;
pub use error::{Error, Result};
pub use nets::{Descriptor, Generator, Real};
pub use types::{DescriptorOutput, HashCode, LabeledImage, LatentCode};
