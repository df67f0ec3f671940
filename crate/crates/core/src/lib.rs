//! Core library for training-free-to-merge LoRA mixtures on weight-entangled
//! vision transformer supernets: tensor autograd tape, elastic ViT forward,
//! expert banks with an architecture-conditioned router, evolutionary subnet
//! search, feature-similarity probes, and a binary checkpoint container.

pub mod ckpt;
pub mod data;
pub mod evo;
pub mod gradcheck;
pub mod mole;
pub mod probe;
pub mod router;
pub mod space;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vit;

pub use ckpt::CkptError;
pub use data::Dataset;
pub use evo::{Candidate, ResourceConstraints, SearchConfig};
pub use mole::{ExpertBank, ExpertMixture, MolePath};
pub use router::{Router, RouterConfig, RoutingAttribute};
pub use space::{Grouping, MlpRatio, SearchSpace, SubnetConfig};
pub use tensor::Tensor;
pub use train::TrainConfig;
pub use vit::SupernetWeights;
