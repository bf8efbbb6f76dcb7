//! Minimal neural-network toolkit: a differentiable graph, layers and
//! optimizers sufficient for the three GAN families.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;

pub use graph::{Graph, Var};
pub use layers::{dropout, gumbel_softmax, BatchNorm, LayerNorm, Linear, Mlp, MlpTrace, Mode};
pub use optim::{Adam, Optimizer, PlateauScheduler, RmsProp};
pub use params::{l2_term, ParamSet};

/// Seeded generator used for every stochastic choice in the crate.
pub type SynthRng = rand_chacha::ChaCha8Rng;
