//! Synthesis of tabular insurance data with three GAN families and
//! evaluation of the synthetic data against the original.

pub mod accountant;
pub mod codec;
pub mod ctgan;
pub mod error;
pub mod eval;
pub mod mc_wgan;
pub mod mncdp;
pub mod nn;
pub mod schema;
pub mod standin;
pub mod table;
pub mod toy;
pub mod wgan;

pub use error::{Error, Result};
