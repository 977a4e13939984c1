//! Desk-scale laboratory for studying whether explanation robustness and
//! classification robustness can be decoupled: adversarial training regimes
//! (Normal / MAT / TRADES / SEP), gradient-based saliency methods and a
//! targeted explanation-manipulation attack, cluster-based robustness
//! evaluation, and input loss-landscape probing.

pub mod attack;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod landscape;
pub mod nn;
pub mod seeds;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
