//! Online continual self-supervised learning on vector streams under a fixed
//! budget of backward passes.

pub mod alignment;
pub mod autodiff;
pub mod budget;
pub mod error;
pub mod evaluation;
pub mod networks;
pub mod par;
pub mod replay;
pub mod rng;
pub mod runner;
pub mod ssl;
pub mod strategies;
pub mod stream;

pub use error::{Error, Result};
