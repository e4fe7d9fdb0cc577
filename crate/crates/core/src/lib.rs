pub mod baselines;
pub mod dropout;
pub mod envs;
pub mod error;
pub mod experiment;
pub mod ir;
pub mod model;
pub mod reward;
pub mod selector;
pub mod substrate;

pub use error::{Error, Result};
pub use selector::{ClutchSelector, Selector};
