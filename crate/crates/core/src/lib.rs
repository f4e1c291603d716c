//! Mixture-of-experts adapter transformer for sequential recommendation.

pub mod attention;
pub mod bosearch;
pub mod cf;
pub mod corpus;
pub mod evalharness;
pub mod model;
mod error;
pub mod numerics;
pub mod objectives;
pub mod train;

pub use error::{Error, Result};

/// Double-precision aliases used by the model and training code.
pub type Tensor = numerics::Tensor2D<f64>;
pub type Params = numerics::ParamStore<f64>;
pub type Gradients = numerics::Grads<f64>;
