//! Citywide crowd-flow forecasting: trajectory aggregation, a convolutional
//! residual forecasting model with reverse-mode autodiff, training, serving
//! primitives and evaluation baselines.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod external;
pub mod forecast;
pub mod grid;
pub mod io;
pub mod model;
pub mod norm;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
