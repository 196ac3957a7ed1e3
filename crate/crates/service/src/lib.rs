//! Operational shell around the forecasting engine: cache client, the
//! pull/convert/predict/push loop, a read-only HTTP API, heatmap rendering,
//! and the command-line interface.

pub mod cli;
pub mod heatmap;
pub mod http;
pub mod kv;
pub mod pipeline;
