//! Airport delay forecasting with multi-scale Granger causality graphs, a
//! learned graph correction, and a graph-convolutional recurrent
//! encoder-decoder.

pub mod autodiff;
pub mod granger;
pub mod ingest;
pub mod model;
pub mod synth;
pub mod trainer;
