//! Attention-style explanations for tabular black-box models.
//!
//! A bank of one-feature subnets maps every input feature to a handful of
//! basis functions. Per batch, a least-squares solve weights those columns
//! (plus optional pairwise products and a bias) to match the black box, and
//! the subnets are trained through that solve. The weighted basis functions
//! become per-feature shape curves and per-pair heatmaps.

pub mod autodiff;
pub mod basis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod explain;
pub mod io;
pub mod linalg;
pub mod nn;
pub mod oracle;
pub mod plot;
pub mod tensor;
pub mod trainer;
pub mod weighting;

pub use tensor::Tensor;
