//! MER-GCN: micro-expression recognition from AU-annotated face sequences.
//!
//! A 3D residual backbone turns a frame sequence into one feature vector; a
//! stacked graph convolution over the action-unit co-occurrence graph embeds
//! each AU node; dot-product fusion scores every AU against the sequence
//! feature, and a fully-connected head maps those scores to emotion classes.
//! Everything runs on a self-contained f64 tape with reverse-mode autodiff,
//! so the whole model is gradient-checkable against finite differences.

pub mod backbone;
pub mod cli;
pub mod conv;
pub mod data;
pub mod eval;
pub mod graph;
pub mod io;
mod linalg;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;
