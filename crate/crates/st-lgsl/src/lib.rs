//! Spatio-temporal traffic forecasting with latent graph structure learning.
//!
//! The library learns *which* sensors influence each other instead of relying
//! on a hand-built road graph: a small MLP embeds each node's history, a
//! sparse kNN graph is assembled from pairwise cosine similarities, and a
//! stack of gated temporal convolutions interleaved with diffusion graph
//! convolutions predicts the next `T_out` steps for every node at once.
//! Multi-step training follows a curriculum that starts with the 1-step loss
//! and widens the supervised horizon as iterations accumulate.
//!
//! Everything runs on a small define-by-run autodiff engine ([`tensor`])
//! written for this crate — single-threaded, deterministic, generic over
//! `f32`/`f64` — so results are bit-reproducible given a seed.
//!
//! Start with the `examples/` directory: each example is a runnable tour of
//! one capability (synthetic data, graph initialization, training, metrics,
//! gradient checking, graph export). The same functionality is scripted
//! through the `st-lgsl` binary.

pub mod cli;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
