//! Graph message passing with direct cross-attention (DCA) and polarized
//! direct cross-attention (PolaDCA) for multichannel signal classification,
//! plus the tooling to train, run and stress-test it.
//!
//! Module map:
//! - [`numkit`]: tensors, reverse-mode tape, gradient checking, checkpoints
//! - [`graphio`]: windowing, normalization, kNN graphs, noise, datasets
//! - [`mplayers`]: message-passing layers and the FLOP model
//! - [`trainer`]: model assembly, loss, Adam, training loop, metrics
//! - [`diagnose`]: sliding-window online inference
//! - [`robustlab`]: perturbation experiments and Lipschitz bound checks

pub mod diagnose;
pub mod graphio;
pub mod mplayers;
pub mod numkit;
pub mod robustlab;
pub mod trainer;
