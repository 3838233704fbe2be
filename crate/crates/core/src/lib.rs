//! Desk-scale simulator for federated contrastive representation learning.
//!
//! Clients train a small MLP encoder with a MoCo-style momentum branch and
//! memory bank. Each round they share encrypted features through a server,
//! which lets every client contrast against remote negatives (feature fusion)
//! and pull its local features towards their nearest fused neighbours
//! (neighborhood matching). The server averages models FedAvg-style.
//!
//! Module map:
//! - [`math`]: MLP encoder, hand-written backward pass, optimiser steps.
//! - [`data`]: Gaussian-mixture datasets, IID / non-IID partitions, views.
//! - [`bank`]: FIFO memory banks and the assembled remote bank.
//! - [`objective`]: InfoNCE, fused contrastive loss, neighborhood matching.
//! - [`privacy`]: mixup + sign-mask encryption of uploaded samples.
//! - [`federation`]: the four-step round protocol and experiment driver.
//! - [`transport`]: binary wire protocol, server loop and client session.
//! - [`analytics`]: false-negative ratios, kNN / linear probes, metrics files.
//! - [`config`]: experiment configuration.

pub mod analytics;
pub mod bank;
pub mod config;
pub mod data;
mod error;
pub mod federation;
pub mod math;
pub mod objective;
pub mod privacy;
pub mod rng;
pub mod transport;

pub use error::{Error, LossComponent, Result};
