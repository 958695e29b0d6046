//! Few-shot anomaly multi-classification.
//!
//! Pipeline: a pretrained convolutional backbone turns images into grids of
//! patch feature vectors; the normal samples populate a coreset-subsampled
//! memory bank; test features become residuals against their nearest bank
//! vector; small convolutional heads classify those residual maps in an
//! episodic few-shot protocol, optionally pretrained on synthetically
//! generated pseudo-class defects.
//!
//! Each major capability has a runnable demo under `examples/`; the `anoclass`
//! binary exposes the same steps as subcommands (`extract`, `build-bank`,
//! `gen-defects`, `pretrain`, `finetune`, `evaluate`, `tsne`, `report`).

pub mod backbone;
pub mod bank;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod error;
pub mod features;
pub mod harness;
pub mod io;
pub mod nn;
pub mod relation;
pub mod synth;

pub use backbone::{BackboneHandle, ImageTensor, PatchFeatureMap};
pub use bank::{MemoryBank, ResidualMap};
pub use error::{Error, Result};
