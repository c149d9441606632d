//! Unsupervised domain adaptation for binary segmentation of circuit-style
//! images via histogram-gated image translation (HGIT).
//!
//! The pipeline:
//!
//! 1. [`translate`] learns a source→target translator (cycle-consistent GAN)
//!    or applies a training-free baseline (histogram matching, Fourier
//!    domain adaptation).
//! 2. [`curation`] ranks every translated image by a Kolmogorov–Smirnov test
//!    of its intensity histogram against the mean target histogram and keeps
//!    the top N%.
//! 3. [`segmodel`] trains a U-Net-style segmenter on the kept images paired
//!    with the source masks and annotates target images.
//! 4. [`metrics`] scores predictions (pixel accuracy and IoU), and
//!    [`harness`] runs the whole scenario matrix over synthetic domains from
//!    [`synthgen`].

mod batch;
pub mod curation;
pub mod error;
pub mod harness;
pub mod imagecore;
pub mod metrics;
pub mod plot;
pub mod segmodel;
pub mod synthgen;
pub mod translate;
pub mod util;

pub use error::{Error, Result};
pub use imagecore::{BinaryMask, DatasetSplit, GrayImage, Histogram, SplitRole};
