//! Synthetic lung CT dataset generation.
//!
//! The crate is organised along the pipeline stages:
//!
//! * [`phantom`] material-labelled voxel chest phantoms and the attenuation table
//! * [`io`] MetaImage (`.mhd` + `.raw`) volume and sidecar metadata files
//! * [`lesion`] nodule size sampling, shape synthesis, lumpy texture, placement and embedding
//! * [`ct`] fan-beam forward projection, noise, scatter and filtered back-projection
//! * [`labeler`] logistic malignancy model: encoding, fitting, labelling
//! * [`dataset`] manifest, export tree, resampling and patch extraction
//! * [`metrics`] Dice, AUC and edge/profile measurements
//! * [`pipeline`] config parsing and the end-to-end run

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ct;
pub mod dataset;
pub mod error;
pub mod io;
pub mod labeler;
pub mod lesion;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod seed;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{VolumeKind, VoxelVolume};

/// Version string written into manifests and `dataset.json`.
pub const TOOL_VERSION: &str = concat!("synlungs ", env!("CARGO_PKG_VERSION"));
