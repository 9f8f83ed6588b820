//! Geometric processing and guided diffusion sampling for 3D multi-class
//! artery segmentation maps.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`volume`]: the data model (label volumes, soft label maps, latent
//!   grids, feature matrices, conditioning maps) and MSV1/CSV serialization.
//! - [`topology`]: containment checks between tissue classes per cross
//!   section (critical pixels, topological loss, violation rates).
//! - [`morphology`]: per-frame and per-volume morphological features,
//!   Savitzky-Golay smoothing, percentile normalization, and the
//!   morphological conditioning map.
//! - [`skeleton`]: hard (penalized-distance-field) and soft
//!   (erosion/dilation) centerline extraction plus the skeletal heatmap.
//! - [`diffusion`]: noise schedules, preconditioning, the denoiser/decoder
//!   interfaces, an exact empirical-Bayes reference denoiser, and the
//!   SDE/ODE sampler.
//! - [`guidance`]: classifier-free, adaptive-null, and loss-based guidance
//!   strategies, plus masked editing.
//! - [`evaluation`]: Frechet distance, k-NN precision/recall, and
//!   conditional fidelity metrics.
//! - [`phantom`]: parametric tube phantoms with known ground truth, used as
//!   the reference corpus for all of the above.

pub mod diffusion;
pub mod edt;
pub mod error;
pub mod evaluation;
pub mod guidance;
pub mod morphology;
pub mod phantom;
pub mod skeleton;
pub mod topology;
pub mod volume;

pub use error::{Error, Result};
