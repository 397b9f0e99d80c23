//! Weakly supervised instance labels for cell microscopy.
//!
//! The crate turns expert point annotations into pixel-level training masks
//! and provides the surrounding machinery needed to run and score an
//! instance segmenter on large images:
//!
//! * [`raster`]: image, mask and label-map types plus pixel primitives
//!   (HSV conversion, connected components, disk morphology, exact EDT).
//! * [`forest`]: per-pixel features and a random-forest foreground classifier.
//! * [`labelsynth`]: seed disks, competitive region growing and three-class
//!   (background / interior / contour) mask synthesis.
//! * [`tiling`]: overlapping window plans and weighted stitching.
//! * [`instance`]: probability-map fusion, instance extraction and the
//!   classical baseline segmenter.
//! * [`postfilter`]: candidate features and a boosted-tree IoU regressor.
//! * [`metrics`]: detection / instance F1, Dice and relative count error.
//! * [`synthgen`]: a seeded synthetic scene generator with ground truth.

pub mod error;
pub mod forest;
pub mod instance;
pub mod labelsynth;
pub mod metrics;
pub mod postfilter;
pub mod raster;
pub mod synthgen;
pub mod tiling;

pub use error::{Error, Result};
pub use raster::{
    Connectivity, Grid, InstanceLabelMap, PixelClass, ProbabilityMap, RasterImage, SemanticMask,
    ThreeClassMask,
};
