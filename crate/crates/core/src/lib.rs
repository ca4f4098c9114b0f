//! Per-class binary land-cover segmentation of large RGB satellite rasters
//! with an FCN-8 network.

pub mod augment;
pub mod cli;
pub mod eval;
pub mod grid;
pub mod labels;
pub mod net;
pub mod raster;
pub mod synth;
pub mod training;
