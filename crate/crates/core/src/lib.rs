//! Landslide segmentation from SAR datacubes.

pub mod chipper;
pub mod cube_store;
pub mod error;
pub mod experiment;
pub mod ingest;
pub mod insar;
pub mod metrics;
pub mod pgm;
pub mod preprocess;
pub mod raster;
pub mod segmodel;
pub mod synthgen;
pub mod terrain;
pub mod zarr;

pub use error::{Error, Result};
