//! Gaussian splatting with a shared anchor field that serves both novel-view
//! rendering and surface reconstruction.

pub mod anchor;
pub mod checkpoint;
pub mod dataset;
pub mod densify;
pub mod error;
pub mod eval;
pub mod geom;
pub mod image;
pub mod losses;
pub mod mlp;
pub mod model;
pub mod par;
pub mod raster;
pub mod scene;
pub mod study;
pub mod surface;
pub mod trainer;

pub use error::{Error, Result};
