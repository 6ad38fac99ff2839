//! Surface extraction: TSDF fusion, marching cubes and mesh files.

pub mod mc;
mod mc_tables;
pub mod mesh;
pub mod tsdf;

pub use mc::extract_mesh;
pub use mesh::{MeshFormat, TriangleMesh};
pub use tsdf::{tsdf_integrate, TsdfVolume};
