//! A trained scene: anchors plus decoding heads, with rendering and mesh
//! extraction helpers shared by the trainer, the studies and the CLI.

use crate::anchor::{decode_field, AnchorSet, FieldHeads};
use crate::error::{invalid, Result};
use crate::geom::{Branch, Camera, GaussianSplat, Vec3};
use crate::raster::{rasterize_forward, RasterConfig, RenderOutput};
use crate::surface::{extract_mesh, tsdf_integrate, TriangleMesh, TsdfVolume};

/// Anchors decoded only when their position projects inside the image grown
/// by this fraction on every side.
pub const CULL_MARGIN: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub anchors: AnchorSet,
    pub heads: FieldHeads,
}

impl Model {
    /// Number of neural Gaussian slots (`anchors × k`), active or not.
    pub fn slots(&self) -> usize {
        self.anchors.len() * self.anchors.k
    }

    /// Decoded splats for `cam`; `keep[a·k + j]` false removes that Gaussian.
    pub fn splats(&self, cam: &Camera, keep: Option<&[bool]>) -> Result<Vec<GaussianSplat>> {
        if keep.is_some_and(|m| m.len() != self.slots()) {
            return invalid("gaussian mask length does not match anchors × k");
        }
        let field = decode_field(&self.anchors, &self.heads, cam, Some(CULL_MARGIN));
        let k = self.anchors.k;
        Ok(field
            .splats
            .into_iter()
            .zip(&field.owner)
            .filter(|(_, o)| keep.is_none_or(|m| m[o.0 as usize * k + o.1 as usize]))
            .map(|(s, _)| s)
            .collect())
    }

    pub fn render(&self, cam: &Camera, branch: Branch, keep: Option<&[bool]>) -> Result<RenderOutput> {
        let splats = self.splats(cam, keep)?;
        Ok(rasterize_forward(&splats, cam, branch, &RasterConfig::default()).0)
    }

    /// Geometry-branch depth of every camera fused into `vol` (truncation
    /// 3 voxels, alpha-masked), then marching cubes at 0.
    pub fn fuse_mesh(&self, cams: &[Camera], vol: &mut TsdfVolume, keep: Option<&[bool]>) -> Result<TriangleMesh> {
        let trunc = 3.0 * vol.voxel;
        for cam in cams {
            let r = self.render(cam, Branch::Geometry, keep)?;
            tsdf_integrate(vol, &r.depth, Some(&r.alpha), cam, trunc)?;
        }
        Ok(extract_mesh(vol, 0.0))
    }

    /// World centers `x + o·γ` of all slots, indexed `a·k + j`.
    pub fn centers(&self) -> Vec<Vec3> {
        let k = self.anchors.k;
        (0..self.slots()).map(|i| self.anchors.center(i / k, i % k)).collect()
    }
}
