use crate::error::{invalid, Result};
use crate::geom::{Camera, Vec3, Z_NEAR};
use crate::image::FloatMap;
use crate::par;

/// Truncated signed distance volume sampled at grid points
/// `origin + (i, j, k)·voxel`. Values are normalized by the truncation
/// distance; unobserved points hold `tsdf = 1, weight = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct TsdfVolume {
    pub origin: Vec3,
    pub voxel: f64,
    pub dims: [usize; 3],
    pub tsdf: Vec<f64>,
    pub weight: Vec<f64>,
}

impl TsdfVolume {
    pub fn new(origin: Vec3, voxel: f64, dims: [usize; 3]) -> Result<Self> {
        if !(voxel > 0.0) || dims.iter().any(|&d| d < 2) {
            return invalid("TSDF volume needs voxel > 0 and at least 2 points per axis");
        }
        let n = dims[0] * dims[1] * dims[2];
        if n > 400_000_000 {
            return invalid("TSDF volume too large");
        }
        Ok(Self { origin, voxel, dims, tsdf: vec![1.0; n], weight: vec![0.0; n] })
    }

    /// Volume covering `[lo, hi]` scaled by `1 + inflate` about its center,
    /// with voxel size `largest edge / resolution` of the uninflated box.
    pub fn for_bbox(lo: Vec3, hi: Vec3, resolution: usize, inflate: f64) -> Result<Self> {
        let ext = hi - lo;
        if ext.min() <= 0.0 || resolution < 2 {
            return invalid("bounding box must have positive extent and resolution >= 2");
        }
        Self::for_bbox_voxel(lo, hi, ext.max() / resolution as f64, inflate)
    }

    /// As [`TsdfVolume::for_bbox`] with an explicit voxel size.
    pub fn for_bbox_voxel(lo: Vec3, hi: Vec3, voxel: f64, inflate: f64) -> Result<Self> {
        let ext = hi - lo;
        if ext.min() <= 0.0 || !(voxel > 0.0) {
            return invalid("bounding box must have positive extent and voxel > 0");
        }
        let center = (lo + hi) * 0.5;
        let half = ext * 0.5 * (1.0 + inflate);
        let origin = center - half;
        let dims = [0, 1, 2].map(|i| (2.0 * half[i] / voxel).ceil() as usize + 1);
        Self::new(origin, voxel, dims)
    }

    /// Samples an analytic SDF, stored as `clamp(sdf/trunc, −1, 1)` with unit weight.
    pub fn from_sdf(origin: Vec3, voxel: f64, dims: [usize; 3], trunc: f64, f: impl Fn(&Vec3) -> f64) -> Result<Self> {
        let mut v = Self::new(origin, voxel, dims)?;
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let idx = v.index(i, j, k);
                    v.tsdf[idx] = (f(&v.point(i, j, k)) / trunc).clamp(-1.0, 1.0);
                    v.weight[idx] = 1.0;
                }
            }
        }
        Ok(v)
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.voxel
    }

    pub fn len(&self) -> usize {
        self.tsdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tsdf.is_empty()
    }
}

/// Fuses one depth map. A grid point is updated when it projects onto a
/// pixel with positive depth (and `alpha > 0.5` when a mask is given) and
/// lies no more than `trunc` behind the observed surface.
pub fn tsdf_integrate(vol: &mut TsdfVolume, depth: &FloatMap, alpha: Option<&FloatMap>, cam: &Camera, trunc: f64) -> Result<()> {
    if trunc < vol.voxel {
        return invalid("truncation must be at least one voxel");
    }
    if depth.width != cam.width || depth.height != cam.height || depth.channels != 1 {
        return invalid("depth map does not match the camera");
    }
    if let Some(a) = alpha {
        if !a.same_shape(depth) {
            return invalid("alpha map does not match the depth map");
        }
    }
    let [nx, ny, nz] = vol.dims;
    let slab = nx * ny;
    let vol_ref = &*vol;
    let slabs = par::map_range(nz, |k| {
        let mut t = vol_ref.tsdf[k * slab..(k + 1) * slab].to_vec();
        let mut w = vol_ref.weight[k * slab..(k + 1) * slab].to_vec();
        for j in 0..ny {
            for i in 0..nx {
                let pc = cam.world_to_cam(&vol_ref.point(i, j, k));
                if pc.z <= Z_NEAR {
                    continue;
                }
                let uv = cam.project_cam(&pc);
                if !(uv.x >= 0.0 && uv.y >= 0.0 && uv.x < cam.width as f64 && uv.y < cam.height as f64) {
                    continue;
                }
                let (px, py) = (uv.x as usize, uv.y as usize);
                let d = depth.get(px, py, 0);
                if !(d > 0.0) || alpha.is_some_and(|a| a.get(px, py, 0) <= 0.5) {
                    continue;
                }
                let sd = d - pc.z;
                if sd <= -trunc {
                    continue;
                }
                let sample = (sd / trunc).clamp(-1.0, 1.0);
                let l = i + nx * j;
                t[l] = (t[l] * w[l] + sample) / (w[l] + 1.0);
                w[l] += 1.0;
            }
        }
        (t, w)
    });
    for (k, (t, w)) in slabs.into_iter().enumerate() {
        vol.tsdf[k * slab..(k + 1) * slab].copy_from_slice(&t);
        vol.weight[k * slab..(k + 1) * slab].copy_from_slice(&w);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Intrinsics;

    fn plane_setup() -> (TsdfVolume, FloatMap, Camera) {
        let cam = Camera::look_at(Vec3::zeros(), Vec3::z(), -Vec3::y(), Intrinsics::from_fov(32, 32, 60.0)).unwrap();
        let depth = FloatMap::filled(32, 32, 1, 5.0);
        let vol = TsdfVolume::new(Vec3::new(-0.5, -0.5, 4.0), 0.1, [11, 11, 21]).unwrap();
        (vol, depth, cam)
    }

    #[test]
    fn fronto_parallel_plane_crossing() {
        let (mut vol, depth, cam) = plane_setup();
        tsdf_integrate(&mut vol, &depth, None, &cam, 0.3).unwrap();
        for j in 0..11 {
            for i in 0..11 {
                // find the zero crossing along z by linear interpolation
                let mut z_cross = None;
                for k in 0..20 {
                    let (a, b) = (vol.tsdf[vol.index(i, j, k)], vol.tsdf[vol.index(i, j, k + 1)]);
                    if vol.weight[vol.index(i, j, k + 1)] > 0.0 && a > 0.0 && b <= 0.0 {
                        let t = a / (a - b);
                        z_cross = Some(vol.point(i, j, k).z + t * vol.voxel);
                    }
                }
                let z = z_cross.expect("crossing");
                assert!((z - 5.0).abs() <= 0.05 + 1e-9, "{z}");
            }
        }
    }

    #[test]
    fn far_behind_is_untouched_and_repeat_is_idempotent() {
        let (mut vol, depth, cam) = plane_setup();
        tsdf_integrate(&mut vol, &depth, None, &cam, 0.3).unwrap();
        let back = vol.index(5, 5, 20); // z = 6, one unit behind the plane
        assert_eq!(vol.weight[back], 0.0);
        assert_eq!(vol.tsdf[back], 1.0);
        let once = vol.clone();
        tsdf_integrate(&mut vol, &depth, None, &cam, 0.3).unwrap();
        assert_eq!(vol.tsdf, once.tsdf);
        for (a, b) in vol.weight.iter().zip(&once.weight) {
            assert_eq!(*a, 2.0 * b);
        }
        assert!(vol.tsdf.iter().all(|t| (-1.0..=1.0).contains(t)));
    }

    #[test]
    fn alpha_mask_excludes_pixels() {
        let (mut vol, depth, cam) = plane_setup();
        let alpha = FloatMap::filled(32, 32, 1, 0.2);
        tsdf_integrate(&mut vol, &depth, Some(&alpha), &cam, 0.3).unwrap();
        assert!(vol.weight.iter().all(|w| *w == 0.0));
        assert!(tsdf_integrate(&mut vol, &depth, None, &cam, 0.01).is_err());
    }

    #[test]
    fn bbox_volume_layout() {
        let v = TsdfVolume::for_bbox(Vec3::new(-1.0, 0.0, -1.0), Vec3::new(1.0, 1.0, 1.0), 128, 0.1).unwrap();
        assert!((v.voxel - 2.0 / 128.0).abs() < 1e-15);
        let far = v.point(v.dims[0] - 1, v.dims[1] - 1, v.dims[2] - 1);
        assert!(far.x >= 1.1 - 1e-9 && far.y >= 1.05 - 1e-9);
        assert!(v.origin.x <= -1.1 + 1e-12);
    }
}
