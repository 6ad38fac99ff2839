//! Randomized invariants across module boundaries.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatsurf::anchor::{attach_lite_geo, decode_field, init_anchors, FieldHeads};
use splatsurf::geom::{Branch, Camera, GaussianSplat, Intrinsics, Quaternion, Vec3};
use splatsurf::image::FloatMap;
use splatsurf::losses::{loss_rgb, ssim};
use splatsurf::raster::{rasterize_forward, render_forward, RasterConfig};
use splatsurf::surface::{extract_mesh, tsdf_integrate, TsdfVolume};

fn camera(w: usize, h: usize) -> Camera {
    Camera::look_at(Vec3::new(0.3, 0.8, 3.0), Vec3::zeros(), Vec3::y(), Intrinsics::from_fov(w, h, 50.0)).unwrap()
}

fn random_splats(rng: &mut ChaCha8Rng, n: usize) -> Vec<GaussianSplat> {
    (0..n)
        .map(|_| {
            let c = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let s = Vec3::new(rng.random_range(0.02..0.3), rng.random_range(0.02..0.3), rng.random_range(0.02..0.3));
            let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)).normalize();
            let q = Quaternion::from_axis_angle(axis, rng.random_range(0.0..3.0));
            let col = Vec3::new(rng.random(), rng.random(), rng.random());
            GaussianSplat::new(c, s, q, rng.random_range(0.05..0.99), col)
        })
        .collect()
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> FloatMap {
    FloatMap::from_data(w, h, 3, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn blending_weights_and_transmittance_sum_to_one(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cam = camera(24, 20);
        let splats = random_splats(&mut rng, n);
        let cfg = RasterConfig { stop_transmittance: 0.0, ..Default::default() };
        let out = rasterize_forward(&splats, &cam, Branch::Render, &cfg).0;
        for (a, t) in out.alpha.data.iter().zip(&out.final_transmittance.data) {
            prop_assert!((a + t - 1.0).abs() < 1e-5);
        }
        let total: f64 = out.contribution.iter().sum();
        let alpha: f64 = out.alpha.data.iter().sum();
        prop_assert!((total - alpha).abs() < 1e-6 * alpha.max(1.0));
    }

    #[test]
    fn raster_is_deterministic_and_tile_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cam = camera(33, 27);
        let splats = random_splats(&mut rng, 30);
        let base = render_forward(&splats, &cam, Branch::Render, &RasterConfig::default());
        let again = rasterize_forward(&splats, &cam, Branch::Render, &RasterConfig::default()).0;
        prop_assert_eq!(&base.color, &again.color);
        prop_assert_eq!(&base.depth, &again.depth);
        for ts in [16, 32] {
            let o = render_forward(&splats, &cam, Branch::Render, &RasterConfig { tile_size: ts, ..Default::default() });
            for (a, b) in o.color.data.iter().zip(&base.color.data) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn decoded_attributes_stay_in_range(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec3> = (0..60).map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let anchors = init_anchors(&pts, 0.3, k, &mut rng).unwrap();
        let mut heads = FieldHeads::new(k, &mut rng);
        attach_lite_geo(&mut heads, 0.5).unwrap();
        let f = decode_field(&anchors, &heads, &camera(16, 16), None);
        for s in &f.splats {
            prop_assert!(s.opacity > 0.0 && s.opacity < 1.0);
            prop_assert!(s.scale.iter().all(|v| *v > 0.0));
            prop_assert!(s.geo_scale.iter().all(|v| *v > 0.0));
        }
        let again = decode_field(&anchors, &heads, &camera(16, 16), None);
        prop_assert_eq!(f.splats, again.splats);
    }

    #[test]
    fn ssim_range_and_photometric_loss_sign(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(&mut rng, 16, 12);
        let b = random_image(&mut rng, 16, 12);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(loss_rgb(&a, &b, 0.2).unwrap().0 >= 0.0);
        prop_assert!(loss_rgb(&a, &a, 0.2).unwrap().0.abs() < 1e-12);
    }

    #[test]
    fn tsdf_stays_bounded_with_growing_weights(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vol = TsdfVolume::for_bbox(Vec3::repeat(-1.0), Vec3::repeat(1.0), 16, 0.1).unwrap();
        let cam = camera(16, 16);
        let trunc = 3.0 * vol.voxel;
        for _ in 0..3 {
            let depth = FloatMap::from_data(16, 16, 1, (0..256).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(2.0..4.0) }).collect()).unwrap();
            let before = vol.weight.clone();
            tsdf_integrate(&mut vol, &depth, None, &cam, trunc).unwrap();
            prop_assert!(vol.tsdf.iter().all(|v| (-1.0..=1.0).contains(v)));
            prop_assert!(vol.weight.iter().zip(&before).all(|(a, b)| a >= b));
        }
        let m = extract_mesh(&vol, 0.0);
        prop_assert!(m.validate().is_ok());
        prop_assert_eq!(m, extract_mesh(&vol, 0.0));
    }
}
