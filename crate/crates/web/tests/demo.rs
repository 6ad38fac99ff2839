use splatsurf::image::FloatMap;
use splatsurf_web::{depth_to_rgba, normal_to_rgba, rgb_to_rgba, Demo, Layer};

#[test]
fn layers_parse() {
    assert_eq!(Layer::parse("depth").unwrap(), Layer::Depth);
    assert!(Layer::parse("albedo").is_err());
}

#[test]
fn rgba_conversions() {
    let rgb = FloatMap::from_data(2, 1, 3, vec![0.0, 0.5, 1.0, 2.0, -1.0, 0.25]).unwrap();
    assert_eq!(rgb_to_rgba(&rgb), vec![0, 128, 255, 255, 255, 0, 64, 255]);

    let depth = FloatMap::from_data(3, 1, 1, vec![1.0, 3.0, 2.0]).unwrap();
    let alpha = FloatMap::from_data(3, 1, 1, vec![1.0, 1.0, 0.1]).unwrap();
    let d = depth_to_rgba(&depth, &alpha);
    assert_eq!(&d[0..4], &[255, 255, 255, 255]);
    assert_eq!(d[4], 51);
    assert_eq!(&d[8..12], &[0, 0, 0, 255]);

    let n = FloatMap::from_data(1, 1, 3, vec![0.0, 0.0, -1.0]).unwrap();
    let a = FloatMap::from_data(1, 1, 1, vec![1.0]).unwrap();
    assert_eq!(normal_to_rgba(&n, &a), vec![128, 128, 0, 255]);
}

#[test]
fn demo_trains_renders_and_meshes() {
    let mut d = Demo::create("sphere", 24, 8, 20, 0).unwrap();
    assert_eq!(d.size(), 24);
    assert_eq!(d.views(), 8);
    assert!(d.loss().is_nan());
    for layer in [Layer::Truth, Layer::Render, Layer::Depth, Layer::Normal] {
        assert_eq!(d.image(1, layer).unwrap().len(), 24 * 24 * 4);
    }
    assert!(d.image(8, Layer::Truth).is_err());
    assert_eq!(d.advance(5).unwrap(), 5);
    assert!(d.loss().is_finite());
    assert_eq!(d.advance(100).unwrap(), 20);
    let obj = d.mesh_obj(24).unwrap();
    assert!(obj.lines().all(|l| l.starts_with("v ") || l.starts_with("f ") || l.starts_with("vn ") || l.starts_with('#') || l.is_empty()));
}

#[test]
fn unknown_scene_is_an_error() {
    assert!(Demo::create("teapot", 24, 8, 20, 0).is_err());
}
