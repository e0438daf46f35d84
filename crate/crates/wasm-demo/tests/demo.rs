use shadow_inpaint::evaluation::{otsu_shadow_mask, Region};
use shadow_inpaint_demo::{mask_iou, Scene};

#[test]
fn scene_buffers_have_rgba_layout() {
    let scene = Scene::generate(3, 32).unwrap();
    assert_eq!(scene.size(), 32);
    for buf in [scene.shadow_rgba(), scene.shadow_free_rgba(), scene.mask_rgba(), scene.otsu_rgba()] {
        assert_eq!(buf.len(), 32 * 32 * 4);
        assert!(buf.chunks(4).all(|p| p[3] == 255));
    }
    assert!(Scene::generate(3, 30).is_err());
    assert!(Scene::generate(3, 0).is_err());
}

#[test]
fn otsu_mask_matches_core_and_tracks_the_shadow() {
    let scene = Scene::generate(7, 64).unwrap();
    let t = scene.triplet();
    assert_eq!(scene.otsu_mask(), &otsu_shadow_mask(&t.shadow, &t.shadow_free).unwrap());
    assert!(scene.otsu_iou() > 0.5, "iou {}", scene.otsu_iou());
    assert_eq!(mask_iou(&t.mask, &t.mask), 1.0);
}

#[test]
fn identity_metrics_separate_the_regions() {
    let scene = Scene::generate(1, 32).unwrap();
    let rows = scene.metrics("provided").unwrap();
    let get = |r: Region| rows.iter().find(|m| m.region == r).unwrap();
    assert!(get(Region::Shadow).rmse > get(Region::NonShadow).rmse);
    let json = serde_json::to_value(scene.metrics("otsu").unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 3);
    assert!(scene.metrics("nope").is_err());
}

#[test]
fn fusion_maps_are_deterministic() {
    let scene = Scene::generate(2, 32).unwrap();
    let a = scene.fusion(5, 4).unwrap();
    let b = scene.fusion(5, 4).unwrap();
    assert_eq!(a.w1_rgba(), b.w1_rgba());
    assert_eq!(a.restored_rgba().len(), 32 * 32 * 4);
    assert!(a.w1_mean() > 0.0 && a.w1_mean() < 1.0);
    assert!(scene.fusion(5, 0).is_err());
}
