use law_demo::{expert_route, raster_size, Scene};
use serde_json::Value;

#[test]
fn scenes_replay_expert_frames() {
    let scene = Scene::new(3, 20).unwrap();
    assert_eq!(scene.len(), 20);
    let lane: Vec<[f64; 2]> = serde_json::from_str(&scene.lane_json()).unwrap();
    assert!(lane.len() > 100);
    let f: Value = serde_json::from_str(&scene.frame_json(5).unwrap()).unwrap();
    assert_eq!(f["plan"].as_array().unwrap().len(), 6);
    assert!(f["ego"]["speed"].as_f64().unwrap() >= 0.0);
    // The first waypoint lies ahead of the ego along its heading.
    let (ex, ey, h) = (
        f["ego"]["x"].as_f64().unwrap(),
        f["ego"]["y"].as_f64().unwrap(),
        f["ego"]["heading"].as_f64().unwrap(),
    );
    let p = &f["plan"][0];
    let ahead = (p[0].as_f64().unwrap() - ex) * h.cos() + (p[1].as_f64().unwrap() - ey) * h.sin();
    assert!(ahead >= 0.0);
    assert!(scene.frame_json(20).is_err());
    assert!(Scene::new(3, 2).is_err());
}

#[test]
fn rasters_are_opaque_rgba() {
    let scene = Scene::new(4, 10).unwrap();
    let n = raster_size();
    for view in 0..=4 {
        let px = scene.raster_rgba(2, view).unwrap();
        assert_eq!(px.len(), n * n * 4);
        assert!(px.chunks(4).all(|c| c[3] == 255));
        assert!(px.chunks(4).any(|c| c[1] > 0), "view {view} shows no road");
    }
    assert!(scene.raster_rgba(2, 5).is_err());
}

#[test]
fn expert_routes_report_products() {
    let r: Value = serde_json::from_str(&expert_route(1, 8.0, false).unwrap()).unwrap();
    assert!(r["route_completion"].as_f64().unwrap() > 0.99);
    assert_eq!(r["infraction_score"].as_f64().unwrap(), 1.0);
    let r: Value = serde_json::from_str(&expert_route(2, 12.0, true).unwrap()).unwrap();
    let ds = r["driving_score"].as_f64().unwrap();
    assert_eq!(
        ds,
        r["route_completion"].as_f64().unwrap() * r["infraction_score"].as_f64().unwrap()
    );
    assert!(expert_route(1, 40.0, true).is_err());
}
