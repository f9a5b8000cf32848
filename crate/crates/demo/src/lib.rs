use law_core::eval::closed_loop::{run_route, ExpertDriver, RoutesConfig};
use law_core::sim::episode::{generate_episode, Episode};
use law_core::sim::expert::EXPERT_TARGET_SPEED;
use law_core::sim::render::{
    render_observation, Raster, CH_AGENT, CH_DRIVABLE, CH_SPEED, NUM_VIEWS, RASTER_SIZE,
};
use law_core::sim::world::MAX_SPEED;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Longest episode the page may request.
pub const MAX_FRAMES: usize = 200;

#[derive(Serialize)]
struct Body {
    x: f64,
    y: f64,
    heading: f64,
    speed: f64,
    radius: f64,
}

#[derive(Serialize)]
struct FrameView {
    ego: Body,
    agents: Vec<Body>,
    /// Expert waypoints in world coordinates.
    plan: Vec<[f64; 2]>,
}

fn body(a: &law_core::sim::world::AgentState) -> Body {
    Body {
        x: a.position[0],
        y: a.position[1],
        heading: a.heading,
        speed: a.speed,
        radius: a.radius,
    }
}

/// One expert episode, replayed frame by frame on the page.
#[wasm_bindgen]
pub struct Scene {
    episode: Episode,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, frames: usize) -> Result<Scene, String> {
        if !(8..=MAX_FRAMES).contains(&frames) {
            return Err(format!("frames must lie in 8..={MAX_FRAMES}, got {frames}"));
        }
        let (episode, _) = generate_episode(seed.into(), frames, EXPERT_TARGET_SPEED)
            .map_err(|e| e.to_string())?;
        Ok(Scene { episode })
    }

    pub fn len(&self) -> usize {
        self.episode.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episode.is_empty()
    }

    /// Lane centerline as a JSON array of [x, y] points.
    pub fn lane_json(&self) -> String {
        serde_json::to_string(self.episode.map().points()).expect("points serialize")
    }

    pub fn lane_width(&self) -> f64 {
        self.episode.map().lane_width()
    }

    /// Ego, agents and the expert plan of frame `i` as JSON.
    pub fn frame_json(&self, i: usize) -> Result<String, String> {
        let frame = self
            .episode
            .frames
            .get(i)
            .ok_or_else(|| format!("frame {i} out of range"))?;
        let view = FrameView {
            ego: body(&frame.ego),
            agents: frame.agents.iter().map(body).collect(),
            plan: self.episode.waypoints[i]
                .iter()
                .map(|&p| frame.ego.to_world(p))
                .collect(),
        };
        Ok(serde_json::to_string(&view).expect("frame serializes"))
    }

    /// RGBA pixels of view `view` at frame `i`: 0 to 3 are front, left,
    /// right and rear, 4 is the bird's-eye raster. Red marks agents, green
    /// the drivable area and blue agent speed.
    pub fn raster_rgba(&self, i: usize, view: usize) -> Result<Vec<u8>, String> {
        let frame = self
            .episode
            .frames
            .get(i)
            .ok_or_else(|| format!("frame {i} out of range"))?;
        let obs = render_observation(frame);
        let raster = match view {
            v if v < NUM_VIEWS => &obs.views[v],
            NUM_VIEWS => &obs.bev,
            v => return Err(format!("view {v} out of range, expected 0..={NUM_VIEWS}")),
        };
        Ok(rgba(raster))
    }
}

fn rgba(r: &Raster) -> Vec<u8> {
    let byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = Vec::with_capacity(r.height * r.width * 4);
    for row in 0..r.height {
        for col in 0..r.width {
            out.extend([
                byte(r.at(row, col, CH_AGENT)),
                byte(0.35 * r.at(row, col, CH_DRIVABLE)),
                byte(r.at(row, col, CH_SPEED)),
                255,
            ]);
        }
    }
    out
}

#[wasm_bindgen]
pub fn raster_size() -> usize {
    RASTER_SIZE
}

/// Drives the expert along route `seed` at `target_speed` and returns its
/// route completion, infraction score and driving score as JSON.
#[wasm_bindgen]
pub fn expert_route(seed: u32, target_speed: f64, traffic: bool) -> Result<String, String> {
    if !(0.5..=MAX_SPEED).contains(&target_speed) {
        return Err(format!(
            "target speed must lie in 0.5..={MAX_SPEED}, got {target_speed}"
        ));
    }
    let routes = RoutesConfig::new(vec![seed.into()], !traffic);
    let mut driver = ExpertDriver { target_speed };
    let r = run_route(&mut driver, seed.into(), &routes).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&r).expect("route result serializes"))
}
