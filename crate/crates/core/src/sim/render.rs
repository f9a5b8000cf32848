use std::f64::consts::{FRAC_PI_2, PI};

use super::map::segment_param;
use super::world::{SimFrame, MAX_SPEED};

pub const NUM_VIEWS: usize = 4;
pub const RASTER_SIZE: usize = 64;
pub const CHANNELS: usize = 3;
pub const CH_DRIVABLE: usize = 0;
pub const CH_AGENT: usize = 1;
pub const CH_SPEED: usize = 2;

/// Row-major height × width × channels image.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Raster {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn at(&self, r: usize, c: usize, ch: usize) -> f32 {
        self.data[(r * self.width + c) * self.channels + ch]
    }

    fn set(&mut self, r: usize, c: usize, ch: usize, v: f32) {
        self.data[(r * self.width + c) * self.channels + ch] = v;
    }

    pub fn channel_sum(&self, ch: usize) -> f64 {
        self.data
            .iter()
            .skip(ch)
            .step_by(self.channels)
            .map(|&v| v as f64)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Front, left, right, rear.
    pub views: Vec<Raster>,
    pub bev: Raster,
}

/// An ego-centric orthographic window. Row 0 is the far edge, column 0 the
/// left edge as seen looking along `direction`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewGeometry {
    /// Viewing direction in the ego frame, radians from +x.
    pub direction: f64,
    /// Distance from the ego to the near edge along the direction.
    pub near: f64,
    /// Metres per pixel.
    pub resolution: f64,
    pub half_width: f64,
    pub size: usize,
}

impl ViewGeometry {
    pub fn view(i: usize) -> Self {
        let direction = [0.0, FRAC_PI_2, -FRAC_PI_2, PI][i];
        ViewGeometry {
            direction,
            near: 2.0,
            resolution: 0.5,
            half_width: 16.0,
            size: RASTER_SIZE,
        }
    }

    pub fn bev() -> Self {
        ViewGeometry {
            direction: 0.0,
            near: -32.0,
            resolution: 1.0,
            half_width: 32.0,
            size: RASTER_SIZE,
        }
    }

    fn axes(&self) -> ([f64; 2], [f64; 2]) {
        let (s, c) = self.direction.sin_cos();
        ([c, s], [-s, c])
    }

    /// Ego-frame position of the centre of pixel (r, c).
    pub fn pixel_center(&self, r: usize, c: usize) -> [f64; 2] {
        let along = self.near + (self.size as f64 - r as f64 - 0.5) * self.resolution;
        let lateral = self.half_width - (c as f64 + 0.5) * self.resolution;
        let (d, n) = self.axes();
        [along * d[0] + lateral * n[0], along * d[1] + lateral * n[1]]
    }

    /// Continuous (row, col) of an ego-frame point; pixel centres land on
    /// integer coordinates.
    pub fn to_pixel(&self, p: [f64; 2]) -> (f64, f64) {
        let (d, n) = self.axes();
        let along = p[0] * d[0] + p[1] * d[1];
        let lateral = p[0] * n[0] + p[1] * n[1];
        (
            self.size as f64 - (along - self.near) / self.resolution - 0.5,
            (self.half_width - lateral) / self.resolution - 0.5,
        )
    }

    /// Pixel index ranges covering the ego-frame disc of radius `r` at `p`.
    fn bbox(&self, p: [f64; 2], r: f64) -> Option<(usize, usize, usize, usize)> {
        let (pr, pc) = self.to_pixel(p);
        let rr = r / self.resolution + 1.0;
        let max = self.size as f64 - 1.0;
        let (r0, r1) = ((pr - rr).floor().max(0.0), (pr + rr).ceil().min(max));
        let (c0, c1) = ((pc - rr).floor().max(0.0), (pc + rr).ceil().min(max));
        (r0 <= r1 && c0 <= c1).then_some((r0 as usize, r1 as usize, c0 as usize, c1 as usize))
    }
}

/// Scene content in the ego frame.
struct EgoScene {
    segments: Vec<([f64; 2], [f64; 2])>,
    half_lane: f64,
    agents: Vec<([f64; 2], f64, f32)>,
}

// Route samples beyond this range cannot touch any window.
const SCENE_RANGE: f64 = 60.0;

impl EgoScene {
    fn new(frame: &SimFrame, all_segments: bool) -> Self {
        let ego = &frame.ego;
        let pts = frame.map.points();
        let local: Vec<[f64; 2]> = pts.iter().map(|&p| ego.to_local(p)).collect();
        let segments = local
            .windows(2)
            .filter(|w| {
                all_segments
                    || w[0][0].hypot(w[0][1]) < SCENE_RANGE
                    || w[1][0].hypot(w[1][1]) < SCENE_RANGE
            })
            .map(|w| (w[0], w[1]))
            .collect();
        let agents = frame
            .agents
            .iter()
            .map(|a| {
                (
                    ego.to_local(a.position),
                    a.radius,
                    (a.speed / MAX_SPEED) as f32,
                )
            })
            .collect();
        EgoScene {
            segments,
            half_lane: frame.map.lane_width() / 2.0,
            agents,
        }
    }
}

fn within(p: [f64; 2], q: [f64; 2], r: f64) -> bool {
    let (dx, dy) = (p[0] - q[0], p[1] - q[1]);
    dx * dx + dy * dy <= r * r
}

fn rasterize(scene: &EgoScene, g: &ViewGeometry) -> Raster {
    let mut out = Raster::zeros(g.size, g.size, CHANNELS);
    for &(a, b) in &scene.segments {
        let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
        let reach = scene.half_lane + 0.5 * (a[0] - b[0]).hypot(a[1] - b[1]);
        let Some((r0, r1, c0, c1)) = g.bbox(mid, reach) else {
            continue;
        };
        for r in r0..=r1 {
            for c in c0..=c1 {
                if out.at(r, c, CH_DRIVABLE) == 0.0
                    && segment_param(g.pixel_center(r, c), a, b).1 <= scene.half_lane
                {
                    out.set(r, c, CH_DRIVABLE, 1.0);
                }
            }
        }
    }
    for &(p, radius, speed) in &scene.agents {
        let Some((r0, r1, c0, c1)) = g.bbox(p, radius) else {
            continue;
        };
        for r in r0..=r1 {
            for c in c0..=c1 {
                if within(g.pixel_center(r, c), p, radius) {
                    out.set(r, c, CH_AGENT, 1.0);
                    let s = out.at(r, c, CH_SPEED).max(speed);
                    out.set(r, c, CH_SPEED, s);
                }
            }
        }
    }
    out
}

/// Four ego-centric views and a BEV raster of `frame`.
pub fn render_observation(frame: &SimFrame) -> Observation {
    let scene = EgoScene::new(frame, false);
    Observation {
        views: (0..NUM_VIEWS)
            .map(|i| rasterize(&scene, &ViewGeometry::view(i)))
            .collect(),
        bev: rasterize(&scene, &ViewGeometry::bev()),
    }
}

/// The four views of [`render_observation`] without the BEV raster.
pub fn render_views(frame: &SimFrame) -> Vec<Raster> {
    let scene = EgoScene::new(frame, false);
    (0..NUM_VIEWS)
        .map(|i| rasterize(&scene, &ViewGeometry::view(i)))
        .collect()
}

/// Per-pixel reference rasterizer: tests every pixel against every route
/// segment and agent.
pub fn render_brute_force(frame: &SimFrame, g: &ViewGeometry) -> Raster {
    let scene = EgoScene::new(frame, true);
    let mut out = Raster::zeros(g.size, g.size, CHANNELS);
    for r in 0..g.size {
        for c in 0..g.size {
            let p = g.pixel_center(r, c);
            if scene
                .segments
                .iter()
                .any(|&(a, b)| segment_param(p, a, b).1 <= scene.half_lane)
            {
                out.set(r, c, CH_DRIVABLE, 1.0);
            }
            for &(q, radius, speed) in &scene.agents {
                if within(p, q, radius) {
                    out.set(r, c, CH_AGENT, 1.0);
                    let s = out.at(r, c, CH_SPEED).max(speed);
                    out.set(r, c, CH_SPEED, s);
                }
            }
        }
    }
    out
}
