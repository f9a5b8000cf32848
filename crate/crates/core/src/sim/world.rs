use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::map::{dist, wrap_angle, LaneMap};

pub const DT: f64 = 0.5;
pub const MAX_SPEED: f64 = 15.0;
pub const MAX_AGENTS: usize = 8;
pub const EGO_RADIUS: f64 = 1.0;
pub const AGENT_RADIUS: f64 = 1.0;
/// Arc length at which the ego starts.
pub const EGO_START: f64 = 30.0;
const MIN_SPAWN_GAP: f64 = 12.0;
const PLACEMENT_ATTEMPTS: usize = 100;

// Intelligent driver model constants.
const IDM_ACCEL: f64 = 2.0;
const IDM_COMFORT_DECEL: f64 = 3.0;
const IDM_MIN_GAP: f64 = 3.0;
const IDM_HEADWAY: f64 = 1.2;
pub const MAX_BRAKE: f64 = 9.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AgentState {
    pub id: u32,
    pub position: [f64; 2],
    pub heading: f64,
    pub speed: f64,
    pub radius: f64,
    /// Arc length along the route.
    pub progress: f64,
    /// Cruise speed of the lane follower; unused for the ego.
    pub desired_speed: f64,
}

impl AgentState {
    /// `p` (world frame) expressed in this entity's frame: x forward, y left.
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (dx, dy) = (p[0] - self.position[0], p[1] - self.position[1]);
        let (s, c) = self.heading.sin_cos();
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [
            self.position[0] + c * p[0] - s * p[1],
            self.position[1] + s * p[0] + c * p[1],
        ]
    }

    pub fn overlaps(&self, other: &AgentState) -> bool {
        dist(self.position, other.position) <= self.radius + other.radius
    }
}

/// Longitudinal acceleration and yaw rate.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Control {
    pub accel: f64,
    pub yaw_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimFrame {
    pub time_index: usize,
    pub ego: AgentState,
    pub agents: Vec<AgentState>,
    pub map: Arc<LaneMap>,
}

impl SimFrame {
    /// Nearest entity ahead of `progress` along the route among the agents
    /// (and the ego when `include_ego`), excluding agent `skip`.
    fn leader(&self, progress: f64, skip: Option<u32>, include_ego: bool) -> Option<&AgentState> {
        let ego = include_ego.then_some(&self.ego);
        self.agents
            .iter()
            .filter(|a| Some(a.id) != skip)
            .chain(ego)
            .filter(|a| a.progress > progress)
            .min_by(|a, b| a.progress.total_cmp(&b.progress))
    }

    /// Leader of the ego and the bumper-to-bumper gap to it.
    pub fn ego_leader(&self) -> Option<(&AgentState, f64)> {
        self.leader(self.ego.progress, None, false).map(|l| {
            (
                l,
                l.progress - self.ego.progress - l.radius - self.ego.radius,
            )
        })
    }

    /// Any ego/agent or agent/agent disc overlap.
    pub fn has_collision(&self) -> bool {
        let all: Vec<&AgentState> = std::iter::once(&self.ego).chain(&self.agents).collect();
        all.iter()
            .enumerate()
            .any(|(i, a)| all[i + 1..].iter().any(|b| a.overlaps(b)))
    }

    pub fn ego_collides(&self) -> bool {
        self.agents.iter().any(|a| a.overlaps(&self.ego))
    }
}

/// Intelligent-driver acceleration towards `desired` with an optional
/// `(gap, leader_speed)`.
pub fn idm_accel(speed: f64, desired: f64, leader: Option<(f64, f64)>) -> f64 {
    let free = 1.0 - (speed / desired.max(0.1)).powi(4);
    let interaction = match leader {
        Some((gap, lead_speed)) => {
            let dv = speed - lead_speed;
            let s_star = IDM_MIN_GAP
                + (speed * IDM_HEADWAY
                    + speed * dv / (2.0 * (IDM_ACCEL * IDM_COMFORT_DECEL).sqrt()))
                .max(0.0);
            (s_star / gap.max(0.1)).powi(2)
        }
        None => 0.0,
    };
    (IDM_ACCEL * (free - interaction)).clamp(-MAX_BRAKE, IDM_ACCEL)
}

pub(crate) fn on_route(
    map: &LaneMap,
    id: u32,
    s: f64,
    speed: f64,
    desired: f64,
    radius: f64,
) -> AgentState {
    AgentState {
        id,
        position: map.point_at(s),
        heading: map.heading_at(s),
        speed,
        radius,
        progress: s,
        desired_speed: desired,
    }
}

/// Deterministic world from a seed: a generated route, the ego at
/// [`EGO_START`] and 2–8 lane-following agents.
pub fn gen_world(seed: u64) -> (Arc<LaneMap>, SimFrame) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = Arc::new(LaneMap::generate(&mut rng));
    let ego_speed = rng.gen_range(4.0..8.0);
    let ego = on_route(&map, 0, EGO_START, ego_speed, 0.0, EGO_RADIUS);

    let wanted = rng.gen_range(2..=MAX_AGENTS);
    let mut agents: Vec<AgentState> = Vec::new();
    let mut attempts = 0;
    while agents.len() < wanted && attempts < PLACEMENT_ATTEMPTS {
        attempts += 1;
        let s = EGO_START + rng.gen_range(-25.0..110.0);
        let desired = rng.gen_range(4.0..12.0);
        if s < 5.0 || s > map.length() - 5.0 {
            continue;
        }
        let clear = std::iter::once(&ego)
            .chain(&agents)
            .all(|o| (o.progress - s).abs() >= MIN_SPAWN_GAP);
        if !clear {
            continue;
        }
        let id = agents.len() as u32 + 1;
        agents.push(on_route(&map, id, s, desired, desired, AGENT_RADIUS));
    }
    agents.sort_by_key(|a| a.id);
    let frame = SimFrame {
        time_index: 0,
        ego,
        agents,
        map: map.clone(),
    };
    (map, frame)
}

/// Advances the world by `dt`. The ego integrates unicycle kinematics
/// under `control`; agents follow the centerline with IDM speed control
/// computed from the pre-step state. Agents reaching the end of the route
/// are removed.
pub fn step_world(frame: &SimFrame, control: Control, dt: f64) -> SimFrame {
    assert!(dt > 0.0, "dt must be positive");
    let map = &frame.map;

    let mut agents = Vec::with_capacity(frame.agents.len());
    for a in &frame.agents {
        let lead = frame
            .leader(a.progress, Some(a.id), true)
            .map(|l| (l.progress - a.progress - l.radius - a.radius, l.speed));
        let acc = idm_accel(a.speed, a.desired_speed, lead);
        let v1 = (a.speed + acc * dt).clamp(0.0, MAX_SPEED);
        let s = a.progress + 0.5 * (a.speed + v1) * dt;
        if s >= map.length() - 1.0 {
            continue;
        }
        agents.push(on_route(map, a.id, s, v1, a.desired_speed, a.radius));
    }

    let e = &frame.ego;
    let v1 = (e.speed + control.accel * dt).clamp(0.0, MAX_SPEED);
    let d = 0.5 * (e.speed + v1) * dt;
    let mid = e.heading + 0.5 * control.yaw_rate * dt;
    let position = [e.position[0] + d * mid.cos(), e.position[1] + d * mid.sin()];
    let progress = map.project(position, Some(e.progress)).s;
    let ego = AgentState {
        position,
        heading: wrap_angle(e.heading + control.yaw_rate * dt),
        speed: v1,
        progress,
        ..e.clone()
    };

    SimFrame {
        time_index: frame.time_index + 1,
        ego,
        agents,
        map: map.clone(),
    }
}
