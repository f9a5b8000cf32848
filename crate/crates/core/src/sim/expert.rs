use super::world::{idm_accel, step_world, Control, SimFrame, DT};
use crate::error::{Error, Result};

/// Number of future waypoints.
pub const NUM_WAYPOINTS: usize = 6;
pub const EXPERT_TARGET_SPEED: f64 = 8.0;
/// Beyond this distance from the centerline the expert gives up.
pub const MAX_ROUTE_DISTANCE: f64 = 10.0;
const MAX_YAW_RATE: f64 = 1.5;

/// Future ego positions in the ego frame, x forward and y left, at
/// [`DT`] spacing.
pub type ExpertWaypoints = [[f64; 2]; NUM_WAYPOINTS];

/// One control step of the lane follower: IDM on the ego's leader for
/// speed, pure pursuit on the centerline for steering.
pub fn expert_control(frame: &SimFrame, target_speed: f64) -> Result<Control> {
    let ego = &frame.ego;
    let map = &frame.map;
    let proj = map.project(ego.position, Some(ego.progress));
    if proj.distance > MAX_ROUTE_DISTANCE {
        return Err(Error::OffRoute {
            distance: proj.distance,
        });
    }
    let leader = frame.ego_leader().map(|(l, gap)| (gap, l.speed));
    let accel = idm_accel(ego.speed, target_speed, leader);
    let v1 = (ego.speed + accel * DT).clamp(0.0, super::world::MAX_SPEED);
    let v_avg = 0.5 * (ego.speed + v1);

    let lookahead = 4.0 + 0.8 * ego.speed;
    let goal = ego.to_local(map.point_at(proj.s + lookahead));
    let d2 = goal[0] * goal[0] + goal[1] * goal[1];
    let curvature = if d2 > 1e-9 { 2.0 * goal[1] / d2 } else { 0.0 };
    let yaw_rate = (curvature * v_avg).clamp(-MAX_YAW_RATE, MAX_YAW_RATE);
    Ok(Control { accel, yaw_rate })
}

/// Expert waypoints at the default target speed.
pub fn expert_policy(frame: &SimFrame) -> Result<ExpertWaypoints> {
    expert_policy_with(frame, EXPERT_TARGET_SPEED)
}

/// Rolls the expert forward on a private copy of the world and returns
/// its positions in the current ego frame.
pub fn expert_policy_with(frame: &SimFrame, target_speed: f64) -> Result<ExpertWaypoints> {
    let mut sim = frame.clone();
    let mut out = [[0.0; 2]; NUM_WAYPOINTS];
    for w in out.iter_mut() {
        let c = expert_control(&sim, target_speed)?;
        sim = step_world(&sim, c, DT);
        *w = frame.ego.to_local(sim.ego.position);
    }
    Ok(out)
}
