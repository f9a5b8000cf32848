//! Closed-loop driving on seeded routes: route completion, infraction
//! score and driving score.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::expert::{ExpertWaypoints, EXPERT_TARGET_SPEED, MAX_ROUTE_DISTANCE};
use crate::sim::expert_policy_with;
use crate::sim::render::render_views;
use crate::sim::world::{gen_world, step_world, Control, SimFrame, DT, EGO_START, MAX_BRAKE};
use crate::tensor::{ParameterStore, Tape};
use crate::trainer::LawModel;

/// The route ends this far before the end of the centerline.
pub const GOAL_MARGIN: f64 = 20.0;
pub const COLLISION_PENALTY: f64 = 0.5;
pub const OFFROAD_PENALTY: f64 = 0.7;
/// Repeated infractions of one type inside this window count once.
pub const DEBOUNCE_S: f64 = 2.0;
pub const BLOCKED_SPEED: f64 = 0.1;
pub const BLOCKED_S: f64 = 10.0;
const MAX_YAW_RATE: f64 = 1.5;

fn default_timeout() -> f64 {
    120.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutesConfig {
    pub seeds: Vec<u64>,
    /// Drop all other vehicles from the generated worlds.
    #[serde(default)]
    pub empty: bool,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
}

impl RoutesConfig {
    pub fn new(seeds: Vec<u64>, empty: bool) -> Self {
        RoutesConfig {
            seeds,
            empty,
            timeout_s: default_timeout(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("routes config lists no seeds".into()));
        }
        if !(self.timeout_s > 0.0) {
            return Err(Error::Config("timeout_s must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: RoutesConfig = serde_json::from_str(&text)?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    Timeout,
    Blocked,
    RouteDeviation,
}

impl Termination {
    pub fn name(self) -> &'static str {
        match self {
            Termination::Completed => "completed",
            Termination::Timeout => "timeout",
            Termination::Blocked => "blocked",
            Termination::RouteDeviation => "route_deviation",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RouteResult {
    pub seed: u64,
    pub route_completion: f64,
    pub infraction_score: f64,
    pub driving_score: f64,
    pub collisions: u32,
    pub offroad: u32,
    pub steps: usize,
    pub termination: Termination,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClosedLoopReport {
    pub route_completion: f64,
    pub infraction_score: f64,
    /// Mean of the per-route driving scores.
    pub driving_score: f64,
    pub collisions: u32,
    pub offroad: u32,
    pub routes: Vec<RouteResult>,
}

pub const CLOSED_LOOP_HEADER: &str = "seed,rc,is,ds,collisions,offroad,steps,termination";

impl ClosedLoopReport {
    pub fn from_routes(routes: Vec<RouteResult>) -> Self {
        let n = routes.len().max(1) as f64;
        ClosedLoopReport {
            route_completion: routes.iter().map(|r| r.route_completion).sum::<f64>() / n,
            infraction_score: routes.iter().map(|r| r.infraction_score).sum::<f64>() / n,
            driving_score: routes.iter().map(|r| r.driving_score).sum::<f64>() / n,
            collisions: routes.iter().map(|r| r.collisions).sum(),
            offroad: routes.iter().map(|r| r.offroad).sum(),
            routes,
        }
    }

    /// One row per route and a closing `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CLOSED_LOOP_HEADER}\n");
        for r in &self.routes {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.seed,
                r.route_completion,
                r.infraction_score,
                r.driving_score,
                r.collisions,
                r.offroad,
                r.steps,
                r.termination.name()
            );
        }
        let _ = writeln!(
            s,
            "mean,{},{},{},{},{},,",
            self.route_completion,
            self.infraction_score,
            self.driving_score,
            self.collisions,
            self.offroad
        );
        s
    }
}

pub fn driving_score(route_completion: f64, infraction_score: f64) -> f64 {
    route_completion * infraction_score
}

pub fn infraction_score(collisions: u32, offroad: u32) -> f64 {
    COLLISION_PENALTY.powi(collisions as i32) * OFFROAD_PENALTY.powi(offroad as i32)
}

/// Anything that plans waypoints from the current world state.
pub trait Policy {
    fn plan(&mut self, frame: &SimFrame) -> Result<ExpertWaypoints>;
}

/// The privileged expert that generated the training data.
pub struct ExpertDriver {
    pub target_speed: f64,
}

impl Default for ExpertDriver {
    fn default() -> Self {
        ExpertDriver {
            target_speed: EXPERT_TARGET_SPEED,
        }
    }
}

impl Policy for ExpertDriver {
    fn plan(&mut self, frame: &SimFrame) -> Result<ExpertWaypoints> {
        expert_policy_with(frame, self.target_speed)
    }
}

/// Always plans to stay where it is.
pub struct Stationary;

impl Policy for Stationary {
    fn plan(&mut self, _: &SimFrame) -> Result<ExpertWaypoints> {
        Ok(Default::default())
    }
}

/// A trained planner fed rendered camera views.
pub struct ModelDriver<'a> {
    pub model: &'a LawModel,
    pub store: &'a ParameterStore,
}

impl Policy for ModelDriver<'_> {
    fn plan(&mut self, frame: &SimFrame) -> Result<ExpertWaypoints> {
        let views = render_views(frame);
        let mut tape = Tape::new();
        let w = tape.no_grad(|t| self.model.predict_rasters(t, self.store, &[&views]))?;
        let d = tape.value(w.points).data();
        let mut out = ExpertWaypoints::default();
        for (j, p) in out.iter_mut().enumerate() {
            *p = [d[2 * j], d[2 * j + 1]];
        }
        Ok(out)
    }
}

/// Controls that bring a unicycle at speed `v0` to the first waypoint in
/// one step: the chord direction fixes the yaw rate and the chord length
/// the mean speed.
pub fn unicycle_fit(first: [f64; 2], v0: f64) -> Control {
    let [x, y] = first;
    let yaw_rate = if x == 0.0 && y == 0.0 {
        0.0
    } else {
        (2.0 * y.atan2(x) / DT).clamp(-MAX_YAW_RATE, MAX_YAW_RATE)
    };
    let d = (x * x + y * y).sqrt();
    let v1 = 2.0 * d / DT - v0;
    let accel = ((v1 - v0) / DT).clamp(-MAX_BRAKE, MAX_BRAKE);
    Control { accel, yaw_rate }
}

/// Drives one route to completion, timeout, blockage or route deviation.
pub fn run_route(policy: &mut dyn Policy, seed: u64, routes: &RoutesConfig) -> Result<RouteResult> {
    let (map, mut frame) = gen_world(seed);
    if routes.empty {
        frame.agents.clear();
    }
    let goal = map.length() - GOAL_MARGIN;
    let max_steps = (routes.timeout_s / DT).round() as usize;
    let debounce = (DEBOUNCE_S / DT).round() as usize;
    let blocked_steps = (BLOCKED_S / DT).round() as usize;

    let (mut collisions, mut offroad) = (0u32, 0u32);
    let (mut last_collision, mut last_offroad) = (None::<usize>, None::<usize>);
    let mut slow_for = 0;
    let mut steps = 0;
    let termination = loop {
        if frame.ego.progress >= goal {
            break Termination::Completed;
        }
        if steps >= max_steps {
            break Termination::Timeout;
        }
        if slow_for >= blocked_steps {
            break Termination::Blocked;
        }
        if map.distance_to_route(frame.ego.position) > MAX_ROUTE_DISTANCE {
            break Termination::RouteDeviation;
        }
        let wp = policy.plan(&frame)?;
        frame = step_world(&frame, unicycle_fit(wp[0], frame.ego.speed), DT);
        steps += 1;

        if frame.ego_collides() && last_collision.is_none_or(|t| steps - t >= debounce) {
            collisions += 1;
            last_collision = Some(steps);
        }
        if !map.drivable(frame.ego.position) && last_offroad.is_none_or(|t| steps - t >= debounce) {
            offroad += 1;
            last_offroad = Some(steps);
        }
        slow_for = if frame.ego.speed < BLOCKED_SPEED {
            slow_for + 1
        } else {
            0
        };
    };

    let rc = ((frame.ego.progress - EGO_START) / (goal - EGO_START)).clamp(0.0, 1.0);
    let is = infraction_score(collisions, offroad);
    Ok(RouteResult {
        seed,
        route_completion: rc,
        infraction_score: is,
        driving_score: driving_score(rc, is),
        collisions,
        offroad,
        steps,
        termination,
    })
}

pub fn closed_loop_eval(
    policy: &mut dyn Policy,
    routes: &RoutesConfig,
) -> Result<ClosedLoopReport> {
    routes.validate()?;
    let results = routes
        .seeds
        .iter()
        .map(|&s| run_route(policy, s, routes))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClosedLoopReport::from_routes(results))
}
