//! Deterministic 2D driving micro-simulator.

pub mod episode;
pub mod expert;
pub mod map;
pub mod render;
pub mod world;

pub use episode::{generate_episode, generate_episodes, DatasetConfig, Episode};
pub use expert::{
    expert_control, expert_policy, expert_policy_with, ExpertWaypoints, NUM_WAYPOINTS,
};
pub use map::LaneMap;
pub use render::{render_observation, render_views, Observation, Raster, ViewGeometry};
pub use world::{gen_world, step_world, AgentState, Control, SimFrame, DT};
