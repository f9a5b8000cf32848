use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::expert::{expert_control, expert_policy_with, ExpertWaypoints, EXPERT_TARGET_SPEED};
use super::map::LaneMap;
use super::world::{gen_world, step_world, SimFrame, DT};
use crate::error::{Error, Result};

/// Regeneration attempts per episode before giving up.
const MAX_ATTEMPTS: u64 = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub episodes: usize,
    #[serde(default = "default_frames")]
    pub frames_per_episode: usize,
    pub seed: u64,
    #[serde(default = "default_target")]
    pub expert_target_speed: f64,
    /// Whether dataset files carry the rendered observations. Readers
    /// never need them since rendering is deterministic.
    #[serde(default = "default_rasters")]
    pub include_rasters: bool,
}

fn default_frames() -> usize {
    40
}

fn default_target() -> f64 {
    EXPERT_TARGET_SPEED
}

fn default_rasters() -> bool {
    true
}

impl DatasetConfig {
    pub fn new(episodes: usize, seed: u64) -> Self {
        DatasetConfig {
            episodes,
            frames_per_episode: default_frames(),
            seed,
            expert_target_speed: default_target(),
            include_rasters: default_rasters(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.frames_per_episode < 2 {
            return Err(Error::Config(
                "dataset needs at least one episode of two frames".into(),
            ));
        }
        if !(self.expert_target_speed > 0.0) {
            return Err(Error::Config("expert target speed must be positive".into()));
        }
        Ok(())
    }

    /// Seed of episode `i`.
    pub fn episode_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add(i as u64)
    }
}

/// An expert demonstration: consecutive frames and the expert's waypoints
/// at each of them.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub seed: u64,
    /// Seed actually used to build the world, differs from `seed` after a
    /// regeneration.
    pub world_seed: u64,
    pub frames: Vec<SimFrame>,
    pub waypoints: Vec<ExpertWaypoints>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn map(&self) -> &Arc<LaneMap> {
        &self.frames[0].map
    }

    /// Held-out episodes have odd seeds.
    pub fn is_eval(&self) -> bool {
        self.seed % 2 == 1
    }
}

pub fn is_train_seed(seed: u64) -> bool {
    seed.is_multiple_of(2)
}

/// Deterministic mix of an episode seed and a retry counter.
pub fn sub_seed(seed: u64, attempt: u64) -> u64 {
    if attempt == 0 {
        return seed;
    }
    let mut z = seed ^ attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Drives the expert through a world. `None` if it collides, leaves the
/// drivable area or loses the route.
pub fn rollout_expert(
    world_seed: u64,
    frames: usize,
    target_speed: f64,
) -> Option<(Vec<SimFrame>, Vec<ExpertWaypoints>)> {
    let (_, mut frame) = gen_world(world_seed);
    let mut out_frames = Vec::with_capacity(frames);
    let mut wps = Vec::with_capacity(frames);
    for _ in 0..frames {
        if frame.ego_collides() || !frame.map.drivable(frame.ego.position) {
            return None;
        }
        wps.push(expert_policy_with(&frame, target_speed).ok()?);
        let c = expert_control(&frame, target_speed).ok()?;
        let next = step_world(&frame, c, DT);
        out_frames.push(frame);
        frame = next;
    }
    Some((out_frames, wps))
}

/// Episode for `seed`, regenerating with sub-seeds on expert violations.
/// Returns the episode and the number of rejected attempts.
pub fn generate_episode(seed: u64, frames: usize, target_speed: f64) -> Result<(Episode, usize)> {
    for attempt in 0..MAX_ATTEMPTS {
        let world_seed = sub_seed(seed, attempt);
        if let Some((frames, waypoints)) = rollout_expert(world_seed, frames, target_speed) {
            let ep = Episode {
                seed,
                world_seed,
                frames,
                waypoints,
            };
            return Ok((ep, attempt as usize));
        }
    }
    Err(Error::Config(format!(
        "episode {seed}: expert failed in {MAX_ATTEMPTS} worlds"
    )))
}

/// All episodes of a dataset config and the total violation count.
pub fn generate_episodes(config: &DatasetConfig) -> Result<(Vec<Episode>, usize)> {
    config.validate()?;
    let mut violations = 0;
    let mut eps = Vec::with_capacity(config.episodes);
    for i in 0..config.episodes {
        let (ep, v) = generate_episode(
            config.episode_seed(i),
            config.frames_per_episode,
            config.expert_target_speed,
        )?;
        violations += v;
        eps.push(ep);
    }
    Ok((eps, violations))
}
