//! Dataset file: magic `LAWD`, u32 version, u32 episode count and the
//! u32-length-prefixed canonical JSON generation config. Each episode is
//! its seed and world seed (u64), a u32 frame count and per frame:
//!
//! - u32 time index, the ego state, u32 agent count, the agent states
//!   (each state is 8 little-endian f64: id, x, y, heading, speed, radius,
//!   progress, desired speed)
//! - when the config asks for them, the four views and the BEV raster as
//!   little-endian f32 in row-major `[H, W, C]` order
//! - the expert waypoints as 12 f64.
//!
//! Maps are rebuilt from the world seed on load, and the stored rasters
//! are checked for size only.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::sim::episode::{generate_episodes, DatasetConfig, Episode};
use crate::sim::expert::{ExpertWaypoints, NUM_WAYPOINTS};
use crate::sim::map::LaneMap;
use crate::sim::render::{render_observation, CHANNELS, NUM_VIEWS, RASTER_SIZE};
use crate::sim::world::{gen_world, AgentState, SimFrame};

pub const DATASET_MAGIC: &[u8; 4] = b"LAWD";
pub const DATASET_VERSION: u32 = 1;
const STATE_FIELDS: usize = 8;
const RASTER_BYTES: usize = (NUM_VIEWS + 1) * RASTER_SIZE * RASTER_SIZE * CHANNELS * 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub episodes: Vec<Episode>,
}

fn write_state(w: &mut Writer, a: &AgentState) {
    for v in [
        a.id as f64,
        a.position[0],
        a.position[1],
        a.heading,
        a.speed,
        a.radius,
        a.progress,
        a.desired_speed,
    ] {
        w.f64(v);
    }
}

fn read_state(r: &mut Reader) -> Result<AgentState> {
    let at = r.offset();
    let mut v = [0.0; STATE_FIELDS];
    for x in &mut v {
        *x = r.f64("state value")?;
    }
    if v[0] < 0.0 || v[0].fract() != 0.0 || v[0] > u32::MAX as f64 {
        return Err(Error::Format {
            offset: at,
            expected: "integral agent id".into(),
            found: v[0].to_string(),
        });
    }
    Ok(AgentState {
        id: v[0] as u32,
        position: [v[1], v[2]],
        heading: v[3],
        speed: v[4],
        radius: v[5],
        progress: v[6],
        desired_speed: v[7],
    })
}

fn write_episode(w: &mut Writer, ep: &Episode, rasters: bool) {
    w.u64(ep.seed);
    w.u64(ep.world_seed);
    w.u32(ep.len() as u32);
    for (f, wp) in ep.frames.iter().zip(&ep.waypoints) {
        w.u32(f.time_index as u32);
        write_state(w, &f.ego);
        w.u32(f.agents.len() as u32);
        for a in &f.agents {
            write_state(w, a);
        }
        if rasters {
            let obs = render_observation(f);
            for r in obs.views.iter().chain([&obs.bev]) {
                for &v in &r.data {
                    w.f32(v);
                }
            }
        }
        for v in wp.iter().flatten() {
            w.f64(*v);
        }
    }
}

fn read_episode(r: &mut Reader, rasters: bool) -> Result<Episode> {
    let seed = r.u64("episode seed")?;
    let world_seed = r.u64("world seed")?;
    let n = r.u32("frame count")? as usize;
    let map: Arc<LaneMap> = gen_world(world_seed).0;
    let mut frames = Vec::with_capacity(n.min(4096));
    let mut waypoints = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let time_index = r.u32("time index")? as usize;
        let ego = read_state(r)?;
        let k = r.u32("agent count")? as usize;
        let agents = (0..k).map(|_| read_state(r)).collect::<Result<Vec<_>>>()?;
        if rasters {
            r.take(RASTER_BYTES, "observation rasters")?;
        }
        let mut wp: ExpertWaypoints = [[0.0; 2]; NUM_WAYPOINTS];
        for p in &mut wp {
            *p = [r.f64("waypoint")?, r.f64("waypoint")?];
        }
        frames.push(SimFrame {
            time_index,
            ego,
            agents,
            map: map.clone(),
        });
        waypoints.push(wp);
    }
    Ok(Episode {
        seed,
        world_seed,
        frames,
        waypoints,
    })
}

impl Dataset {
    /// Generates every episode of `config`; also returns the number of
    /// rejected expert rollouts.
    pub fn generate(config: &DatasetConfig) -> Result<(Self, usize)> {
        let (episodes, violations) = generate_episodes(config)?;
        Ok((
            Dataset {
                config: config.clone(),
                episodes,
            },
            violations,
        ))
    }

    fn header(&self) -> Writer {
        let mut w = Writer::default();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.u32(self.episodes.len() as u32);
        w.text32(&serde_json::to_string(&self.config).expect("config serializes"));
        w
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = self.header();
        for ep in &self.episodes {
            write_episode(&mut w, ep, self.config.include_rasters);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        r.version(DATASET_VERSION)?;
        let count = r.u32("episode count")? as usize;
        let at = r.offset();
        let json = r.text32("generation config")?;
        let config: DatasetConfig = serde_json::from_str(json).map_err(|e| Error::Format {
            offset: at,
            expected: "dataset generation config".into(),
            found: e.to_string(),
        })?;
        let episodes = (0..count)
            .map(|_| read_episode(&mut r, config.include_rasters))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Dataset { config, episodes })
    }

    /// Streams episodes to disk one at a time.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        out.write_all(&self.header().buf).map_err(io)?;
        for ep in &self.episodes {
            let mut w = Writer::default();
            write_episode(&mut w, ep, self.config.include_rasters);
            out.write_all(&w.buf).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(rasters: bool) -> Dataset {
        let cfg = DatasetConfig {
            frames_per_episode: 8,
            include_rasters: rasters,
            ..DatasetConfig::new(3, 5)
        };
        Dataset::generate(&cfg).unwrap().0
    }

    #[test]
    fn round_trip_is_exact() {
        for rasters in [false, true] {
            let d = small(rasters);
            let bytes = d.to_bytes();
            let back = Dataset::from_bytes(&bytes).unwrap();
            assert_eq!(back, d);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn truncation_and_version_are_reported() {
        let bytes = small(false).to_bytes();
        let cut = bytes.len() - 5;
        match Dataset::from_bytes(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
            other => panic!("{other:?}"),
        }
        let mut bumped = bytes.clone();
        bumped[4] = 2;
        let err = Dataset::from_bytes(&bumped).unwrap_err().to_string();
        assert!(
            err.contains("version 1") && err.contains("version 2"),
            "{err}"
        );
    }
}
