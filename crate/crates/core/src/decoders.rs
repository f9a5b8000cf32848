//! Waypoint and perception heads over visual latents.

use rand::Rng;

use crate::encoders::{LatentKind, ModelDims, VisualLatents};
use crate::error::{Error, Result};
use crate::nn::{batched_queries, init_queries, Attention, Mlp2};
use crate::sim::episode::Episode;
use crate::sim::expert::NUM_WAYPOINTS;
use crate::tensor::{ParameterStore, Tape, Tensor, Var};

/// Metres per unit of head output. Heads regress positions in units of
/// this scale so that small initial weights still reach the targets.
pub const POSITION_SCALE: f64 = 10.0;
pub const AGENT_QUERIES: usize = 8;
pub const MAP_QUERIES: usize = 4;
pub const MAP_POINTS: usize = 10;
pub const MAP_SPACING: f64 = 2.0;

/// A batch of predicted waypoints, `[B, M, 2]` in metres.
#[derive(Clone, Debug, PartialEq)]
pub struct Waypoints {
    pub points: Var,
    pub times: Vec<usize>,
}

/// Query pooling over a key set followed by a per-query MLP head.
#[derive(Clone, Debug)]
pub struct QueryHead {
    pub queries: String,
    pub rows: usize,
    pub attn: Attention,
    pub head: Mlp2,
}

impl QueryHead {
    pub fn new(prefix: &str, rows: usize, d_out: usize, dims: ModelDims) -> Result<Self> {
        Ok(QueryHead {
            queries: format!("{prefix}.queries"),
            rows,
            attn: Attention::new(&format!("{prefix}.attn"), dims.d, dims.heads)?,
            head: Mlp2::new(&format!("{prefix}.head"), dims.d, dims.d, d_out),
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        init_queries(store, rng, &self.queries, self.rows, self.attn.d)?;
        self.attn.init(store, rng)?;
        self.head.init(store, rng)
    }

    /// Query features `[B, rows, D]` and head outputs `[B, rows, d_out]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        keys: Var,
    ) -> Result<(Var, Var)> {
        let b = tape.shape(keys)[0];
        let q = batched_queries(tape, store, &self.queries, b)?;
        let f = self.attn.forward(tape, store, q, keys, keys)?;
        let out = self.head.forward(tape, store, f)?;
        Ok((f, out))
    }
}

/// Waypoint queries attending to a key set, one `(x, y)` per query.
#[derive(Clone, Debug)]
pub struct WaypointDecoder {
    pub head: QueryHead,
}

impl WaypointDecoder {
    pub fn new(dims: ModelDims) -> Result<Self> {
        Ok(WaypointDecoder {
            head: QueryHead::new("planner.wp", NUM_WAYPOINTS, 2, dims)?,
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.head.init(store, rng)
    }

    fn decode(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        keys: Var,
        times: Vec<usize>,
    ) -> Result<Waypoints> {
        let (_, out) = self.head.forward(tape, store, keys)?;
        Ok(Waypoints {
            points: tape.scale(out, POSITION_SCALE)?,
            times,
        })
    }

    /// Perception-free decoding straight from per-view latents.
    pub fn decode_pf(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        latents: &VisualLatents,
    ) -> Result<Waypoints> {
        if latents.kind != LatentKind::Perspective {
            return Err(Error::usage(
                "perception-free decoding needs perspective latents",
            ));
        }
        self.decode(tape, store, latents.vectors, latents.times.clone())
    }

    /// Perception-based decoding from the joint agent and map features.
    pub fn decode_pb(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        p: &PerceptionOutputs,
    ) -> Result<Waypoints> {
        let keys = tape.concat(&[p.agent_features, p.map_features], 1)?;
        self.decode(tape, store, keys, p.times.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerceptionOutputs {
    /// `[B, 8, D]`
    pub agent_features: Var,
    /// `[B, 8, 6, 2]`
    pub agent_trajectories: Var,
    /// `[B, 4, D]`
    pub map_features: Var,
    /// `[B, 4, 10, 2]`
    pub map_polylines: Var,
    pub times: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct PerceptionDecoder {
    pub agents: QueryHead,
    pub map: QueryHead,
}

impl PerceptionDecoder {
    pub fn new(dims: ModelDims) -> Result<Self> {
        Ok(PerceptionDecoder {
            agents: QueryHead::new("perception.agent", AGENT_QUERIES, NUM_WAYPOINTS * 2, dims)?,
            map: QueryHead::new("perception.map", MAP_QUERIES, MAP_POINTS * 2, dims)?,
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.agents.init(store, rng)?;
        self.map.init(store, rng)
    }

    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        latents: &VisualLatents,
    ) -> Result<PerceptionOutputs> {
        if latents.kind != LatentKind::Bev {
            return Err(Error::usage("perception decoding needs BEV latents"));
        }
        let b = tape.shape(latents.vectors)[0];
        let (af, at) = self.agents.forward(tape, store, latents.vectors)?;
        let at = tape.reshape(at, &[b, AGENT_QUERIES, NUM_WAYPOINTS, 2])?;
        let (mf, mp) = self.map.forward(tape, store, latents.vectors)?;
        let mp = tape.reshape(mp, &[b, MAP_QUERIES, MAP_POINTS, 2])?;
        Ok(PerceptionOutputs {
            agent_features: af,
            agent_trajectories: tape.scale(at, POSITION_SCALE)?,
            map_features: mf,
            map_polylines: tape.scale(mp, POSITION_SCALE)?,
            times: latents.times.clone(),
        })
    }
}

/// Supervision for the perception heads at one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptionTargets {
    /// `[8, 6, 2]` future agent positions in the current ego frame.
    pub agents: Tensor,
    /// One weight per agent point, 1 where the agent exists at that step.
    pub agent_mask: Vec<f64>,
    /// `[4, 10, 2]`: centerline, left boundary, right boundary, then the
    /// following centerline stretch.
    pub map: Tensor,
}

/// Targets for frame `t` of `episode`. Agents are assigned to queries by
/// distance to the ego, ties broken by id.
pub fn perception_targets(episode: &Episode, t: usize) -> Result<PerceptionTargets> {
    if t + NUM_WAYPOINTS >= episode.len() {
        return Err(Error::usage(format!(
            "frame {t} lacks {NUM_WAYPOINTS} future frames in an episode of {}",
            episode.len()
        )));
    }
    let frame = &episode.frames[t];
    let ego = &frame.ego;

    let mut order: Vec<(f64, u32)> = frame
        .agents
        .iter()
        .map(|a| {
            let d = (a.position[0] - ego.position[0]).hypot(a.position[1] - ego.position[1]);
            (d, a.id)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut agents = vec![0.0; AGENT_QUERIES * NUM_WAYPOINTS * 2];
    let mut mask = vec![0.0; AGENT_QUERIES * NUM_WAYPOINTS];
    for (q, &(_, id)) in order.iter().take(AGENT_QUERIES).enumerate() {
        for k in 0..NUM_WAYPOINTS {
            let future = &episode.frames[t + k + 1];
            if let Some(a) = future.agents.iter().find(|a| a.id == id) {
                let p = ego.to_local(a.position);
                let i = q * NUM_WAYPOINTS + k;
                agents[2 * i] = p[0];
                agents[2 * i + 1] = p[1];
                mask[i] = 1.0;
            }
        }
    }

    let map = &frame.map;
    let s0 = map.project(ego.position, Some(ego.progress)).s;
    let half = map.lane_width() / 2.0;
    let mut lines = Vec::with_capacity(MAP_QUERIES * MAP_POINTS * 2);
    let stretch = MAP_POINTS as f64 * MAP_SPACING;
    for (start, offset) in [(0.0, 0.0), (0.0, half), (0.0, -half), (stretch, 0.0)] {
        for j in 0..MAP_POINTS {
            let s = s0 + start + j as f64 * MAP_SPACING;
            let c = map.point_at(s);
            let h = map.heading_at(s);
            let p = [c[0] - offset * h.sin(), c[1] + offset * h.cos()];
            lines.extend(ego.to_local(p));
        }
    }
    Ok(PerceptionTargets {
        agents: Tensor::new(vec![AGENT_QUERIES, NUM_WAYPOINTS, 2], agents)?,
        agent_mask: mask,
        map: Tensor::new(vec![MAP_QUERIES, MAP_POINTS, 2], lines)?,
    })
}
