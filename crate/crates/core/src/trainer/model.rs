//! The full planner: encoder, heads and optional world model, plus the
//! batch forward pass that produces every loss term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, Framework};
use super::losses::{compose_loss_pb, compose_loss_pf, perception_loss, waypoint_loss};
use crate::decoders::{perception_targets, PerceptionDecoder, WaypointDecoder, Waypoints};
use crate::encoders::{view_patches, Encoder, VisualLatents};
use crate::error::{Error, Result};
use crate::sim::episode::Episode;
use crate::sim::expert::{ExpertWaypoints, NUM_WAYPOINTS};
use crate::sim::render::{render_views, Raster};
use crate::tensor::{ParameterStore, Tape, Tensor, Var};
use crate::world_model::{latent_loss, WorldModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    /// Perception-only pretraining, or single-frame training before the
    /// history stage.
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Frame `frame` of episode `episode`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Sample {
    pub episode: usize,
    pub frame: usize,
}

/// Values of the logged loss terms; absent terms are exactly zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct LossValues {
    pub total: f64,
    pub latent: f64,
    pub waypoint: f64,
    pub agent: f64,
    pub map: f64,
}

pub struct LawModel {
    pub config: ExperimentConfig,
    pub encoder: Encoder,
    pub planner: WaypointDecoder,
    pub perception: Option<PerceptionDecoder>,
    pub world: Option<WorldModel>,
}

impl LawModel {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dims = config.model;
        Ok(LawModel {
            encoder: Encoder::new(config.framework.latent_kind(), dims)?,
            planner: WaypointDecoder::new(dims)?,
            perception: match config.framework {
                Framework::PerceptionBased => Some(PerceptionDecoder::new(dims)?),
                Framework::PerceptionFree => None,
            },
            world: if config.world_model.enabled {
                Some(WorldModel::new(config.world_model.clone(), dims)?)
            } else {
                None
            },
            config: config.clone(),
        })
    }

    /// Fresh parameters drawn from the config seed.
    pub fn init_params(&self) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        let rng = &mut ChaCha8Rng::seed_from_u64(self.config.seed);
        self.encoder.init(&mut store, rng)?;
        self.planner.init(&mut store, rng)?;
        if let Some(p) = &self.perception {
            p.init(&mut store, rng)?;
        }
        if let Some(w) = &self.world {
            w.init(&mut store, rng)?;
        }
        Ok(store)
    }

    /// Parameters optimised in `stage`.
    pub fn trainable(&self, stage: Stage, name: &str) -> bool {
        match (stage, self.config.framework) {
            (Stage::One, Framework::PerceptionBased) => {
                name.starts_with("encoder.") || name.starts_with("perception.")
            }
            _ => true,
        }
    }

    fn uses_history(&self, stage: Stage) -> bool {
        stage == Stage::Two
            && self
                .world
                .as_ref()
                .is_some_and(|w| w.config.history_frames == 2)
    }

    /// Frames needed after and before a sample in `stage`. A frame trains
    /// only when its whole expert future lies inside the episode, as in
    /// evaluation, so rows of an ablation share their frames unless the
    /// world model looks further ahead than the waypoints.
    pub fn reach(&self, stage: Stage) -> (usize, usize) {
        let wm = &self.config.world_model;
        let world_active = self.world.is_some()
            && !(stage == Stage::One && self.config.framework == Framework::PerceptionBased);
        let world_ahead = if world_active { wm.lookahead() } else { 0 };
        let behind = if self.uses_history(stage) {
            wm.horizon_frames
        } else {
            0
        };
        (world_ahead.max(NUM_WAYPOINTS), behind)
    }

    pub fn sample_fits(&self, episodes: &[Episode], s: Sample, stage: Stage) -> bool {
        let (ahead, behind) = self.reach(stage);
        episodes
            .get(s.episode)
            .is_some_and(|e| s.frame >= behind && s.frame + ahead < e.len())
    }

    fn encode_frames(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        episodes: &[Episode],
        samples: &[Sample],
        offset: isize,
        views: &mut ViewCache,
    ) -> Result<VisualLatents> {
        let mut times = Vec::with_capacity(samples.len());
        for s in samples {
            let t = s.frame as isize + offset;
            if t < 0 || t as usize >= episodes[s.episode].len() {
                return Err(Error::usage(format!(
                    "frame {t} outside episode {} of length {}",
                    s.episode,
                    episodes[s.episode].len()
                )));
            }
            times.push(t as usize);
        }
        let rasters: Vec<&[Raster]> = samples
            .iter()
            .zip(&times)
            .map(|(s, &t)| views.get(episodes, s.episode, t))
            .collect::<Vec<_>>()
            .into_iter()
            .map(|i| views.slot(i))
            .collect();
        let patches = view_patches(&rasters, self.config.model.patch)?;
        self.encoder.encode(tape, store, &patches, times)
    }

    /// Planned waypoints (no gradient needed by the caller for evaluation).
    pub fn predict(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        episodes: &[Episode],
        samples: &[Sample],
    ) -> Result<Waypoints> {
        let mut views = ViewCache::default();
        let v = self.encode_frames(tape, store, episodes, samples, 0, &mut views)?;
        self.plan(tape, store, &v).map(|(w, _)| w)
    }

    /// Planned waypoints from already rendered camera views, one slice of
    /// views per batch item.
    pub fn predict_rasters(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        views: &[&[Raster]],
    ) -> Result<Waypoints> {
        let patches = view_patches(views, self.config.model.patch)?;
        let v = self
            .encoder
            .encode(tape, store, &patches, vec![0; views.len()])?;
        self.plan(tape, store, &v).map(|(w, _)| w)
    }

    fn plan(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        v: &VisualLatents,
    ) -> Result<(Waypoints, Option<crate::decoders::PerceptionOutputs>)> {
        match &self.perception {
            None => Ok((self.planner.decode_pf(tape, store, v)?, None)),
            Some(pd) => {
                let p = pd.decode(tape, store, v)?;
                let w = self.planner.decode_pb(tape, store, &p)?;
                Ok((w, Some(p)))
            }
        }
    }

    /// Builds every loss term for a batch and the total to differentiate.
    pub fn batch_losses(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        episodes: &[Episode],
        samples: &[Sample],
        stage: Stage,
    ) -> Result<(Var, LossValues)> {
        if samples.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        if let Some(s) = samples
            .iter()
            .find(|&&s| !self.sample_fits(episodes, s, stage))
        {
            return Err(Error::usage(format!(
                "sample {s:?} lacks the frames needed in stage {}",
                stage.number()
            )));
        }
        let mut views = ViewCache::default();
        let v = self.encode_frames(tape, store, episodes, samples, 0, &mut views)?;

        if stage == Stage::One && self.config.framework == Framework::PerceptionBased {
            let pd = self.perception.as_ref().expect("perception-based model");
            let p = pd.decode(tape, store, &v)?;
            let targets = samples
                .iter()
                .map(|s| perception_targets(&episodes[s.episode], s.frame))
                .collect::<Result<Vec<_>>>()?;
            let (la, lm) = perception_loss(tape, &p, &targets)?;
            let total = tape.add(la, lm)?;
            let vals = LossValues {
                total: tape.value(total).item(),
                agent: tape.value(la).item(),
                map: tape.value(lm).item(),
                ..Default::default()
            };
            return Ok((total, vals));
        }

        let (wp, perception) = self.plan(tape, store, &v)?;
        let expert = expert_tensor(episodes, samples, 0)?;
        let expert = tape.constant(expert);
        let lw = waypoint_loss(tape, &wp, expert)?;

        let latent = match &self.world {
            None => None,
            Some(world) => Some(self.latent_term(
                tape, store, world, episodes, samples, stage, &v, &wp, &mut views,
            )?),
        };

        let mut vals = LossValues {
            latent: latent.map_or(0.0, |l| tape.value(l).item()),
            waypoint: tape.value(lw).item(),
            ..Default::default()
        };
        let total = match perception {
            None => compose_loss_pf(tape, latent, lw)?,
            Some(p) => {
                let targets = samples
                    .iter()
                    .map(|s| perception_targets(&episodes[s.episode], s.frame))
                    .collect::<Result<Vec<_>>>()?;
                let (la, lm) = perception_loss(tape, &p, &targets)?;
                vals.agent = tape.value(la).item();
                vals.map = tape.value(lm).item();
                let lp = tape.add(la, lm)?;
                compose_loss_pb(tape, latent, lw, lp)?
            }
        };
        vals.total = tape.value(total).item();
        Ok((total, vals))
    }

    #[allow(clippy::too_many_arguments)]
    fn latent_term(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        world: &WorldModel,
        episodes: &[Episode],
        samples: &[Sample],
        stage: Stage,
        v: &VisualLatents,
        wp: &Waypoints,
        views: &mut ViewCache,
    ) -> Result<Var> {
        let wm = &world.config;
        let h = wm.horizon_frames as isize;
        let stop = wm.stop_gradient_target;
        let target = |tape: &mut Tape, views: &mut ViewCache, offset: isize| {
            if stop {
                tape.no_grad(|t| self.encode_frames(t, store, episodes, samples, offset, views))
            } else {
                self.encode_frames(tape, store, episodes, samples, offset, views)
            }
        };

        if self.uses_history(stage) {
            let old = self.encode_frames(tape, store, episodes, samples, -h, views)?;
            let pred = world.step_multiframe(tape, store, &[old, v.clone()], wp)?;
            let tgt = target(tape, views, h)?;
            return latent_loss(tape, &pred, &tgt, stop);
        }

        let steps = wm.autoregressive_steps;
        let mut conditioning = vec![wp.clone()];
        for k in 1..steps {
            let off = h * k as isize;
            let points = tape.constant(expert_tensor(episodes, samples, off)?);
            conditioning.push(Waypoints {
                points,
                times: samples
                    .iter()
                    .map(|s| (s.frame as isize + off) as usize)
                    .collect(),
            });
        }
        let preds = world.rollout_autoregressive(tape, store, v, &conditioning)?;
        let mut terms = Vec::with_capacity(steps);
        for (k, pred) in preds.iter().enumerate() {
            let tgt = target(tape, views, h * (k as isize + 1))?;
            terms.push(latent_loss(tape, pred, &tgt, stop)?);
        }
        if terms.len() == 1 {
            return Ok(terms[0]);
        }
        let mut parts = Vec::with_capacity(terms.len());
        for t in terms {
            parts.push(tape.reshape(t, &[1])?);
        }
        let joined = tape.concat(&parts, 0)?;
        tape.mean(joined)
    }
}

/// Expert waypoints `[B, 6, 2]` at frame offset `offset` of every sample.
pub fn expert_tensor(episodes: &[Episode], samples: &[Sample], offset: isize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(samples.len() * NUM_WAYPOINTS * 2);
    for s in samples {
        let t = (s.frame as isize + offset) as usize;
        let w: &ExpertWaypoints = episodes[s.episode]
            .waypoints
            .get(t)
            .ok_or_else(|| Error::usage(format!("no expert waypoints at frame {t}")))?;
        data.extend(w.iter().flatten());
    }
    Tensor::new(vec![samples.len(), NUM_WAYPOINTS, 2], data)
}

/// Rendered views, each frame rendered once per batch.
#[derive(Default)]
struct ViewCache {
    keys: Vec<(usize, usize)>,
    rasters: Vec<Vec<Raster>>,
}

impl ViewCache {
    fn get(&mut self, episodes: &[Episode], episode: usize, frame: usize) -> usize {
        if let Some(i) = self.keys.iter().position(|&k| k == (episode, frame)) {
            return i;
        }
        self.keys.push((episode, frame));
        self.rasters
            .push(render_views(&episodes[episode].frames[frame]));
        self.keys.len() - 1
    }

    fn slot(&self, i: usize) -> &[Raster] {
        &self.rasters[i]
    }
}
