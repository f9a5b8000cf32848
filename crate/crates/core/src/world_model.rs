//! Latent world model: fuses visual latents with the planned trajectory
//! and predicts the latents of a future frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoders::{Waypoints, POSITION_SCALE};
use crate::encoders::{ModelDims, VisualLatents};
use crate::error::{Error, Result};
use crate::nn::{normal_table, BlockStack, Linear, Mlp2};
use crate::sim::expert::NUM_WAYPOINTS;
use crate::tensor::{ParameterStore, Tape, Tensor, Var};

/// Depth of the transformer predictor, independent of the encoder depth.
pub const TRANSFORMER_BLOCKS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    Mlp2,
    Transformer,
}

/// What the world model is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldInputs {
    /// Waypoint vector replaced by zeros; the fusion MLP is kept.
    LatentsOnly,
    LatentsAndTrajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldModelConfig {
    pub enabled: bool,
    pub inputs: WorldInputs,
    pub architecture: Architecture,
    pub horizon_frames: usize,
    /// 1, or 2 for the variant fed the latents of frame `t - h` as well.
    pub history_frames: usize,
    pub autoregressive_steps: usize,
    pub stop_gradient_target: bool,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        WorldModelConfig {
            enabled: true,
            inputs: WorldInputs::LatentsAndTrajectory,
            architecture: Architecture::Transformer,
            horizon_frames: 3,
            history_frames: 1,
            autoregressive_steps: 1,
            stop_gradient_target: true,
        }
    }
}

impl WorldModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon_frames == 0 {
            return Err(Error::Config("horizon_frames must be at least 1".into()));
        }
        if !(1..=2).contains(&self.history_frames) {
            return Err(Error::Config("history_frames must be 1 or 2".into()));
        }
        if self.autoregressive_steps == 0 {
            return Err(Error::Config(
                "autoregressive_steps must be at least 1".into(),
            ));
        }
        if self.history_frames == 2 && self.autoregressive_steps > 1 {
            return Err(Error::Config(
                "history input and autoregressive rollout cannot be combined".into(),
            ));
        }
        Ok(())
    }

    /// Future frames a training sample needs beyond its own.
    pub fn lookahead(&self) -> usize {
        if self.enabled {
            self.horizon_frames * self.autoregressive_steps
        } else {
            0
        }
    }

    /// Past frames a training sample needs.
    pub fn lookback(&self) -> usize {
        if self.enabled && self.history_frames == 2 {
            self.horizon_frames
        } else {
            0
        }
    }
}

#[derive(Clone, Debug)]
pub enum Predictor {
    Linear(Linear),
    Mlp2(Mlp2),
    Transformer(BlockStack),
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub config: WorldModelConfig,
    pub d: usize,
    pub fusion: Mlp2,
    pub predictor: Predictor,
    pub frame_embed: Option<String>,
}

impl WorldModel {
    pub fn new(config: WorldModelConfig, dims: ModelDims) -> Result<Self> {
        config.validate()?;
        let d = dims.d;
        let predictor = match config.architecture {
            Architecture::Linear => Predictor::Linear(Linear::new("world.linear", d, d)),
            Architecture::Mlp2 => Predictor::Mlp2(Mlp2::new("world.mlp", d, 4 * d, d)),
            Architecture::Transformer => Predictor::Transformer(BlockStack::new(
                "world.blocks",
                TRANSFORMER_BLOCKS,
                d,
                dims.heads,
            )?),
        };
        Ok(WorldModel {
            frame_embed: (config.history_frames == 2).then(|| "world.frame_embed".to_string()),
            config,
            d,
            fusion: Mlp2::new("world.fusion", d + 2 * NUM_WAYPOINTS, d, d),
            predictor,
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.fusion.init(store, rng)?;
        match &self.predictor {
            Predictor::Linear(l) => l.init(store, rng)?,
            Predictor::Mlp2(m) => m.init(store, rng)?,
            Predictor::Transformer(b) => b.init(store, rng)?,
        }
        if let Some(name) = &self.frame_embed {
            store.insert(name.clone(), normal_table(rng, 2, self.d, 0.02))?;
        }
        Ok(())
    }

    /// `[B, L, D]` latents fused row by row with the flattened waypoints.
    pub fn make_action_aware(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        latents: &VisualLatents,
        waypoints: &Waypoints,
    ) -> Result<Var> {
        if latents.times != waypoints.times {
            return Err(Error::usage(
                "latents and waypoints come from different frames",
            ));
        }
        self.fuse(tape, store, latents.vectors, waypoints.points)
    }

    fn fuse(&self, tape: &mut Tape, store: &ParameterStore, v: Var, wp: Var) -> Result<Var> {
        let s = tape.shape(v).to_vec();
        if s.len() != 3 || s[2] != self.d || tape.shape(wp) != [s[0], NUM_WAYPOINTS, 2] {
            return Err(Error::shape("action-aware fusion", &s, tape.shape(wp)));
        }
        let (b, l) = (s[0], s[1]);
        let w = match self.config.inputs {
            WorldInputs::LatentsAndTrajectory => {
                let w = tape.reshape(wp, &[b, 2 * NUM_WAYPOINTS])?;
                tape.scale(w, 1.0 / POSITION_SCALE)?
            }
            WorldInputs::LatentsOnly => tape.constant(Tensor::zeros(&[b, 2 * NUM_WAYPOINTS])),
        };
        let w = tape.repeat(w, l)?;
        let w = tape.transpose(w, 0, 1)?;
        let x = tape.concat(&[v, w], 2)?;
        self.fusion.forward(tape, store, x)
    }

    /// Applies the configured predictor; shape preserved.
    pub fn predict_future(&self, tape: &mut Tape, store: &ParameterStore, a: Var) -> Result<Var> {
        match &self.predictor {
            Predictor::Linear(l) => l.forward(tape, store, a),
            Predictor::Mlp2(m) => m.forward(tape, store, a),
            Predictor::Transformer(b) => b.forward(tape, store, a),
        }
    }

    /// One prediction `h` frames ahead.
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        latents: &VisualLatents,
        waypoints: &Waypoints,
    ) -> Result<VisualLatents> {
        let a = self.make_action_aware(tape, store, latents, waypoints)?;
        let vectors = self.predict_future(tape, store, a)?;
        Ok(VisualLatents {
            vectors,
            kind: latents.kind,
            times: shifted(&latents.times, self.config.horizon_frames),
        })
    }

    /// Feeds each prediction back as the next input, conditioned on
    /// `waypoints[k]` at step `k`. The same parameters serve every step.
    pub fn rollout_autoregressive(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        latents: &VisualLatents,
        waypoints: &[Waypoints],
    ) -> Result<Vec<VisualLatents>> {
        if waypoints.is_empty() {
            return Err(Error::usage("rollout needs at least one step"));
        }
        let mut out: Vec<VisualLatents> = Vec::with_capacity(waypoints.len());
        for wp in waypoints {
            let cur = out.last().unwrap_or(latents);
            let next = self.step(tape, store, cur, wp)?;
            out.push(next);
        }
        Ok(out)
    }

    /// Prediction from two history frames, ordered old to new and `h`
    /// frames apart. Each frame gets its index embedding before fusion; the
    /// predictor runs over all `2L` rows and the rows of the newest frame
    /// are returned.
    pub fn step_multiframe(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        history: &[VisualLatents],
        waypoints: &Waypoints,
    ) -> Result<VisualLatents> {
        let name = self
            .frame_embed
            .as_ref()
            .ok_or_else(|| Error::usage("world model was built without history input"))?;
        let [old, new] = history else {
            return Err(Error::usage(format!(
                "history must hold 2 frames, got {}",
                history.len()
            )));
        };
        let h = self.config.horizon_frames;
        if old.times.iter().zip(&new.times).any(|(o, n)| o + h != *n)
            || new.times != waypoints.times
        {
            return Err(Error::usage(format!(
                "history frames must be {h} frames apart"
            )));
        }
        let table = tape.param(store, name)?;
        let mut fused = Vec::with_capacity(2);
        for (i, lat) in [old, new].into_iter().enumerate() {
            let e = tape.gather(table, &[i])?;
            let e = tape.reshape(e, &[self.d])?;
            let v = tape.add_bias(lat.vectors, e)?;
            fused.push(self.fuse(tape, store, v, waypoints.points)?);
        }
        let l = tape.shape(new.vectors)[1];
        let x = tape.concat(&fused, 1)?;
        let y = self.predict_future(tape, store, x)?;
        let vectors = tape.slice(y, 1, l, l)?;
        Ok(VisualLatents {
            vectors,
            kind: new.kind,
            times: shifted(&new.times, h),
        })
    }
}

fn shifted(times: &[usize], h: usize) -> Vec<usize> {
    times.iter().map(|t| t + h).collect()
}

/// Mean squared error over all `B·L·D` elements. With `stop_gradient` the
/// target is detached first.
pub fn latent_loss(
    tape: &mut Tape,
    pred: &VisualLatents,
    target: &VisualLatents,
    stop_gradient: bool,
) -> Result<Var> {
    if pred.times != target.times {
        return Err(Error::usage(format!(
            "predicted frames {:?} do not match target frames {:?}",
            pred.times, target.times
        )));
    }
    let t = if stop_gradient {
        tape.detach(target.vectors)
    } else {
        target.vectors
    };
    tape.mse_loss(pred.vectors, t)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::encoders::LatentKind;

    fn dims() -> ModelDims {
        ModelDims {
            d: 32,
            heads: 4,
            blocks: 2,
            patch: 16,
        }
    }

    fn build(arch: Architecture, history: usize) -> (WorldModel, ParameterStore) {
        let cfg = WorldModelConfig {
            architecture: arch,
            history_frames: history,
            ..Default::default()
        };
        let wm = WorldModel::new(cfg, dims()).unwrap();
        let mut store = ParameterStore::new();
        wm.init(&mut store, &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap();
        (wm, store)
    }

    fn inputs(tape: &mut Tape, l: usize, seed: u64) -> (VisualLatents, Waypoints) {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let v = tape.input(normal_table(rng, l, 32, 1.0).reshape(&[1, l, 32]).unwrap());
        let w = tape.input(normal_table(rng, 6, 2, 5.0).reshape(&[1, 6, 2]).unwrap());
        (
            VisualLatents {
                vectors: v,
                kind: LatentKind::Perspective,
                times: vec![0],
            },
            Waypoints {
                points: w,
                times: vec![0],
            },
        )
    }

    #[test]
    fn fusion_width_and_shape_preservation() {
        for arch in [
            Architecture::Linear,
            Architecture::Mlp2,
            Architecture::Transformer,
        ] {
            let (wm, store) = build(arch, 1);
            assert_eq!(wm.fusion.fc1.d_in, 44);
            for l in [1, 4, 64] {
                let mut tape = Tape::new();
                let (v, w) = inputs(&mut tape, l, 1);
                let a = wm.make_action_aware(&mut tape, &store, &v, &w).unwrap();
                assert_eq!(tape.shape(a), &[1, l, 32]);
                let p = wm.step(&mut tape, &store, &v, &w).unwrap();
                assert_eq!(tape.shape(p.vectors), &[1, l, 32]);
                assert_eq!(p.times, vec![3]);
            }
        }
    }

    #[test]
    fn linear_with_identity_weights_is_identity() {
        let (wm, mut store) = build(Architecture::Linear, 1);
        *store.value_mut("world.linear.w").unwrap() = Tensor::identity(32);
        let mut tape = Tape::new();
        let (v, _) = inputs(&mut tape, 4, 2);
        let y = wm.predict_future(&mut tape, &store, v.vectors).unwrap();
        assert_eq!(tape.value(y), tape.value(v.vectors));
    }

    #[test]
    fn only_the_transformer_mixes_rows() {
        for (arch, mixes) in [
            (Architecture::Linear, false),
            (Architecture::Mlp2, false),
            (Architecture::Transformer, true),
        ] {
            let (wm, store) = build(arch, 1);
            let run = |bump: f64| {
                let mut tape = Tape::new();
                let (v, _) = inputs(&mut tape, 4, 3);
                let mut t = tape.value(v.vectors).clone();
                t.data_mut()[3 * 32] += bump;
                let x = tape.constant(t);
                let y = wm.predict_future(&mut tape, &store, x).unwrap();
                tape.value(y).data()[..32].to_vec()
            };
            assert_eq!(run(0.0) != run(0.5), mixes, "{arch:?}");
        }
    }

    #[test]
    fn waypoints_change_action_aware_latents_and_receive_gradient() {
        let (wm, store) = build(Architecture::Transformer, 1);
        let mut tape = Tape::new();
        let (v, w) = inputs(&mut tape, 4, 5);
        let a = wm.make_action_aware(&mut tape, &store, &v, &w).unwrap();
        let mut w2 = tape.value(w.points).clone();
        w2.data_mut()[7] += 1.0;
        let w2 = Waypoints {
            points: tape.constant(w2),
            times: vec![0],
        };
        let a2 = wm.make_action_aware(&mut tape, &store, &v, &w2).unwrap();
        assert_ne!(tape.value(a), tape.value(a2));
        let p = wm.predict_future(&mut tape, &store, a).unwrap();
        let loss = tape.mean(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(w.points).unwrap().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn zeroed_trajectory_ignores_waypoints() {
        let cfg = WorldModelConfig {
            inputs: WorldInputs::LatentsOnly,
            ..Default::default()
        };
        let wm = WorldModel::new(cfg, dims()).unwrap();
        let mut store = ParameterStore::new();
        wm.init(&mut store, &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap();
        let mut tape = Tape::new();
        let (v, w) = inputs(&mut tape, 4, 5);
        let a = wm.make_action_aware(&mut tape, &store, &v, &w).unwrap();
        let w0 = Waypoints {
            points: tape.constant(Tensor::zeros(&[1, 6, 2])),
            times: vec![0],
        };
        let b = wm.make_action_aware(&mut tape, &store, &v, &w0).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn latent_loss_values_and_stop_gradient() {
        let mut tape = Tape::new();
        let mut e1 = Tensor::zeros(&[1, 1, 8]);
        e1.data_mut()[0] = 1.0;
        let mut e2 = Tensor::zeros(&[1, 1, 8]);
        e2.data_mut()[1] = 1.0;
        let p = tape.input(e1);
        let t = tape.input(e2);
        let lat = |v| VisualLatents {
            vectors: v,
            kind: LatentKind::Perspective,
            times: vec![2],
        };
        let loss = latent_loss(&mut tape, &lat(p), &lat(t), true).unwrap();
        assert!((tape.value(loss).item() - 2.0 / 8.0).abs() < 1e-15);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(t).is_none_or(|g| g.iter().all(|&x| x == 0.0)));
        assert!(g.get(p).unwrap().iter().any(|&x| x != 0.0));

        let loss = latent_loss(&mut tape, &lat(p), &lat(t), false).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(t).unwrap().iter().any(|&x| x != 0.0));

        let other = VisualLatents {
            times: vec![3],
            ..lat(t)
        };
        assert!(latent_loss(&mut tape, &lat(p), &other, true).is_err());
    }

    #[test]
    fn one_step_rollout_equals_single_prediction() {
        let (wm, store) = build(Architecture::Transformer, 1);
        let mut tape = Tape::new();
        let (v, w) = inputs(&mut tape, 4, 6);
        let single = wm.step(&mut tape, &store, &v, &w).unwrap();
        let roll = wm
            .rollout_autoregressive(&mut tape, &store, &v, std::slice::from_ref(&w))
            .unwrap();
        assert_eq!(tape.value(single.vectors), tape.value(roll[0].vectors));
    }

    #[test]
    fn identical_history_with_zero_embeddings_gives_equal_row_pairs() {
        let (wm, mut store) = build(Architecture::Linear, 2);
        store
            .value_mut("world.frame_embed")
            .unwrap()
            .data_mut()
            .fill(0.0);
        let mut tape = Tape::new();
        let (v, w) = inputs(&mut tape, 4, 7);
        let old = VisualLatents {
            times: vec![0],
            ..v.clone()
        };
        let new = VisualLatents {
            times: vec![3],
            ..v.clone()
        };
        let w = Waypoints {
            times: vec![3],
            ..w
        };
        let out = wm
            .step_multiframe(&mut tape, &store, &[old.clone(), new.clone()], &w)
            .unwrap();
        assert_eq!(tape.shape(out.vectors), &[1, 4, 32]);
        assert_eq!(out.times, vec![6]);
        let single = VisualLatents {
            times: vec![3],
            ..v
        };
        let s = wm.step(&mut tape, &store, &single, &w).unwrap();
        assert_eq!(tape.value(out.vectors), tape.value(s.vectors));
        let bad = VisualLatents {
            times: vec![1],
            ..old
        };
        assert!(wm
            .step_multiframe(&mut tape, &store, &[bad, new], &w)
            .is_err());
    }
}
