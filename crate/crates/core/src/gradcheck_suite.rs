//! Finite-difference checks of every differentiable operation, the
//! network blocks and an end-to-end perception-free forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoders::Waypoints;
use crate::encoders::ModelDims;
use crate::encoders::{LatentKind, VisualLatents};
use crate::error::Result;
use crate::nn::{Attention, LayerNorm, Linear, Mlp2, TransformerBlock};
use crate::sim::episode::{generate_episodes, DatasetConfig};
use crate::tensor::gradcheck::{check_inputs, check_params, DEFAULT_STEP};
use crate::tensor::{ParameterStore, Tape, Tensor, Var};
use crate::trainer::{ExperimentConfig, LawModel, Sample, Stage};
use crate::world_model::{Architecture, WorldModel, WorldModelConfig};

/// Acceptance threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_err: f64,
    pub components: usize,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("non-empty shape")
}

/// Entries bounded away from zero, for kinks at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

/// `Σ y ⊙ w` with fixed random `w`, so that every output entry matters.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = if shape.is_empty() {
        Tensor::scalar(1.0)
    } else {
        random(&mut ChaCha8Rng::seed_from_u64(seed), &shape)
    };
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

struct Suite {
    lines: Vec<CheckLine>,
    rng: ChaCha8Rng,
}

impl Suite {
    fn inputs(
        &mut self,
        name: &str,
        inputs: Vec<Tensor>,
        f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    ) -> Result<()> {
        let seed = self.rng.gen();
        let r = check_inputs(&inputs, DEFAULT_STEP, |t, v| {
            let y = f(t, v)?;
            project(t, y, seed)
        })?;
        self.lines.push(CheckLine {
            name: name.into(),
            max_rel_err: r.max_rel_err,
            components: r.components,
        });
        Ok(())
    }

    fn params(
        &mut self,
        name: &str,
        store: &ParameterStore,
        samples: usize,
        f: impl Fn(&mut Tape, &ParameterStore) -> Result<Var>,
    ) -> Result<()> {
        let seed = self.rng.gen();
        let r = check_params(
            store,
            samples,
            DEFAULT_STEP,
            &mut self.rng,
            |_| true,
            |t, s| {
                let y = f(t, s)?;
                project(t, y, seed)
            },
        )?;
        self.lines.push(CheckLine {
            name: name.into(),
            max_rel_err: r.max_rel_err,
            components: r.components,
        });
        Ok(())
    }
}

fn ops(s: &mut Suite) -> Result<()> {
    let r = &mut ChaCha8Rng::seed_from_u64(1);
    s.inputs(
        "matmul",
        vec![random(r, &[2, 3, 4]), random(r, &[4, 5])],
        |t, v| t.matmul(v[0], v[1]),
    )?;
    s.inputs(
        "matmul_batched",
        vec![random(r, &[2, 3, 4]), random(r, &[2, 4, 2])],
        |t, v| t.matmul(v[0], v[1]),
    )?;
    s.inputs(
        "add",
        vec![random(r, &[3, 4]), random(r, &[3, 4])],
        |t, v| t.add(v[0], v[1]),
    )?;
    s.inputs(
        "sub",
        vec![random(r, &[3, 4]), random(r, &[3, 4])],
        |t, v| t.sub(v[0], v[1]),
    )?;
    s.inputs(
        "mul",
        vec![random(r, &[3, 4]), random(r, &[3, 4])],
        |t, v| t.mul(v[0], v[1]),
    )?;
    s.inputs("relu", vec![away_from_zero(r, &[3, 4])], |t, v| {
        t.relu(v[0])
    })?;
    s.inputs("gelu", vec![random(r, &[3, 4])], |t, v| t.gelu(v[0]))?;
    s.inputs("scale", vec![random(r, &[3, 4])], |t, v| {
        t.scale(v[0], -1.7)
    })?;
    s.inputs(
        "add_bias",
        vec![random(r, &[2, 3, 4]), random(r, &[4])],
        |t, v| t.add_bias(v[0], v[1]),
    )?;
    s.inputs(
        "concat",
        vec![random(r, &[2, 3, 4]), random(r, &[2, 1, 4])],
        |t, v| t.concat(&[v[0], v[1]], 1),
    )?;
    s.inputs("slice", vec![random(r, &[2, 5, 3])], |t, v| {
        t.slice(v[0], 1, 1, 3)
    })?;
    s.inputs("reshape", vec![random(r, &[2, 6])], |t, v| {
        t.reshape(v[0], &[3, 4])
    })?;
    s.inputs("transpose", vec![random(r, &[2, 3, 4])], |t, v| {
        t.transpose(v[0], 0, 2)
    })?;
    s.inputs("repeat", vec![random(r, &[2, 3])], |t, v| t.repeat(v[0], 3))?;
    s.inputs("gather", vec![random(r, &[5, 3])], |t, v| {
        t.gather(v[0], &[4, 0, 4, 2])
    })?;
    s.inputs("softmax", vec![random(r, &[2, 3, 4])], |t, v| {
        t.softmax(v[0], 1)
    })?;
    s.inputs(
        "layer_norm",
        vec![random(r, &[3, 6]), random(r, &[6]), random(r, &[6])],
        |t, v| t.layer_norm(v[0], v[1], v[2]),
    )?;
    s.inputs("sum", vec![random(r, &[3, 4])], |t, v| t.sum(v[0]))?;
    s.inputs("mean", vec![random(r, &[3, 4])], |t, v| t.mean(v[0]))?;
    s.inputs(
        "mse_loss",
        vec![random(r, &[3, 4]), random(r, &[3, 4])],
        |t, v| t.mse_loss(v[0], v[1]),
    )?;
    let target = random(r, &[2, 3, 2]);
    let mut pred = away_from_zero(r, &[2, 3, 2]);
    for (p, q) in pred.data_mut().iter_mut().zip(target.data()) {
        *p += q;
    }
    s.inputs("l1_loss", vec![pred.clone(), target.clone()], |t, v| {
        t.l1_loss(v[0], v[1])
    })?;
    s.inputs("masked_l1_loss", vec![pred, target], |t, v| {
        t.masked_l1_loss(v[0], v[1], &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0])
    })?;
    Ok(())
}

fn blocks(s: &mut Suite) -> Result<()> {
    let r = &mut ChaCha8Rng::seed_from_u64(2);
    let d = 8;
    let x = random(r, &[2, 3, d]);

    let mut store = ParameterStore::new();
    let lin = Linear::new("lin", d, 5);
    lin.init(&mut store, r)?;
    let xi = x.clone();
    s.params("linear", &store, 64, move |t, st| {
        let x = t.constant(xi.clone());
        lin.forward(t, st, x)
    })?;

    let mut store = ParameterStore::new();
    let mlp = Mlp2::new("mlp", d, 16, d);
    mlp.init(&mut store, r)?;
    let xi = x.clone();
    s.params("mlp2", &store, 64, move |t, st| {
        let x = t.constant(xi.clone());
        mlp.forward(t, st, x)
    })?;

    let mut store = ParameterStore::new();
    let ln = LayerNorm::new("ln", d);
    ln.init(&mut store)?;
    for name in store.names().map(str::to_string).collect::<Vec<_>>() {
        let shape = store.value(&name).unwrap().shape().to_vec();
        *store.value_mut(&name).unwrap() = random(r, &shape);
    }
    let xi = x.clone();
    s.params("layer_norm_block", &store, 16, move |t, st| {
        let x = t.constant(xi.clone());
        ln.forward(t, st, x)
    })?;

    let mut store = ParameterStore::new();
    let attn = Attention::new("attn", d, 2)?;
    attn.init(&mut store, r)?;
    let (xi, ki) = (x.clone(), random(r, &[2, 4, d]));
    s.params("attention", &store, 64, {
        let attn = attn.clone();
        move |t, st| {
            let q = t.constant(xi.clone());
            let k = t.constant(ki.clone());
            attn.forward(t, st, q, k, k)
        }
    })?;
    s.inputs(
        "attention_inputs",
        vec![x.clone(), random(r, &[2, 4, d])],
        |t, v| attn.forward(t, &store, v[0], v[1], v[1]),
    )?;

    let mut store = ParameterStore::new();
    let block = TransformerBlock::new("blk", d, 2)?;
    block.init(&mut store, r)?;
    s.params("transformer_block", &store, 64, {
        let (block, xi) = (block.clone(), x.clone());
        move |t, st| {
            let x = t.constant(xi.clone());
            block.forward(t, st, x)
        }
    })?;
    s.inputs("transformer_block_inputs", vec![x], |t, v| {
        block.forward(t, &store, v[0])
    })?;
    Ok(())
}

fn world_models(s: &mut Suite) -> Result<()> {
    let r = &mut ChaCha8Rng::seed_from_u64(3);
    let dims = ModelDims {
        d: 8,
        heads: 2,
        blocks: 1,
        patch: 16,
    };
    for arch in [
        Architecture::Linear,
        Architecture::Mlp2,
        Architecture::Transformer,
    ] {
        let cfg = WorldModelConfig {
            architecture: arch,
            autoregressive_steps: 2,
            stop_gradient_target: false,
            ..Default::default()
        };
        let wm = WorldModel::new(cfg, dims)?;
        let mut store = ParameterStore::new();
        wm.init(&mut store, r)?;
        let name = format!("world_{arch:?}_rollout2").to_lowercase();
        let lat = random(r, &[2, 3, 8]);
        let wps = [random(r, &[2, 6, 2]), random(r, &[2, 6, 2])];
        let target = random(r, &[2, 3, 8]);
        let f = |t: &mut Tape, st: &ParameterStore, v: &[Var]| -> Result<Var> {
            let latents = VisualLatents {
                vectors: v[0],
                kind: LatentKind::Perspective,
                times: vec![0, 0],
            };
            let conditioning = [
                Waypoints {
                    points: v[1],
                    times: vec![0, 0],
                },
                Waypoints {
                    points: v[2],
                    times: vec![3, 3],
                },
            ];
            let preds = wm.rollout_autoregressive(t, st, &latents, &conditioning)?;
            let last = &preds[1];
            let tgt = VisualLatents {
                vectors: v[3],
                kind: LatentKind::Perspective,
                times: last.times.clone(),
            };
            crate::world_model::latent_loss(t, last, &tgt, false)
        };
        let inputs = vec![lat.clone(), wps[0].clone(), wps[1].clone(), target.clone()];
        s.inputs(&format!("{name}_inputs"), inputs.clone(), |t, v| {
            f(t, &store, v)
        })?;
        s.params(&format!("{name}_params"), &store, 48, |t, st| {
            let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
            f(t, st, &vars)
        })?;
    }
    Ok(())
}

/// Tiny perception-free model on two frames: encoder, waypoint head,
/// world model and the summed latent and waypoint losses.
fn end_to_end(s: &mut Suite) -> Result<()> {
    let cfg = DatasetConfig {
        frames_per_episode: 10,
        include_rasters: false,
        ..DatasetConfig::new(1, 0)
    };
    let (episodes, _) = generate_episodes(&cfg)?;
    let mut config = ExperimentConfig {
        model: ModelDims {
            d: 8,
            heads: 2,
            blocks: 1,
            patch: 16,
        },
        ..Default::default()
    };
    config.world_model.stop_gradient_target = false;
    let model = LawModel::new(&config)?;
    let store = model.init_params()?;
    let samples = [
        Sample {
            episode: 0,
            frame: 0,
        },
        Sample {
            episode: 0,
            frame: 2,
        },
    ];
    let before = s.lines.len();
    s.params("end_to_end_perception_free", &store, 200, |t, st| {
        let (total, _) = model.batch_losses(t, st, &episodes, &samples, Stage::Two)?;
        Ok(total)
    })?;
    // The projection of a scalar is the scalar itself.
    debug_assert_eq!(s.lines.len(), before + 1);
    Ok(())
}

/// Runs every check and returns one line per check.
pub fn run() -> Result<Vec<CheckLine>> {
    let mut s = Suite {
        lines: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(0),
    };
    ops(&mut s)?;
    blocks(&mut s)?;
    world_models(&mut s)?;
    end_to_end(&mut s)?;
    Ok(s.lines)
}
