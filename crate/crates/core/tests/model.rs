use law_core::encoders::{view_patches, Encoder, LatentKind, ModelDims, VisualLatents};
use law_core::sim::episode::{generate_episodes, DatasetConfig, Episode};
use law_core::sim::render_views;
use law_core::tensor::{AdamW, Tape};
use law_core::trainer::{
    metrics_csv, train_run, train_step, training_samples, Checkpoint, ExperimentConfig, Framework,
    LawModel, Sample, Stage,
};
use law_core::world_model::WorldModelConfig;
use law_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_dims() -> ModelDims {
    ModelDims {
        d: 8,
        heads: 2,
        blocks: 1,
        patch: 16,
    }
}

fn episodes(n: usize, frames: usize) -> Vec<Episode> {
    let cfg = DatasetConfig {
        frames_per_episode: frames,
        include_rasters: false,
        ..DatasetConfig::new(n, 40)
    };
    generate_episodes(&cfg).unwrap().0
}

fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        model: tiny_dims(),
        ..Default::default()
    };
    c.schedule.batch_size = 4;
    c.schedule.stage2_epochs = 1;
    c.schedule.max_train_frames = 24;
    c
}

fn perception_based() -> ExperimentConfig {
    let mut c = tiny_config();
    c.framework = Framework::PerceptionBased;
    c.schedule.stage1_epochs = 1;
    c
}

#[test]
fn bev_encoding_ignores_view_order_when_positions_stay_attached() {
    let eps = episodes(1, 4);
    let dims = tiny_dims();
    let enc = match Encoder::new(LatentKind::Bev, dims).unwrap() {
        Encoder::Bev(e) => e,
        Encoder::Perspective(_) => unreachable!(),
    };
    let mut store = law_core::tensor::ParameterStore::new();
    enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3))
        .unwrap();
    let views = render_views(&eps[0].frames[2]);
    let patches = view_patches(&[&views], dims.patch).unwrap();

    let mut tape = Tape::new();
    let reference = enc.encode(&mut tape, &store, &patches, vec![2]).unwrap();
    let reference = tape.value(reference.vectors).clone();

    // Same pipeline with the views concatenated in reverse order.
    let (f, b) = enc.stem.forward(&mut tape, &store, &patches).unwrap();
    let t = dims.tokens_per_view();
    let per_view = tape.reshape(f, &[b, 4, t, dims.d]).unwrap();
    let mut parts = Vec::new();
    for v in [3, 1, 0, 2] {
        parts.push(tape.slice(per_view, 1, v, 1).unwrap());
    }
    let shuffled = tape.concat(&parts, 1).unwrap();
    let kv = tape.reshape(shuffled, &[b, 4 * t, dims.d]).unwrap();
    let q = law_core::nn::batched_queries(&mut tape, &store, &enc.queries, b).unwrap();
    let x = enc.attn.forward(&mut tape, &store, q, kv, kv).unwrap();
    let out = enc.block.forward(&mut tape, &store, x).unwrap();
    for (a, b) in reference.data().iter().zip(tape.value(out).data()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn stage_one_leaves_the_waypoint_head_alone() {
    let eps = episodes(4, 12);
    let config = perception_based();
    let model = LawModel::new(&config).unwrap();
    let mut store = model.init_params().unwrap();
    let before = store.clone();
    let mut opt = AdamW::new(config.optimizer.adamw());
    let (samples, _) = training_samples(&model, &eps, Stage::One);

    let mut tape = Tape::new();
    let (total, vals) = model
        .batch_losses(&mut tape, &store, &eps, &samples[..4], Stage::One)
        .unwrap();
    assert_eq!(vals.waypoint, 0.0);
    assert_eq!(vals.latent, 0.0);
    let grads = tape.backward(total).unwrap();
    for name in before
        .names()
        .filter(|n| n.starts_with("planner.") || n.starts_with("world."))
    {
        let g = tape.param_var(name).and_then(|v| grads.get(v));
        assert!(g.is_none_or(|g| g.iter().all(|&x| x == 0.0)), "{name}");
    }

    for chunk in samples.chunks(4).take(3) {
        train_step(&model, &mut store, &mut opt, &eps, chunk, Stage::One, 1e-3).unwrap();
    }
    for (name, p) in before.iter() {
        let moved = store.value(name).unwrap() != &p.value;
        let owned = name.starts_with("encoder.") || name.starts_with("perception.");
        assert_eq!(moved, owned, "{name}");
        assert_eq!(opt.state(name).is_some(), owned, "{name}");
    }
}

#[test]
fn composed_loss_is_the_sum_of_logged_terms() {
    let eps = episodes(4, 16);
    for config in [tiny_config(), perception_based()] {
        let out = train_run(&config, &eps).unwrap();
        assert!(!out.metrics.is_empty());
        for m in &out.metrics {
            let l = m.losses;
            // Same grouping as the composition, so the match is exact.
            assert_eq!(l.total, (l.latent + l.waypoint) + (l.agent + l.map), "{m:?}");
        }
    }
}

#[test]
fn disabled_world_model_logs_zero_latent_loss() {
    let eps = episodes(2, 12);
    let mut config = tiny_config();
    config.world_model.enabled = false;
    let out = train_run(&config, &eps).unwrap();
    assert!(out.metrics.iter().all(|m| m.losses.latent == 0.0));
}

#[test]
fn one_batch_overfits() {
    let eps = episodes(2, 12);
    let mut config = tiny_config();
    config.model.d = 16;
    let model = LawModel::new(&config).unwrap();
    let mut store = model.init_params().unwrap();
    let mut opt = AdamW::new(config.optimizer.adamw());
    let batch = [
        Sample {
            episode: 0,
            frame: 0,
        },
        Sample {
            episode: 0,
            frame: 5,
        },
        Sample {
            episode: 1,
            frame: 3,
        },
    ];
    let first = train_step(&model, &mut store, &mut opt, &eps, &batch, Stage::Two, 3e-3).unwrap();
    let mut last = first;
    for _ in 0..49 {
        last = train_step(&model, &mut store, &mut opt, &eps, &batch, Stage::Two, 3e-3).unwrap();
    }
    assert!(last.total < 0.5 * first.total, "{first:?} -> {last:?}");
}

#[test]
fn training_is_deterministic() {
    let eps = episodes(4, 12);
    let config = tiny_config();
    let a = train_run(&config, &eps).unwrap();
    let b = train_run(&config, &eps).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));

    let mut other = config.clone();
    other.seed = 1;
    let c = train_run(&other, &eps).unwrap();
    assert_ne!(a.checkpoint.to_bytes(), c.checkpoint.to_bytes());
}

#[test]
fn checkpoint_files_round_trip_and_reject_mismatches() {
    let eps = episodes(2, 12);
    let config = tiny_config();
    let out = train_run(&config, &eps).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
    back.check_fits(&config).unwrap();

    let mut bytes = back.to_bytes();
    bytes[0] = b'X';
    let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
    assert!(err.contains("LAWC") && err.contains("byte 0"), "{err}");

    let mut wider = config.clone();
    wider.model.d = 16;
    match Checkpoint::load_for(&path, &wider) {
        Err(Error::Config(msg)) => assert!(msg.contains("[8") && msg.contains("[16"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn two_frame_history_reaches_both_encoder_passes() {
    let eps = episodes(1, 12);
    let mut config = tiny_config();
    config.world_model = WorldModelConfig {
        history_frames: 2,
        ..Default::default()
    };
    config.schedule.stage1_epochs = 1;
    let model = LawModel::new(&config).unwrap();
    let store = model.init_params().unwrap();
    let world = model.world.as_ref().unwrap();
    let h = config.world_model.horizon_frames;
    let t = 5;

    let encode = |tape: &mut Tape, frame: usize| -> VisualLatents {
        let views = render_views(&eps[0].frames[frame]);
        let p = view_patches(&[&views], config.model.patch).unwrap();
        model.encoder.encode(tape, &store, &p, vec![frame]).unwrap()
    };
    let mut tape = Tape::new();
    let old = encode(&mut tape, t - h);
    let new = encode(&mut tape, t);
    let wp = model.planner.decode_pf(&mut tape, &store, &new).unwrap();
    let pred = world
        .step_multiframe(&mut tape, &store, &[old.clone(), new.clone()], &wp)
        .unwrap();
    let target = tape.no_grad(|tp| encode(tp, t + h));
    let loss = law_core::world_model::latent_loss(&mut tape, &pred, &target, true).unwrap();
    let grads = tape.backward(loss).unwrap();
    for lat in [&old, &new] {
        let g = grads.get(lat.vectors).expect("gradient on history latents");
        assert!(g.iter().any(|&x| x != 0.0));
    }

    // And the full two-stage schedule trains.
    let eps = episodes(4, 14);
    let out = train_run(&config, &eps).unwrap();
    assert!(out.metrics.iter().any(|m| m.stage == 1));
    assert!(out
        .metrics
        .iter()
        .any(|m| m.stage == 2 && m.losses.latent > 0.0));
    assert!(out.metrics.iter().all(|m| m.losses.total.is_finite()));
}

#[test]
fn rollout_steps_share_world_parameters() {
    let eps = episodes(1, 14);
    let mut config = tiny_config();
    config.world_model.autoregressive_steps = 2;
    let model = LawModel::new(&config).unwrap();
    let store = model.init_params().unwrap();
    let mut tape = Tape::new();
    let samples = [Sample {
        episode: 0,
        frame: 1,
    }];
    let (total, vals) = model
        .batch_losses(&mut tape, &store, &eps, &samples, Stage::Two)
        .unwrap();
    assert!(vals.latent > 0.0);
    let log: Vec<_> = tape
        .param_log()
        .iter()
        .filter(|(n, _)| n.starts_with("world."))
        .collect();
    let distinct: std::collections::BTreeSet<&str> = log.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        log.len(),
        2 * distinct.len(),
        "each world parameter is looked up once per step"
    );
    for name in distinct {
        let vars: Vec<_> = log
            .iter()
            .filter(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .collect();
        assert!(vars.windows(2).all(|w| w[0] == w[1]), "{name}");
    }
    tape.backward(total).unwrap();
}

#[test]
fn perception_based_training_is_finite() {
    let eps = episodes(4, 14);
    let out = train_run(&perception_based(), &eps).unwrap();
    let stage2: Vec<_> = out.metrics.iter().filter(|m| m.stage == 2).collect();
    assert!(!stage2.is_empty());
    for m in stage2 {
        assert!(m.losses.waypoint > 0.0 && m.losses.agent >= 0.0 && m.losses.map > 0.0);
        assert!(m.losses.total.is_finite());
    }
}

#[test]
fn bad_batches_are_usage_errors() {
    let eps = episodes(1, 8);
    let model = LawModel::new(&tiny_config()).unwrap();
    let store = model.init_params().unwrap();
    let mut tape = Tape::new();
    let late = [Sample {
        episode: 0,
        frame: 7,
    }];
    assert!(matches!(
        model.batch_losses(&mut tape, &store, &eps, &late, Stage::Two),
        Err(Error::Usage(_))
    ));
    assert!(model
        .batch_losses(&mut tape, &store, &eps, &[], Stage::Two)
        .is_err());
}

#[test]
fn shipped_configs_give_finite_losses_at_init() {
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    let mut paths: Vec<_> = std::fs::read_dir(root)
        .unwrap()
        .flat_map(|e| {
            let p = e.unwrap().path();
            if p.is_dir() {
                std::fs::read_dir(&p)
                    .unwrap()
                    .map(|e| e.unwrap().path())
                    .collect()
            } else {
                vec![p]
            }
        })
        .filter(|p| {
            !p.file_name()
                .unwrap()
                .to_str()
                .unwrap()
                .starts_with("routes")
        })
        .collect();
    paths.sort();
    assert!(paths.len() >= 16, "{paths:?}");
    let eps = episodes(1, 40);
    for path in paths {
        let config = ExperimentConfig::load(&path).unwrap();
        let model = LawModel::new(&config).unwrap();
        let store = model.init_params().unwrap();
        let stages = if config.has_stage1() {
            vec![Stage::One, Stage::Two]
        } else {
            vec![Stage::Two]
        };
        for stage in stages {
            let (_, behind) = model.reach(stage);
            let samples = [
                Sample {
                    episode: 0,
                    frame: behind,
                },
                Sample {
                    episode: 0,
                    frame: behind + 1,
                },
            ];
            let mut tape = Tape::new();
            let (total, _) = model
                .batch_losses(&mut tape, &store, &eps, &samples, stage)
                .unwrap();
            assert!(tape.value(total).item().is_finite(), "{path:?} {stage:?}");
        }
    }
}
