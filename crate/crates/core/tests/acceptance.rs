//! One PASS/FAIL line per acceptance criterion.
//!
//! The ablation criteria (3 to 5) train at desk scale and take most of an
//! hour on one core. `LAW_ACCEPTANCE=quick` shrinks them to a smoke run;
//! their lines are then tagged and say nothing about the criteria.
//!
//! Exits 0 after printing every line so that a failing directional result
//! is reported rather than aborting the test run. `LAW_ACCEPTANCE_STRICT=1`
//! turns any FAIL into exit code 1.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use law_core::encoders::{view_patches, VisualLatents};
use law_core::eval::ablation::{
    desk_config, run_experiment, suite_rows, summary_csv, RowResult, RunMetrics,
};
use law_core::eval::closed_loop::{closed_loop_eval, driving_score, ExpertDriver, RoutesConfig};
use law_core::eval::open_loop::{eval_samples, score};
use law_core::eval::Dataset;
use law_core::gradcheck_suite;
use law_core::sim::episode::{generate_episodes, DatasetConfig, Episode};
use law_core::sim::{render_views, NUM_WAYPOINTS};
use law_core::tensor::Tape;
use law_core::trainer::{
    train_run, Checkpoint, ExperimentConfig, Framework, LawModel, Sample, Stage,
};
use law_core::world_model::{latent_loss, Architecture};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Report {
    failed: usize,
    total: usize,
}

impl Report {
    fn line(&mut self, n: usize, title: &str, outcome: Outcome) {
        self.total += 1;
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                self.failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {tag}  {title}: {detail}");
    }

    /// A reduced-scale run: printed but neither passed nor failed.
    fn smoke(&mut self, n: usize, title: &str, outcome: Outcome) {
        let detail = outcome.unwrap_or_else(|e| e);
        println!("criterion {n:>2} SMOKE {title}: {detail} [reduced scale]");
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tiny(config: &mut ExperimentConfig) {
    config.model.d = 8;
    config.model.heads = 2;
    config.model.blocks = 1;
    config.model.patch = 16;
    config.schedule.batch_size = 4;
}

fn small_episodes(n: usize, frames: usize, seed: u64) -> Vec<Episode> {
    let cfg = DatasetConfig {
        frames_per_episode: frames,
        include_rasters: false,
        ..DatasetConfig::new(n, seed)
    };
    generate_episodes(&cfg).expect("episode generation").0
}

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let lines = gradcheck_suite::run().map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let worst = lines
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .unwrap();
    let failing: Vec<&str> = lines
        .iter()
        .filter(|l| !l.passed())
        .map(|l| l.name.as_str())
        .collect();
    let e2e = lines.iter().any(|l| l.name.starts_with("end_to_end"));
    check(
        failing.is_empty() && e2e && secs < 120.0,
        format!(
            "{} checks, worst {:.2e} ({}), {secs:.1} s{}",
            lines.len(),
            worst.max_rel_err,
            worst.name,
            if failing.is_empty() {
                String::new()
            } else {
                format!(", failing {failing:?}")
            }
        ),
    )
}

fn loss_exactness() -> Outcome {
    let eps = small_episodes(8, 20, 3);
    let mut worst = 0.0f64;
    let mut steps = 0;
    for framework in [Framework::PerceptionFree, Framework::PerceptionBased] {
        let mut c = ExperimentConfig {
            framework,
            ..Default::default()
        };
        tiny(&mut c);
        // 52 frames in batches of 4 is 13 steps an epoch; 100 steps in all.
        c.schedule.max_train_frames = 52;
        c.schedule.stage1_epochs = usize::from(framework == Framework::PerceptionBased);
        c.schedule.stage2_epochs = 8 - c.schedule.stage1_epochs;
        let out = train_run(&c, &eps).map_err(|e| e.to_string())?;
        for m in out.metrics.iter().take(100) {
            let l = m.losses;
            let sum = match framework {
                Framework::PerceptionFree => l.latent + l.waypoint,
                // Planning terms and perception terms are summed separately.
                Framework::PerceptionBased => (l.latent + l.waypoint) + (l.agent + l.map),
            };
            let rel = (l.total - sum).abs() / sum.abs().max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
            steps += 1;
        }
    }
    check(
        steps == 200 && worst <= f64::EPSILON,
        format!("100 steps per framework, worst relative gap {worst:.1e}"),
    )
}

struct Ablation {
    episodes: Vec<Episode>,
    reduced: bool,
    none: RowResult,
    latents: RowResult,
    full: RowResult,
    seconds: f64,
}

fn row_over_seeds(name: &str, config: &ExperimentConfig, episodes: &[Episode]) -> RowResult {
    let mut row = RowResult {
        name: name.into(),
        config: config.clone(),
        runs: Vec::new(),
        failures: Vec::new(),
    };
    for seed in 0..3 {
        let mut c = config.clone();
        c.seed = seed;
        match run_experiment(&c, episodes) {
            Ok(m) => {
                eprintln!(
                    "  {name} seed {seed}: L2 avg {:.4}{} in {:.0} s",
                    m.open_loop.l2_avg,
                    m.latent_mse
                        .map(|l| format!(", latent MSE {l:.5}"))
                        .unwrap_or_default(),
                    m.seconds
                );
                row.runs.push(m)
            }
            Err(e) => row.failures.push((seed, e.to_string())),
        }
    }
    row
}

fn base_config(reduced: bool) -> ExperimentConfig {
    let mut c = desk_config();
    if reduced {
        let d = c.dataset.as_mut().unwrap();
        d.episodes = 40;
        c.schedule.stage2_epochs = 1;
    }
    c
}

fn run_inputs_suite(reduced: bool) -> Result<Ablation, String> {
    let base = base_config(reduced);
    let t = Instant::now();
    let episodes = generate_episodes(base.dataset.as_ref().unwrap())
        .map_err(|e| e.to_string())?
        .0;
    let rows = suite_rows("inputs", &base).map_err(|e| e.to_string())?;
    let mut results: Vec<RowResult> = rows
        .iter()
        .map(|(n, c)| row_over_seeds(n, c, &episodes))
        .collect();
    let seconds = t.elapsed().as_secs_f64();
    let full = results.pop().unwrap();
    let latents = results.pop().unwrap();
    let none = results.pop().unwrap();
    Ok(Ablation {
        episodes,
        reduced,
        none,
        latents,
        full,
        seconds,
    })
}

fn complete(row: &RowResult) -> Result<(), String> {
    if row.failures.is_empty() {
        Ok(())
    } else {
        Err(format!("{} failed: {:?}", row.name, row.failures))
    }
}

fn inputs_ordering(a: &Ablation) -> Outcome {
    for r in [&a.none, &a.latents, &a.full] {
        complete(r)?;
    }
    let (n, l, f) = (a.none.mean_l2(), a.latents.mean_l2(), a.full.mean_l2());
    let gain = 1.0 - f / n;
    let ok = f < l && l <= n && gain >= 0.05 && a.seconds < 1800.0;
    check(
        ok,
        format!(
            "mean L2 avg none {n:.4}, latents {l:.4}, latents+trajectory {f:.4}; full vs none {:+.1}%; {:.0} s",
            -100.0 * gain,
            a.seconds
        ),
    )
}

fn architecture_ordering(a: &Ablation) -> Outcome {
    let mut linear = base_config(a.reduced);
    linear.name = "architecture-linear".into();
    linear.world_model.architecture = Architecture::Linear;
    let linear = row_over_seeds("linear", &linear, &a.episodes);
    complete(&linear)?;
    complete(&a.full)?;
    let (t, l) = (
        a.full.mean_latent_mse().unwrap(),
        linear.mean_latent_mse().unwrap(),
    );
    check(
        t <= l,
        format!("held-out latent MSE transformer {t:.5}, linear {l:.5}"),
    )
}

fn horizon_sweep(a: &Ablation, out: &Path) -> Outcome {
    let base = base_config(a.reduced);
    let rows = suite_rows("horizon", &base).map_err(|e| e.to_string())?;
    let mut results = Vec::new();
    for (name, c) in &rows {
        // h3 is the full model already trained for the inputs suite.
        let mut reference = a.full.config.clone();
        reference.name.clone_from(&c.name);
        let runs: Vec<RunMetrics> = if *c == reference {
            a.full
                .runs
                .iter()
                .filter(|r| r.seed == c.seed)
                .cloned()
                .collect()
        } else {
            vec![run_experiment(c, &a.episodes).map_err(|e| format!("{name}: {e}"))?]
        };
        results.push(RowResult {
            name: name.clone(),
            config: c.clone(),
            runs,
            failures: Vec::new(),
        });
    }
    let csv = summary_csv(&results);
    std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
    let path = out.join("horizon_summary.csv");
    std::fs::write(&path, &csv).map_err(|e| e.to_string())?;
    let finite = results.iter().all(|r| {
        r.runs.len() == 1
            && r.runs[0].final_losses.total.is_finite()
            && r.runs[0].open_loop.l2_avg.is_finite()
    });
    let l2: Vec<String> = results
        .iter()
        .map(|r| format!("{} {:.4}", r.name, r.mean_l2()))
        .collect();
    check(
        finite && csv.lines().count() == 5,
        format!("L2 avg {}; wrote {}", l2.join(", "), path.display()),
    )
}

fn autoregressive_sharing() -> Outcome {
    let eps = small_episodes(4, 20, 11);
    let mut c = ExperimentConfig::default();
    tiny(&mut c);
    c.world_model.autoregressive_steps = 2;
    c.schedule.stage2_epochs = 2;
    let out = train_run(&c, &eps).map_err(|e| e.to_string())?;
    let finite = out
        .metrics
        .iter()
        .all(|m| m.losses.total.is_finite() && m.losses.latent > 0.0);

    let model = LawModel::new(&c).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let s = [Sample {
        episode: 0,
        frame: 2,
    }];
    let (loss, _) = model
        .batch_losses(&mut tape, &out.checkpoint.params, &eps, &s, Stage::Two)
        .map_err(|e| e.to_string())?;
    tape.backward(loss).map_err(|e| e.to_string())?;
    let world: Vec<_> = tape
        .param_log()
        .iter()
        .filter(|(n, _)| n.starts_with("world."))
        .collect();
    let mut names: Vec<&str> = world.iter().map(|(n, _)| n.as_str()).collect();
    names.sort();
    names.dedup();
    let shared = names.iter().all(|n| {
        let vars: Vec<_> = world
            .iter()
            .filter(|(m, _)| m == n)
            .map(|(_, v)| *v)
            .collect();
        vars.len() == 2 && vars[0] == vars[1]
    });
    check(
        finite && shared && !names.is_empty(),
        format!(
            "{} steps finite; {} world tensors each looked up twice, same leaf: {shared}",
            out.metrics.len(),
            names.len()
        ),
    )
}

fn multiframe_gradients() -> Outcome {
    let eps = small_episodes(4, 20, 13);
    let mut c = ExperimentConfig::default();
    tiny(&mut c);
    c.world_model.history_frames = 2;
    c.schedule.stage1_epochs = 1;
    c.schedule.stage2_epochs = 1;
    let out = train_run(&c, &eps).map_err(|e| e.to_string())?;
    let stages: Vec<u8> = {
        let mut s: Vec<u8> = out.metrics.iter().map(|m| m.stage).collect();
        s.dedup();
        s
    };
    let finite = out.metrics.iter().all(|m| m.losses.total.is_finite());

    let model = LawModel::new(&c).map_err(|e| e.to_string())?;
    let store = &out.checkpoint.params;
    let world = model.world.as_ref().unwrap();
    let h = c.world_model.horizon_frames;
    let t = 6;
    let encode = |tape: &mut Tape, f: usize| -> law_core::Result<VisualLatents> {
        let views = render_views(&eps[0].frames[f]);
        let p = view_patches(&[&views], c.model.patch)?;
        model.encoder.encode(tape, store, &p, vec![f])
    };
    let mut tape = Tape::new();
    let grads = (|| -> law_core::Result<_> {
        let old = encode(&mut tape, t - h)?;
        let new = encode(&mut tape, t)?;
        let wp = model.planner.decode_pf(&mut tape, store, &new)?;
        let pred = world.step_multiframe(&mut tape, store, &[old.clone(), new.clone()], &wp)?;
        let target = tape.no_grad(|tp| encode(tp, t + h))?;
        let loss = latent_loss(&mut tape, &pred, &target, true)?;
        let g = tape.backward(loss)?;
        let norm = |v| {
            g.get(v)
                .map_or(0.0, |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt())
        };
        Ok([norm(old.vectors), norm(new.vectors)])
    })()
    .map_err(|e| e.to_string())?;
    check(
        stages == [1, 2] && finite && grads.iter().all(|&g| g > 0.0),
        format!(
            "stages {stages:?}; gradient norms at t-{h} {:.3e}, at t {:.3e}",
            grads[0], grads[1]
        ),
    )
}

fn closed_loop_sanity() -> Outcome {
    let routes = RoutesConfig::new((0..10).collect(), true);
    let r = closed_loop_eval(&mut ExpertDriver::default(), &routes).map_err(|e| e.to_string())?;
    let min_rc = r
        .routes
        .iter()
        .map(|x| x.route_completion)
        .fold(1.0, f64::min);
    let min_is = r
        .routes
        .iter()
        .map(|x| x.infraction_score)
        .fold(1.0, f64::min);
    let product = r
        .routes
        .iter()
        .all(|x| x.driving_score == x.route_completion * x.infraction_score);
    let example = 100.0 * driving_score(0.964, 0.43);
    check(
        min_rc > 0.99 && min_is == 1.0 && product && (example - 41.6).abs() <= 0.2,
        format!("expert min RC {min_rc:.4}, min IS {min_is}; DS = RC x IS on every route: {product}; example DS {example:.2} (reference 41.6)"),
    )
}

fn oracle_and_round_trip(dir: &Path) -> Outcome {
    let eps = small_episodes(12, 40, 29);
    let (all, _) = eval_samples(&eps);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let samples: Vec<Sample> = (0..100).map(|_| all[rng.gen_range(0..all.len())]).collect();
    let preds: Vec<_> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let ep = &eps[s.episode];
            let mut p = ep.waypoints[s.frame];
            for q in p.iter_mut() {
                q[0] += rng.gen_range(-2.0..2.0);
                q[1] += rng.gen_range(-1.0..1.0);
            }
            // Every third plan swerves into a vehicle.
            let j = rng.gen_range(0..NUM_WAYPOINTS);
            if let (0, Some(a)) = (i % 3, ep.frames[s.frame + j + 1].agents.first()) {
                let q = ep.frames[s.frame].ego.to_local(a.position);
                p[j] = [q[0] - 0.4, q[1] + 0.2];
            }
            p
        })
        .collect();
    let r = score(&eps, &samples, &preds).map_err(|e| e.to_string())?;
    let (mut l2, mut col) = ([0.0; 3], [0.0; 3]);
    for (s, p) in samples.iter().zip(&preds) {
        let ep = &eps[s.episode];
        let ego = &ep.frames[s.frame].ego;
        let mut hit_by = usize::MAX;
        for j in (0..NUM_WAYPOINTS).rev() {
            let w = ego.to_world(p[j]);
            if ep.frames[s.frame + j + 1].agents.iter().any(|a| {
                (w[0] - a.position[0]).hypot(w[1] - a.position[1]) <= a.radius + ego.radius
            }) {
                hit_by = j;
            }
        }
        for k in 0..3 {
            let i = 2 * k + 1;
            let g = ep.waypoints[s.frame][i];
            l2[k] += (p[i][0] - g[0]).hypot(p[i][1] - g[1]) / 100.0;
            col[k] += if hit_by <= i { 0.01 } else { 0.0 };
        }
    }
    let l2_ok = (0..3).all(|k| (r.l2_at[k] - l2[k]).abs() < 1e-12);
    let col_ok = (0..3).all(|k| (r.collision_at[k] - col[k]).abs() < 1e-12);

    let (data, _) = Dataset::generate(&DatasetConfig::new(4, 8)).map_err(|e| e.to_string())?;
    let dpath = dir.join("round_trip.lawd");
    data.save(&dpath).map_err(|e| e.to_string())?;
    let dbytes = std::fs::read(&dpath).map_err(|e| e.to_string())?;
    let dback = Dataset::load(&dpath).map_err(|e| e.to_string())?;
    let data_ok = dback == data && dback.to_bytes() == dbytes;

    let mut c = ExperimentConfig::default();
    tiny(&mut c);
    c.schedule.stage2_epochs = 1;
    c.schedule.max_train_frames = 8;
    let ck = train_run(&c, &data.episodes)
        .map_err(|e| e.to_string())?
        .checkpoint;
    let cpath = dir.join("round_trip.lawc");
    ck.save(&cpath).map_err(|e| e.to_string())?;
    let cbytes = std::fs::read(&cpath).map_err(|e| e.to_string())?;
    let cback = Checkpoint::load(&cpath).map_err(|e| e.to_string())?;
    let ck_ok = cback == ck && cback.to_bytes() == cbytes;

    check(
        l2_ok && col_ok && data_ok && ck_ok,
        format!(
            "100 frames: L2 {l2_ok}, collision {col_ok} (rate at 3 s {:.2}); dataset bytes {data_ok}, checkpoint bytes {ck_ok}",
            r.collision_at[2]
        ),
    )
}

fn determinism(dir: &Path) -> Outcome {
    let mut c = ExperimentConfig::default();
    tiny(&mut c);
    c.schedule.stage2_epochs = 2;
    c.schedule.max_train_frames = 40;
    c.seed = 5;
    c.dataset = Some(DatasetConfig::new(4, 41));
    let config = dir.join("det.json");
    std::fs::write(&config, serde_json::to_string_pretty(&c).unwrap())
        .map_err(|e| e.to_string())?;
    let law = env!("CARGO_BIN_EXE_law");
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let ckpt = dir.join(format!("det_{run}.lawc"));
        let status = Command::new(law)
            .arg("train")
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&ckpt)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
        let ck = std::fs::read(&ckpt).map_err(|e| e.to_string())?;
        let metrics = std::fs::read(ckpt.with_extension("csv")).map_err(|e| e.to_string())?;
        outputs.push((ck, metrics));
    }
    let same_ckpt = outputs[0].0 == outputs[1].0;
    let same_metrics = outputs[0].1 == outputs[1].1;
    check(
        same_ckpt && same_metrics,
        format!(
            "two `law train` runs: checkpoints identical {same_ckpt} ({} bytes), metric logs identical {same_metrics}",
            outputs[0].0.len()
        ),
    )
}

fn main() {
    let reduced = std::env::var("LAW_ACCEPTANCE").is_ok_and(|v| v == "quick");
    let strict = std::env::var("LAW_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("scratch directory");

    let mut report = Report {
        failed: 0,
        total: 0,
    };
    report.line(1, "gradient integrity", gradient_integrity());
    report.line(2, "loss composition exactness", loss_exactness());

    eprintln!(
        "training the inputs ablation (3 rows x 3 seeds){}",
        if reduced { ", reduced scale" } else { "" }
    );
    match run_inputs_suite(reduced) {
        Ok(a) => {
            let mut emit = |n, title, outcome| {
                if reduced {
                    report.smoke(n, title, outcome)
                } else {
                    report.line(n, title, outcome)
                }
            };
            emit(3, "world-model inputs ordering", inputs_ordering(&a));
            emit(
                4,
                "predictor architecture ordering",
                architecture_ordering(&a),
            );
            emit(5, "horizon sweep", horizon_sweep(&a, &dir));
        }
        Err(e) => {
            for (n, t) in [
                (3, "world-model inputs ordering"),
                (4, "predictor architecture ordering"),
                (5, "horizon sweep"),
            ] {
                report.line(n, t, Err(e.clone()));
            }
        }
    }

    report.line(6, "autoregressive weight sharing", autoregressive_sharing());
    report.line(7, "two-frame history gradients", multiframe_gradients());
    report.line(8, "closed-loop scorer", closed_loop_sanity());
    report.line(
        9,
        "metric oracles and file round trips",
        oracle_and_round_trip(&dir),
    );
    report.line(10, "training determinism", determinism(&dir));

    println!(
        "acceptance: {}/{} criteria passed",
        report.total - report.failed,
        report.total
    );
    if reduced {
        println!("criteria 3 to 5 ran at reduced scale and were not judged");
    }
    if strict && report.failed > 0 {
        std::process::exit(1);
    }
}
