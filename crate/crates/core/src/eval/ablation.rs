//! Ablation suites: each row is a config variant trained over several
//! seeds and scored open-loop on the held-out episodes.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use super::heldout_latent_mse;
use super::open_loop::{open_loop_eval, OpenLoopReport};
use crate::encoders::ModelDims;
use crate::error::{Error, Result};
use crate::sim::episode::{DatasetConfig, Episode};
use crate::trainer::{train_run, ExperimentConfig, LawModel, LossValues};
use crate::world_model::{Architecture, WorldInputs};

pub const SUITES: [&str; 5] = [
    "inputs",
    "horizon",
    "architecture",
    "autoregressive",
    "multiframe",
];

/// 500 episodes of 40 frames: 10k training frames on even seeds and as
/// many held out.
pub fn desk_dataset() -> DatasetConfig {
    DatasetConfig {
        include_rasters: false,
        ..DatasetConfig::new(500, 1000)
    }
}

/// Perception-free base shared by every suite.
pub fn desk_config() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        name: "base".into(),
        model: ModelDims {
            d: 32,
            heads: 4,
            blocks: 1,
            patch: 16,
        },
        dataset: Some(desk_dataset()),
        ..Default::default()
    };
    c.schedule.stage2_epochs = 5;
    c
}

/// Row names and configs of `suite`, derived from `base`.
pub fn suite_rows(suite: &str, base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    let row = |name: &str, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        c.name = format!("{suite}-{name}");
        f(&mut c);
        (name.to_string(), c)
    };
    let rows = match suite {
        "inputs" => vec![
            row("none", &|c| c.world_model.enabled = false),
            row("latents", &|c| {
                c.world_model.inputs = WorldInputs::LatentsOnly
            }),
            row("latents+trajectory", &|c| {
                c.world_model.inputs = WorldInputs::LatentsAndTrajectory
            }),
        ],
        "horizon" => [1usize, 3, 6, 20]
            .iter()
            .map(|&h| row(&format!("h{h}"), &|c| c.world_model.horizon_frames = h))
            .collect(),
        "architecture" => vec![
            row("linear", &|c| {
                c.world_model.architecture = Architecture::Linear
            }),
            row("mlp2", &|c| c.world_model.architecture = Architecture::Mlp2),
            row("transformer", &|c| {
                c.world_model.architecture = Architecture::Transformer
            }),
        ],
        "autoregressive" => vec![
            row("1-step", &|c| c.world_model.autoregressive_steps = 1),
            row("2-step", &|c| c.world_model.autoregressive_steps = 2),
        ],
        "multiframe" => vec![
            row("1-frame", &|c| c.world_model.history_frames = 1),
            row("2-frame", &|c| {
                c.world_model.history_frames = 2;
                c.schedule.stage1_epochs = 4;
                c.schedule.stage2_epochs = 2;
            }),
        ],
        other => {
            return Err(Error::usage(format!(
                "unknown suite '{other}', expected one of {}",
                SUITES.join(", ")
            )))
        }
    };
    for (_, c) in &rows {
        c.validate()?;
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub open_loop: OpenLoopReport,
    /// Held-out latent loss, when the row has a world model.
    pub latent_mse: Option<f64>,
    pub final_losses: LossValues,
    pub steps: u64,
    pub seconds: f64,
}

/// Trains `config` on `episodes` and evaluates the result.
pub fn run_experiment(config: &ExperimentConfig, episodes: &[Episode]) -> Result<RunMetrics> {
    let start = Instant::now();
    let out = train_run(config, episodes)?;
    let model = LawModel::new(config)?;
    let store = &out.checkpoint.params;
    let open_loop = open_loop_eval(&model, store, episodes)?;
    let latent_mse = match model.world {
        Some(_) => Some(heldout_latent_mse(&model, store, episodes)?),
        None => None,
    };
    Ok(RunMetrics {
        seed: config.seed,
        open_loop,
        latent_mse,
        final_losses: out.metrics.last().map(|m| m.losses).unwrap_or_default(),
        steps: out.checkpoint.step,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug)]
pub struct RowResult {
    pub name: String,
    pub config: ExperimentConfig,
    pub runs: Vec<RunMetrics>,
    /// Seeds whose run failed, with the error text.
    pub failures: Vec<(u64, String)>,
}

impl RowResult {
    fn values(&self, f: impl Fn(&RunMetrics) -> Option<f64>) -> Vec<f64> {
        self.runs.iter().filter_map(f).collect()
    }

    pub fn mean_l2(&self) -> f64 {
        mean_sd(&self.values(|r| Some(r.open_loop.l2_avg))).0
    }

    pub fn mean_latent_mse(&self) -> Option<f64> {
        let v = self.values(|r| r.latent_mse);
        (!v.is_empty()).then(|| mean_sd(&v).0)
    }
}

/// Mean and sample standard deviation; NaN where undefined.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every row of a suite for each seed in `seeds`. A failing run is
/// recorded on its row and the suite carries on.
pub fn ablation_run(
    rows: &[(String, ExperimentConfig)],
    seeds: &[u64],
    episodes: &[Episode],
    mut progress: impl FnMut(&str, u64, &Result<RunMetrics>),
) -> Vec<RowResult> {
    rows.iter()
        .map(|(name, base)| {
            let mut row = RowResult {
                name: name.clone(),
                config: base.clone(),
                runs: Vec::new(),
                failures: Vec::new(),
            };
            for &seed in seeds {
                let mut c = base.clone();
                c.seed = seed;
                let r = run_experiment(&c, episodes);
                progress(name, seed, &r);
                match r {
                    Ok(m) => row.runs.push(m),
                    Err(e) => row.failures.push((seed, e.to_string())),
                }
            }
            row
        })
        .collect()
}

const METRIC_NAMES: [&str; 9] = [
    "l2_1s",
    "l2_2s",
    "l2_3s",
    "l2_avg",
    "col_1s",
    "col_2s",
    "col_3s",
    "col_avg",
    "latent_mse",
];

fn metric_values(r: &RunMetrics) -> [Option<f64>; 9] {
    let o = &r.open_loop;
    [
        Some(o.l2_at[0]),
        Some(o.l2_at[1]),
        Some(o.l2_at[2]),
        Some(o.l2_avg),
        Some(o.collision_at[0]),
        Some(o.collision_at[1]),
        Some(o.collision_at[2]),
        Some(o.collision_avg),
        r.latent_mse,
    ]
}

/// One row per config: mean and standard deviation of every metric over
/// the successful seeds.
pub fn summary_csv(rows: &[RowResult]) -> String {
    let mut s = String::from("row,runs,failures");
    for m in METRIC_NAMES {
        let _ = write!(s, ",{m}_mean,{m}_sd");
    }
    s.push('\n');
    for row in rows {
        let _ = write!(s, "{},{},{}", row.name, row.runs.len(), row.failures.len());
        for i in 0..METRIC_NAMES.len() {
            let v = row.values(|r| metric_values(r)[i]);
            if v.is_empty() {
                s.push_str(",,");
            } else {
                let (m, sd) = mean_sd(&v);
                let _ = write!(s, ",{m},{sd}");
            }
        }
        s.push('\n');
    }
    s
}

/// Every individual run, including failures.
pub fn runs_csv(rows: &[RowResult]) -> String {
    let mut s = String::from("row,seed,status");
    for m in METRIC_NAMES {
        let _ = write!(s, ",{m}");
    }
    s.push_str(",final_loss,steps,seconds\n");
    for row in rows {
        for r in &row.runs {
            let _ = write!(s, "{},{},ok", row.name, r.seed);
            for v in metric_values(r) {
                match v {
                    Some(v) => {
                        let _ = write!(s, ",{v}");
                    }
                    None => s.push(','),
                }
            }
            let _ = writeln!(s, ",{},{},{:.1}", r.final_losses.total, r.steps, r.seconds);
        }
        for (seed, e) in &row.failures {
            let _ = write!(s, "{},{seed},\"failed: {}\"", row.name, e.replace('"', "'"));
            s.push_str(&",".repeat(METRIC_NAMES.len() + 3));
            s.push('\n');
        }
    }
    s
}
