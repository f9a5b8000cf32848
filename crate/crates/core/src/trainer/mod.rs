//! Loss composition, staged training loop and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod losses;
pub mod model;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, Framework, OptimizerConfig, ScheduleConfig};
pub use model::{LawModel, LossValues, Sample, Stage};

use crate::error::{Error, Result};
use crate::sim::episode::{is_train_seed, Episode};
use crate::tensor::{cosine_annealing_lr, AdamW, ParameterStore, Tape};

pub const METRICS_HEADER: &str =
    "step,stage,lr,loss_total,loss_latent,loss_waypoint,loss_agent,loss_map";

// Separates the batch-order stream from the initialization stream.
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4531;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub stage: u8,
    pub lr: f64,
    pub losses: LossValues,
}

impl MetricsRecord {
    pub fn csv_line(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.stage, self.lr, l.total, l.latent, l.waypoint, l.agent, l.map
        )
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// One optimisation step on `batch`: forward, backward, AdamW over the
/// parameters trainable in `stage`.
pub fn train_step(
    model: &LawModel,
    store: &mut ParameterStore,
    opt: &mut AdamW,
    episodes: &[Episode],
    batch: &[Sample],
    stage: Stage,
    lr: f64,
) -> Result<LossValues> {
    let mut tape = Tape::new();
    let (total, vals) = model.batch_losses(&mut tape, store, episodes, batch, stage)?;
    let grads = tape.backward(total)?;
    store.set_grads(&tape, &grads);
    opt.step(store, lr, |n| model.trainable(stage, n))?;
    Ok(vals)
}

/// Training samples for `stage`: frames of even-seed episodes with enough
/// context, in (episode, frame) order and capped by the schedule. Also
/// returns how many frames were skipped for lack of context.
pub fn training_samples(
    model: &LawModel,
    episodes: &[Episode],
    stage: Stage,
) -> (Vec<Sample>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for (e, ep) in episodes.iter().enumerate() {
        if !is_train_seed(ep.seed) {
            continue;
        }
        for frame in 0..ep.len() {
            let s = Sample { episode: e, frame };
            if model.sample_fits(episodes, s, stage) {
                out.push(s);
            } else {
                skipped += 1;
            }
        }
    }
    let cap = model.config.schedule.max_train_frames;
    if cap > 0 && out.len() > cap {
        out.truncate(cap);
    }
    (out, skipped)
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
    /// Frames left out for lack of past or future context.
    pub skipped: usize,
}

/// Full training run. Stage 1 (when configured) precedes stage 2; each
/// stage has its own cosine schedule. Batches are drawn without
/// replacement each epoch in a seeded order.
pub fn train_run(config: &ExperimentConfig, episodes: &[Episode]) -> Result<TrainOutput> {
    train_run_with(config, episodes, |_| {})
}

/// [`train_run`] reporting every record as it is produced.
pub fn train_run_with(
    config: &ExperimentConfig,
    episodes: &[Episode],
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<TrainOutput> {
    let model = LawModel::new(config)?;
    let mut store = model.init_params()?;
    let mut opt = AdamW::new(config.optimizer.adamw());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let sched = config.schedule;

    let mut stages = Vec::new();
    if config.has_stage1() {
        stages.push((Stage::One, sched.stage1_epochs));
    }
    stages.push((Stage::Two, sched.stage2_epochs));

    let mut metrics = Vec::new();
    let mut step = 0u64;
    let mut skipped = 0;
    for (stage, epochs) in stages {
        let (mut samples, s) = training_samples(&model, episodes, stage);
        skipped += s;
        if samples.is_empty() {
            return Err(Error::Config(format!(
                "no training frames with enough context for stage {}",
                stage.number()
            )));
        }
        let per_epoch = samples.len().div_ceil(sched.batch_size);
        let total = per_epoch * epochs;
        let mut k = 0;
        for _ in 0..epochs {
            samples.shuffle(&mut rng);
            for batch in samples.chunks(sched.batch_size) {
                let lr = if sched.cosine {
                    cosine_annealing_lr(k, total, config.optimizer.lr)?
                } else {
                    config.optimizer.lr
                };
                let losses = train_step(&model, &mut store, &mut opt, episodes, batch, stage, lr)?;
                let rec = MetricsRecord {
                    step,
                    stage: stage.number(),
                    lr,
                    losses,
                };
                on_record(&rec);
                metrics.push(rec);
                step += 1;
                k += 1;
            }
        }
    }
    store.zero_grad();
    Ok(TrainOutput {
        checkpoint: Checkpoint {
            config: config.clone(),
            params: store,
            optimizer: opt,
            step,
        },
        metrics,
        skipped,
    })
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    std::fs::write(path, metrics_csv(records)).map_err(|e| Error::io(path, e))
}
