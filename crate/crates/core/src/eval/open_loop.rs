//! Open-loop metrics: L2 displacement and collision rate at 1, 2 and 3 s.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::sim::episode::Episode;
use crate::sim::expert::{ExpertWaypoints, NUM_WAYPOINTS};
use crate::sim::world::{AGENT_RADIUS, EGO_RADIUS};
use crate::tensor::{ParameterStore, Tape};
use crate::trainer::{LawModel, Sample};

/// Seconds at which metrics are reported.
pub const HORIZONS_S: [usize; 3] = [1, 2, 3];

/// Zero-based waypoint index reached after `seconds` at 0.5 s spacing.
pub fn horizon_index(seconds: usize) -> usize {
    2 * seconds - 1
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct OpenLoopReport {
    pub l2_at: [f64; 3],
    pub l2_avg: f64,
    pub collision_at: [f64; 3],
    pub collision_avg: f64,
    pub samples: usize,
    /// Evaluation frames without the future needed for scoring.
    pub skipped: usize,
}

pub const OPEN_LOOP_HEADER: &str =
    "samples,skipped,l2_1s,l2_2s,l2_3s,l2_avg,col_1s,col_2s,col_3s,col_avg";

impl OpenLoopReport {
    pub fn csv_line(&self) -> String {
        let mut s = format!("{},{}", self.samples, self.skipped);
        for v in self
            .l2_at
            .iter()
            .chain([&self.l2_avg])
            .chain(&self.collision_at)
            .chain([&self.collision_avg])
        {
            let _ = write!(s, ",{v}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{OPEN_LOOP_HEADER}\n{}\n", self.csv_line())
    }
}

/// Frames of held-out episodes that have the full scoring future, plus the
/// count of those that do not.
pub fn eval_samples(episodes: &[Episode]) -> (Vec<Sample>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for (e, ep) in episodes.iter().enumerate() {
        if !ep.is_eval() {
            continue;
        }
        for frame in 0..ep.len() {
            if frame + NUM_WAYPOINTS < ep.len() {
                out.push(Sample { episode: e, frame });
            } else {
                skipped += 1;
            }
        }
    }
    (out, skipped)
}

/// Whether ego position `p` (ego frame at `s.frame`) touches any agent at
/// frame `s.frame + step + 1`.
fn collides(episodes: &[Episode], s: Sample, step: usize, p: [f64; 2]) -> bool {
    let ep = &episodes[s.episode];
    let ego = &ep.frames[s.frame].ego;
    let reach = EGO_RADIUS + AGENT_RADIUS;
    ep.frames[s.frame + step + 1].agents.iter().any(|a| {
        let q = ego.to_local(a.position);
        let (dx, dy) = (p[0] - q[0], p[1] - q[1]);
        dx * dx + dy * dy <= reach * reach
    })
}

/// Scores `predictions[i]` for `samples[i]`.
pub fn score(
    episodes: &[Episode],
    samples: &[Sample],
    predictions: &[ExpertWaypoints],
) -> Result<OpenLoopReport> {
    if samples.len() != predictions.len() {
        return Err(Error::shape(
            "predictions",
            &[samples.len()],
            &[predictions.len()],
        ));
    }
    if samples.is_empty() {
        return Err(Error::usage("no evaluation frames"));
    }
    let mut l2 = [0.0; 3];
    let mut hits = [0usize; 3];
    for (&s, pred) in samples.iter().zip(predictions) {
        let ep = episodes
            .get(s.episode)
            .filter(|e| s.frame + NUM_WAYPOINTS < e.len())
            .ok_or_else(|| Error::usage(format!("sample {s:?} lacks the scoring future")))?;
        let gt = &ep.waypoints[s.frame];
        // First step index with a collision, if any.
        let first_hit = (0..NUM_WAYPOINTS).find(|&j| collides(episodes, s, j, pred[j]));
        for (k, &sec) in HORIZONS_S.iter().enumerate() {
            let i = horizon_index(sec);
            let (dx, dy) = (pred[i][0] - gt[i][0], pred[i][1] - gt[i][1]);
            l2[k] += (dx * dx + dy * dy).sqrt();
            if first_hit.is_some_and(|j| j <= i) {
                hits[k] += 1;
            }
        }
    }
    let n = samples.len() as f64;
    let l2_at = l2.map(|v| v / n);
    let collision_at = hits.map(|h| h as f64 / n);
    Ok(OpenLoopReport {
        l2_at,
        l2_avg: l2_at.iter().sum::<f64>() / 3.0,
        collision_at,
        collision_avg: collision_at.iter().sum::<f64>() / 3.0,
        samples: samples.len(),
        skipped: 0,
    })
}

/// Planned waypoints for every sample, evaluated in batches without
/// recording gradients.
pub fn predict_all(
    model: &LawModel,
    store: &ParameterStore,
    episodes: &[Episode],
    samples: &[Sample],
    batch: usize,
) -> Result<Vec<ExpertWaypoints>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let mut tape = Tape::new();
        let w = tape.no_grad(|t| model.predict(t, store, episodes, chunk))?;
        let data = tape.value(w.points).data();
        for b in 0..chunk.len() {
            let mut p = [[0.0; 2]; NUM_WAYPOINTS];
            for (j, q) in p.iter_mut().enumerate() {
                let o = (b * NUM_WAYPOINTS + j) * 2;
                *q = [data[o], data[o + 1]];
            }
            out.push(p);
        }
    }
    Ok(out)
}

/// Open-loop evaluation of a trained model on the held-out episodes.
pub fn open_loop_eval(
    model: &LawModel,
    store: &ParameterStore,
    episodes: &[Episode],
) -> Result<OpenLoopReport> {
    let (samples, skipped) = eval_samples(episodes);
    let preds = predict_all(
        model,
        store,
        episodes,
        &samples,
        model.config.schedule.batch_size,
    )?;
    let mut r = score(episodes, &samples, &preds)?;
    r.skipped = skipped;
    Ok(r)
}
