//! Open-loop and closed-loop evaluation, dataset files and ablations.

pub mod ablation;
pub mod closed_loop;
pub mod dataset;
pub mod open_loop;

pub use closed_loop::{closed_loop_eval, ClosedLoopReport, RoutesConfig};
pub use dataset::Dataset;
pub use open_loop::{open_loop_eval, OpenLoopReport};

use crate::error::{Error, Result};
use crate::sim::episode::Episode;
use crate::tensor::{ParameterStore, Tape};
use crate::trainer::{LawModel, Sample, Stage};

/// Mean latent loss of the world model over held-out frames with enough
/// future, in batches of the training size.
pub fn heldout_latent_mse(
    model: &LawModel,
    store: &ParameterStore,
    episodes: &[Episode],
) -> Result<f64> {
    if model.world.is_none() {
        return Err(Error::usage("latent error needs a world model"));
    }
    let samples: Vec<Sample> = episodes
        .iter()
        .enumerate()
        .filter(|(_, e)| e.is_eval())
        .flat_map(|(i, e)| (0..e.len()).map(move |frame| Sample { episode: i, frame }))
        .filter(|&s| model.sample_fits(episodes, s, Stage::Two))
        .collect();
    if samples.is_empty() {
        return Err(Error::usage("no held-out frames with enough context"));
    }
    let mut sum = 0.0;
    for chunk in samples.chunks(model.config.schedule.batch_size) {
        let mut tape = Tape::new();
        let (_, vals) =
            tape.no_grad(|t| model.batch_losses(t, store, episodes, chunk, Stage::Two))?;
        sum += vals.latent * chunk.len() as f64;
    }
    Ok(sum / samples.len() as f64)
}
