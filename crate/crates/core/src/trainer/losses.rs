use crate::decoders::{PerceptionOutputs, PerceptionTargets, Waypoints};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Mean over waypoints (and batch) of the per-waypoint L1 distance.
pub fn waypoint_loss(tape: &mut Tape, pred: &Waypoints, expert: Var) -> Result<Var> {
    tape.l1_loss(pred.points, expert)
}

/// Perception-free objective: latent plus waypoint loss; the latent term
/// is absent when the world model is off.
pub fn compose_loss_pf(tape: &mut Tape, latent: Option<Var>, waypoint: Var) -> Result<Var> {
    match latent {
        Some(l) => tape.add(l, waypoint),
        None => Ok(waypoint),
    }
}

/// Perception-based objective: latent + waypoint + perception.
pub fn compose_loss_pb(
    tape: &mut Tape,
    latent: Option<Var>,
    waypoint: Var,
    perception: Var,
) -> Result<Var> {
    let base = compose_loss_pf(tape, latent, waypoint)?;
    tape.add(base, perception)
}

/// Masked mean-L1 agent loss and mean-L1 map loss over a batch.
pub fn perception_loss(
    tape: &mut Tape,
    outputs: &PerceptionOutputs,
    targets: &[PerceptionTargets],
) -> Result<(Var, Var)> {
    let b = tape.shape(outputs.agent_trajectories)[0];
    if targets.len() != b {
        return Err(Error::shape("perception targets", &[b], &[targets.len()]));
    }
    let mut agents = Vec::new();
    let mut mask = Vec::new();
    let mut map = Vec::new();
    for t in targets {
        agents.extend_from_slice(t.agents.data());
        mask.extend_from_slice(&t.agent_mask);
        map.extend_from_slice(t.map.data());
    }
    let at = tape.constant(Tensor::new(
        tape.shape(outputs.agent_trajectories).to_vec(),
        agents,
    )?);
    let mt = tape.constant(Tensor::new(
        tape.shape(outputs.map_polylines).to_vec(),
        map,
    )?);
    let la = tape.masked_l1_loss(outputs.agent_trajectories, at, &mask)?;
    let lm = tape.l1_loss(outputs.map_polylines, mt)?;
    Ok((la, lm))
}
