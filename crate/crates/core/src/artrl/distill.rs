use serde::{Deserialize, Serialize};

use super::{rollout_from, PolicyParams, RolloutMode};
use crate::diffusion::{DiffusionSpec, ScoreModel};
use crate::error::{ArtError, Result};
use crate::eval::{theta_stats, ThetaStats};
use crate::par::{self, Execution};
use crate::schedule::ThetaCurve;
use crate::seed::{self, Substream};

/// Below this many rollouts the per-step statistics are flagged as unreliable.
pub const MIN_RELIABLE_ROLLOUTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillMode {
    /// Execute the policy mean; the spread then reflects only the initial states.
    Mean,
    /// Execute sampled actions, as during training.
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub rollouts: usize,
    pub steps: usize,
    pub mode: DistillMode,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { rollouts: 10_000, steps: 100, mode: DistillMode::Mean, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutput {
    pub curve: ThetaCurve,
    pub stats: ThetaStats,
    /// Rollouts dropped for a non-finite state or a nonpositive budget.
    pub dropped: usize,
    pub warning: Option<String>,
}

/// Roll out `M` fresh trajectories under the frozen policy, rescale each
/// theta sequence to the time budget `T`, and average per step.
pub fn distill(
    policy: &PolicyParams,
    spec: &DiffusionSpec,
    score: &dyn ScoreModel,
    config: &DistillConfig,
    exec: Execution,
) -> Result<DistillOutput> {
    if config.steps < 1 {
        return Err(ArtError::Argument("K must be at least 1".into()));
    }
    let stream = Substream::new(config.seed, seed::DISTILL);
    let horizon = spec.horizon;
    let mode = match config.mode {
        DistillMode::Mean => RolloutMode::Mean,
        DistillMode::Sampled => RolloutMode::Sampled,
    };
    let runs = par::map_indexed(exec, config.rollouts, |i| -> Result<Option<Vec<f64>>> {
        let mut rng = stream.rng(i as u64);
        let mut x0 = vec![0.0; spec.dim];
        score.sample_marginal(horizon, &mut rng, &mut x0);
        let traj = match rollout_from(spec, score, policy, config.steps, &x0, mode, &mut rng) {
            Ok(t) => t,
            Err(ArtError::NumericOverflow { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let total: f64 = traj.theta.iter().sum::<f64>() * traj.dt;
        if !(total > 0.0 && total.is_finite()) {
            return Ok(None);
        }
        let c = horizon / total;
        Ok(Some(traj.theta.iter().map(|v| v * c).collect()))
    });
    let mut curves = Vec::with_capacity(config.rollouts);
    let mut dropped = 0;
    for r in runs {
        match r? {
            Some(c) => curves.push(c),
            None => dropped += 1,
        }
    }
    let stats = theta_stats(&curves)?;
    let curve = ThetaCurve::normalized(horizon, stats.mean.clone())?;
    let warning = (curves.len() < MIN_RELIABLE_ROLLOUTS).then(|| {
        format!("only {} rollouts; per-step statistics are unreliable below {MIN_RELIABLE_ROLLOUTS}", curves.len())
    });
    Ok(DistillOutput { curve, stats, dropped, warning })
}
