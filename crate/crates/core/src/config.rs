//! Run configuration: one JSON document holding the diffusion spec choice and
//! every training, distillation and evaluation knob, expanded from one root seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artrl::{ActorInit, DistillConfig, DistillMode, TrainConfig};
use crate::diffusion::{DiffusionSpec, GaussianMixture, LinearGaussian1D, ScoreModel, Sde};
use crate::error::{ArtError, Result};
use crate::eval::{default_edm_rows, SweepConfig, SweepSchedule, W2Mode, DEFAULT_KS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SpecChoice {
    /// `N(0, 1)` data, `T = 3`.
    #[serde(rename = "demo-1d")]
    Demo1d,
    GaussianMixture {
        horizon: f64,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
    },
}

impl SpecChoice {
    pub fn build(&self) -> Result<(DiffusionSpec, Box<dyn ScoreModel>)> {
        match self {
            SpecChoice::Demo1d => Ok((DiffusionSpec::demo_1d(), Box::new(LinearGaussian1D))),
            SpecChoice::GaussianMixture { horizon, weights, means, variances } => {
                let dim = means.first().map_or(0, Vec::len);
                let spec = DiffusionSpec::new(dim, *horizon, Sde::QuadraticVariance)?;
                let gm = GaussianMixture::new(weights.clone(), means.clone(), variances.clone())?;
                Ok((spec, Box::new(gm)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub spec: SpecChoice,
    /// K, steps per trajectory.
    pub steps: usize,
    /// N, training iterations.
    pub iterations: usize,
    pub lambda: f64,
    pub eps: f64,
    pub v_max: Option<f64>,
    pub theta_clamp: Option<(f64, f64)>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub multiplier_lr: f64,
    pub hidden: Vec<usize>,
    pub actor_init: ActorInit,
    /// M, distillation rollouts.
    pub rollouts: usize,
    pub distill_mode: DistillMode,
    pub sweep_ks: Vec<usize>,
    pub w2: W2Mode,
    pub edm: Vec<SweepSchedule>,
    /// Root seed for the `init`, `rollout`, `distill` and `eval` substreams.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let d = DistillConfig::default();
        Self {
            name: "demo".into(),
            spec: SpecChoice::Demo1d,
            steps: t.steps,
            iterations: t.iterations,
            lambda: t.lambda,
            eps: t.eps,
            v_max: t.v_max,
            theta_clamp: t.theta_clamp,
            actor_lr: t.actor_lr,
            critic_lr: t.critic_lr,
            multiplier_lr: t.multiplier_lr,
            hidden: t.hidden,
            actor_init: t.actor_init,
            rollouts: d.rollouts,
            distill_mode: d.mode,
            sweep_ks: DEFAULT_KS.to_vec(),
            w2: W2Mode::ClosedForm,
            edm: default_edm_rows(),
            seed: 0,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| ArtError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(ArtError::Config(format!("invalid experiment name {:?}", self.name)));
        }
        if self.rollouts < 2 {
            return Err(ArtError::Config("need at least 2 distillation rollouts".into()));
        }
        if self.sweep_ks.contains(&0) {
            return Err(ArtError::Config("sweep step counts must be positive".into()));
        }
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            iterations: self.iterations,
            lambda: self.lambda,
            eps: self.eps,
            v_max: self.v_max,
            theta_clamp: self.theta_clamp,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            multiplier_lr: self.multiplier_lr,
            hidden: self.hidden.clone(),
            actor_init: self.actor_init,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig { rollouts: self.rollouts, steps: self.steps, mode: self.distill_mode, seed: self.seed }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig { ks: self.sweep_ks.clone(), mode: self.w2, seed: self.seed }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_losslessly() {
        let cfg = RunConfig { lambda: 0.1 + 0.2, output_dir: Some("out".into()), ..RunConfig::default() };
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"name":"x","iterations":7}"#).unwrap();
        assert_eq!(cfg.iterations, 7);
        assert_eq!(cfg.steps, 100);
        assert_eq!(cfg.train_config().lambda, 0.1);
        assert_eq!(cfg.distill_config().rollouts, 10_000);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"lamda":0.1}"#).is_err());
    }

    #[test]
    fn mixture_spec_builds() {
        let choice = SpecChoice::GaussianMixture {
            horizon: 2.0,
            weights: vec![1.0, 3.0],
            means: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            variances: vec![vec![0.5, 0.5], vec![0.2, 0.2]],
        };
        let (spec, score) = choice.build().unwrap();
        assert_eq!(spec.dim, 2);
        assert_eq!(score.dim(), 2);
        let text = serde_json::to_string(&choice).unwrap();
        assert!(text.starts_with(r#"{"kind":"gaussian-mixture""#));
        assert_eq!(serde_json::to_string(&SpecChoice::Demo1d).unwrap(), r#"{"kind":"demo-1d"}"#);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let bad = RunConfig { lambda: -1.0, ..RunConfig::default() };
        assert!(matches!(bad.validate(), Err(ArtError::Config(_))));
        let bad = RunConfig { name: "a/b".into(), ..RunConfig::default() };
        assert!(bad.validate().is_err());
    }
}
