use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{ascend, gradients, multiplier_update, rollout, CriticParams, FeatureMap, FeatureMode, PolicyParams};
use crate::diffusion::{DiffusionSpec, ScoreModel};
use crate::error::{ArtError, Result};
use crate::nn::{AdamConfig, AdamState, DenseNet, NetCheckpoint};
use crate::seed::{self, Substream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ActorInit {
    /// He-uniform weights and zero biases, like the critic.
    He,
    /// He-uniform hidden layers, output weights scaled by `scale` and output
    /// bias 1, so the initial policy mean is close to the uniform clock.
    UnitMean { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Steps per trajectory.
    pub steps: usize,
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
    /// Defaults to the dimension rule of [`FeatureMap::new`].
    pub feature_mode: Option<FeatureMode>,
    /// Largest tolerated fraction of aborted iterations.
    pub max_abort_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            iterations: 5000,
            lambda: 0.1,
            eps: 1e-6,
            v_max: Some(1e4),
            theta_clamp: Some((-10.0, 10.0)),
            actor_lr: 1e-4,
            critic_lr: 1e-4,
            multiplier_lr: 1e-4,
            hidden: vec![128, 128, 128],
            actor_init: ActorInit::UnitMean { scale: 0.01 },
            feature_mode: None,
            max_abort_fraction: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ArtError::Config(m));
        if self.steps < 1 {
            return bad("steps must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a nonnegative number, got {}", self.lambda));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if let Some(v) = self.v_max {
            if !(v > 0.0) {
                return bad(format!("v_max must be positive, got {v}"));
            }
        }
        if let Some((lo, hi)) = self.theta_clamp {
            if !(lo < hi) {
                return bad(format!("theta clamp [{lo}, {hi}] is empty"));
            }
        }
        for (name, lr) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr), ("multiplier_lr", self.multiplier_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be a nonnegative number, got {lr}"));
            }
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        Ok(())
    }

    fn sizes(&self, input: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend(&self.hidden);
        s.push(1);
        s
    }

    fn feature_map(&self, spec: &DiffusionSpec) -> FeatureMap {
        match self.feature_mode {
            Some(mode) => FeatureMap::with_mode(spec.horizon, spec.dim, mode),
            None => FeatureMap::new(spec.horizon, spec.dim),
        }
    }
}

/// Mutable training state besides the two networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub gamma: f64,
    pub iteration: usize,
    pub aborted: usize,
    /// Optimizer steps skipped because of non-finite gradients.
    pub skipped_updates: usize,
    pub actor_adam: AdamState,
    pub critic_adam: AdamState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub gamma: f64,
    pub abs_gap: f64,
    /// `-sum_k (|Q|_k theta_k^2 + gamma theta_k) dt + gamma T`.
    pub reward: f64,
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub policy: PolicyParams,
    pub critic: CriticParams,
    pub state: TrainState,
    pub history: Vec<HistoryRow>,
}

impl TrainOutput {
    /// Mean of `|psi_K - T|` over the last `fraction` of completed iterations.
    pub fn tail_abs_gap(&self, fraction: f64) -> f64 {
        let rows: Vec<&HistoryRow> = self.history.iter().filter(|r| !r.aborted).collect();
        let n = ((rows.len() as f64 * fraction).ceil() as usize).clamp(1, rows.len().max(1));
        let tail = &rows[rows.len().saturating_sub(n)..];
        tail.iter().map(|r| r.abs_gap).sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn checkpoint(&self, config: &TrainConfig) -> TrainCheckpoint {
        TrainCheckpoint {
            config: config.clone(),
            features: self.policy.features,
            gamma: self.state.gamma,
            iteration: self.state.iteration,
            aborted: self.state.aborted,
            actor: NetCheckpoint::new(&self.policy.actor, &self.state.actor_adam, config.seed),
            critic: NetCheckpoint::new(&self.critic.net, &self.state.critic_adam, config.seed),
        }
    }

    /// `iteration,gamma,abs_gap,reward,aborted`.
    pub fn write_history_csv<W: Write>(&self, out: W) -> Result<()> {
        let rows = self.history.iter().map(|r| {
            vec![
                r.iteration.to_string(),
                r.gamma.to_string(),
                r.abs_gap.to_string(),
                r.reward.to_string(),
                r.aborted.to_string(),
            ]
        });
        crate::formats::write_csv(out, &["iteration", "gamma", "abs_gap", "reward", "aborted"], rows)
    }
}

/// Everything needed to resume or reuse a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCheckpoint {
    pub config: TrainConfig,
    pub features: FeatureMap,
    pub gamma: f64,
    pub iteration: usize,
    pub aborted: usize,
    pub actor: NetCheckpoint,
    pub critic: NetCheckpoint,
}

impl TrainCheckpoint {
    pub fn policy(&self) -> Result<PolicyParams> {
        let (actor, _) = self.actor.restore()?;
        if actor.input_dim() != self.features.len() {
            return Err(ArtError::Format("actor input size does not match its features".into()));
        }
        Ok(PolicyParams {
            actor,
            features: self.features,
            lambda: self.config.lambda,
            eps: self.config.eps,
            v_max: self.config.v_max,
            theta_clamp: self.config.theta_clamp,
        })
    }

    pub fn critic(&self) -> Result<CriticParams> {
        let (net, _) = self.critic.restore()?;
        Ok(CriticParams { net, features: self.features, lambda: self.config.lambda })
    }
}

/// Seeded initial networks and optimizer state.
pub fn initial_params(spec: &DiffusionSpec, config: &TrainConfig) -> Result<(PolicyParams, CriticParams, TrainState)> {
    config.validate()?;
    let features = config.feature_map(spec);
    let sizes = config.sizes(features.len());
    let init = Substream::new(config.seed, seed::INIT);
    let mut actor = DenseNet::init(&sizes, &mut init.rng(0))?;
    if let ActorInit::UnitMean { scale } = config.actor_init {
        actor.scale_output_weights(scale);
        actor.set_output_bias(1.0);
    }
    let critic_net = DenseNet::init(&sizes, &mut init.rng(1))?;
    let n = actor.params().len();
    let adam = |lr| AdamState::new(n, AdamConfig { lr, ..AdamConfig::default() });
    let state = TrainState {
        gamma: 0.0,
        iteration: 0,
        aborted: 0,
        skipped_updates: 0,
        actor_adam: adam(config.actor_lr),
        critic_adam: adam(config.critic_lr),
    };
    let policy = PolicyParams {
        actor,
        features,
        lambda: config.lambda,
        eps: config.eps,
        v_max: config.v_max,
        theta_clamp: config.theta_clamp,
    };
    let critic = CriticParams { net: critic_net, features, lambda: config.lambda };
    Ok((policy, critic, state))
}

/// Run `config.iterations` rounds of rollout, critic, actor and multiplier updates.
pub fn train(spec: &DiffusionSpec, score: &dyn ScoreModel, config: &TrainConfig) -> Result<TrainOutput> {
    let (mut policy, mut critic, mut state) = initial_params(spec, config)?;
    let stream = Substream::new(config.seed, seed::ROLLOUT);
    let mut history = Vec::with_capacity(config.iterations);
    for n in 0..config.iterations {
        state.iteration = n + 1;
        let traj = match rollout(spec, score, &policy, config.steps, &mut stream.rng(n as u64)) {
            Ok(t) => t,
            Err(ArtError::NumericOverflow { .. }) => {
                state.aborted += 1;
                history.push(HistoryRow { iteration: n + 1, gamma: state.gamma, abs_gap: f64::NAN, reward: f64::NAN, aborted: true });
                continue;
            }
            Err(e) => return Err(e),
        };
        let gamma = state.gamma;
        let g = gradients(&policy, &critic, &traj, gamma)?;
        if !ascend(&mut critic.net, &mut state.critic_adam, &g.critic)? {
            state.skipped_updates += 1;
        }
        if !ascend(&mut policy.actor, &mut state.actor_adam, &g.actor)? {
            state.skipped_updates += 1;
        }
        state.gamma = multiplier_update(gamma, &traj, config.multiplier_lr);
        let cost: f64 = (0..traj.steps())
            .map(|k| (traj.qnorm[k] * traj.theta[k] * traj.theta[k] + gamma * traj.theta[k]) * traj.dt)
            .sum();
        history.push(HistoryRow {
            iteration: n + 1,
            gamma: state.gamma,
            abs_gap: (traj.psi_terminal - traj.horizon).abs(),
            reward: gamma * traj.horizon - cost,
            aborted: false,
        });
    }
    if config.iterations > 0 && state.aborted as f64 > config.max_abort_fraction * config.iterations as f64 {
        return Err(ArtError::TrainingHealth { aborted: state.aborted, total: config.iterations });
    }
    Ok(TrainOutput { policy, critic, state, history })
}
