//! Actor-critic learning of a state-feedback time warp `theta(t, x, psi)`.
//!
//! The policy is Gaussian with mean given by the actor network and variance
//! `lambda / |Q|`; the critic represents `V(t, x, psi) = net(features) + lambda t`.
//! Training follows one rollout plus one critic, actor and multiplier update
//! per iteration; [`distill`] turns the trained policy into a time-only curve.

mod distill;
mod train;

pub use distill::{distill, DistillConfig, DistillMode, DistillOutput};
pub use train::{
    initial_params, train, ActorInit, HistoryRow, TrainCheckpoint, TrainConfig, TrainOutput, TrainState,
};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{curvature_at, pf_field_at, DiffusionSpec, ScoreModel};
use crate::error::{ArtError, Result};
use crate::nn::{DenseNet, Tape};

/// States up to this dimension are fed to the networks coordinate-wise.
pub const FULL_FEATURE_MAX_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// `(t / T, psi / T, x_1, .., x_d)`.
    Full,
    /// `(t / T, psi / T, |x| / sqrt(d))`.
    Summary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub horizon: f64,
    pub dim: usize,
    pub mode: FeatureMode,
}

impl FeatureMap {
    /// Full features for `dim <= 8`, the summary otherwise.
    pub fn new(horizon: f64, dim: usize) -> Self {
        let mode = if dim <= FULL_FEATURE_MAX_DIM { FeatureMode::Full } else { FeatureMode::Summary };
        Self { horizon, dim, mode }
    }

    pub fn with_mode(horizon: f64, dim: usize, mode: FeatureMode) -> Self {
        Self { horizon, dim, mode }
    }

    pub fn len(&self) -> usize {
        match self.mode {
            FeatureMode::Full => 2 + self.dim,
            FeatureMode::Summary => 3,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn write(&self, t: f64, x: &[f64], psi: f64, out: &mut Vec<f64>) {
        out.clear();
        out.push(t / self.horizon);
        out.push(psi / self.horizon);
        match self.mode {
            FeatureMode::Full => out.extend_from_slice(x),
            FeatureMode::Summary => {
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                out.push(norm / (self.dim as f64).sqrt());
            }
        }
    }

    pub fn eval(&self, t: f64, x: &[f64], psi: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        self.write(t, x, psi, &mut out);
        out
    }

    /// Chain rule from feature gradients to `(d/dx, d/dpsi)`.
    pub fn pullback(&self, x: &[f64], grad: &[f64]) -> (Vec<f64>, f64) {
        let d_psi = grad[1] / self.horizon;
        let d_x = match self.mode {
            FeatureMode::Full => grad[2..].to_vec(),
            FeatureMode::Summary => {
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    vec![0.0; x.len()]
                } else {
                    let c = grad[2] / (norm * (self.dim as f64).sqrt());
                    x.iter().map(|v| c * v).collect()
                }
            }
        };
        (d_x, d_psi)
    }
}

/// Features with the default mode for `x.len()`.
pub fn features(horizon: f64, t: f64, x: &[f64], psi: f64) -> Vec<f64> {
    FeatureMap::new(horizon, x.len()).eval(t, x, psi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub actor: DenseNet,
    pub features: FeatureMap,
    pub lambda: f64,
    pub eps: f64,
    pub v_max: Option<f64>,
    pub theta_clamp: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicySample {
    pub theta: f64,
    pub mean: f64,
    pub var: f64,
}

impl PolicyParams {
    /// `min(lambda / max(|Q|, eps), v_max)`.
    pub fn variance(&self, qnorm: f64) -> f64 {
        let v = self.lambda / qnorm.max(self.eps);
        match self.v_max {
            Some(cap) => v.min(cap),
            None => v,
        }
    }

    pub fn clamp(&self, theta: f64) -> f64 {
        match self.theta_clamp {
            Some((lo, hi)) => theta.clamp(lo, hi),
            None => theta,
        }
    }

    pub fn mean(&self, t: f64, x: &[f64], psi: f64) -> Result<f64> {
        self.actor.forward(&self.features.eval(t, x, psi))
    }

    /// Draw `theta ~ N(mean, var)` and clamp. A zero variance draws nothing.
    pub fn draw<R: Rng + ?Sized>(&self, mean: f64, var: f64, rng: &mut R) -> f64 {
        if var > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            self.clamp(mean + var.sqrt() * z)
        } else {
            self.clamp(mean)
        }
    }
}

pub fn policy_sample<R: Rng + ?Sized>(
    policy: &PolicyParams,
    spec: &DiffusionSpec,
    score: &dyn ScoreModel,
    t: f64,
    x: &[f64],
    psi: f64,
    rng: &mut R,
) -> Result<PolicySample> {
    let s = spec.remaining_time(psi)?;
    let qnorm = curvature_at(spec, score, s, x).norm;
    let mean = policy.mean(t, x, psi)?;
    let var = policy.variance(qnorm);
    Ok(PolicySample { theta: policy.draw(mean, var, rng), mean, var })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticParams {
    pub net: DenseNet,
    pub features: FeatureMap,
    pub lambda: f64,
}

impl CriticParams {
    /// `net(features) + lambda t`.
    pub fn value(&self, t: f64, x: &[f64], psi: f64) -> Result<f64> {
        Ok(self.net.forward(&self.features.eval(t, x, psi))? + self.lambda * t)
    }
}

/// Value assigned to every terminal state: `(gamma + lambda) T`, the
/// multiplier constant plus the structural shift at `t = T`.
pub fn terminal_value(lambda: f64, gamma: f64, horizon: f64) -> f64 {
    (gamma + lambda) * horizon
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dim: usize,
    pub horizon: f64,
    pub dt: f64,
    pub t: Vec<f64>,
    /// Row-major `K x d`.
    pub x: Vec<f64>,
    pub psi: Vec<f64>,
    pub theta: Vec<f64>,
    pub qnorm: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Row-major `K x d` probability-flow field at each state.
    pub field: Vec<f64>,
    pub x_terminal: Vec<f64>,
    pub psi_terminal: f64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.t.len()
    }

    pub fn x_at(&self, k: usize) -> &[f64] {
        if k == self.steps() {
            &self.x_terminal
        } else {
            &self.x[k * self.dim..(k + 1) * self.dim]
        }
    }

    pub fn psi_at(&self, k: usize) -> f64 {
        if k == self.steps() {
            self.psi_terminal
        } else {
            self.psi[k]
        }
    }

    /// Whether step `k` moved `psi` without hitting a clamp.
    fn psi_free(&self, k: usize) -> bool {
        let next = self.psi[k] + self.dt * self.theta[k];
        (0.0..=self.horizon).contains(&next)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RolloutMode {
    /// Execute `theta ~ pi(. | t, x, psi)`.
    Sampled,
    /// Execute the (clamped) policy mean.
    Mean,
}

/// Roll out from `x_0 ~ p_T`, `psi_0 = 0`, under sampled actions.
pub fn rollout<R: Rng>(
    spec: &DiffusionSpec,
    score: &dyn ScoreModel,
    policy: &PolicyParams,
    steps: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut x0 = vec![0.0; spec.dim];
    score.sample_marginal(spec.horizon, rng, &mut x0);
    rollout_from(spec, score, policy, steps, &x0, RolloutMode::Sampled, rng)
}

/// `x_{k+1} = x_k + dt theta_k F(x_k, psi_k)`, `psi_{k+1} = clamp(psi_k + dt theta_k, 0, T)`.
pub fn rollout_from<R: Rng + ?Sized>(
    spec: &DiffusionSpec,
    score: &dyn ScoreModel,
    policy: &PolicyParams,
    steps: usize,
    x0: &[f64],
    mode: RolloutMode,
    rng: &mut R,
) -> Result<Trajectory> {
    if steps < 1 {
        return Err(ArtError::Argument("K must be at least 1".into()));
    }
    let d = spec.dim;
    if x0.len() != d || score.dim() != d {
        return Err(ArtError::Argument(format!("state has {} coordinates, spec has {d}", x0.len())));
    }
    let horizon = spec.horizon;
    let dt = horizon / steps as f64;
    let mut tr = Trajectory {
        dim: d,
        horizon,
        dt,
        t: Vec::with_capacity(steps),
        x: Vec::with_capacity(steps * d),
        psi: Vec::with_capacity(steps),
        theta: Vec::with_capacity(steps),
        qnorm: Vec::with_capacity(steps),
        mean: Vec::with_capacity(steps),
        var: Vec::with_capacity(steps),
        field: Vec::with_capacity(steps * d),
        x_terminal: Vec::new(),
        psi_terminal: 0.0,
    };
    let mut x = x0.to_vec();
    let mut psi = 0.0;
    let mut feat = Vec::with_capacity(policy.features.len());
    let mut f = vec![0.0; d];
    for k in 0..steps {
        let t = k as f64 * dt;
        let s = horizon - psi;
        pf_field_at(spec, score, s, &x, &mut f);
        let qnorm = curvature_at(spec, score, s, &x).norm;
        policy.features.write(t, &x, psi, &mut feat);
        let mean = policy.actor.forward(&feat)?;
        let var = policy.variance(qnorm);
        let theta = match mode {
            RolloutMode::Sampled => policy.draw(mean, var, rng),
            RolloutMode::Mean => policy.clamp(mean),
        };
        tr.t.push(t);
        tr.x.extend_from_slice(&x);
        tr.psi.push(psi);
        tr.theta.push(theta);
        tr.qnorm.push(qnorm);
        tr.mean.push(mean);
        tr.var.push(var);
        tr.field.extend_from_slice(&f);
        for (xi, fi) in x.iter_mut().zip(&f) {
            *xi += dt * theta * fi;
        }
        psi = (psi + dt * theta).clamp(0.0, horizon);
        if !(x.iter().all(|v| v.is_finite()) && psi.is_finite() && mean.is_finite() && qnorm.is_finite()) {
            return Err(ArtError::NumericOverflow { step: k });
        }
    }
    tr.x_terminal = x;
    tr.psi_terminal = psi;
    Ok(tr)
}

/// Critic values `V_0..V_{K-1}` along a trajectory plus the terminal value,
/// with the tapes needed for gradients.
fn critic_pass(critic: &CriticParams, traj: &Trajectory, gamma: f64) -> Result<(Vec<f64>, Vec<Tape>)> {
    let k = traj.steps();
    let mut values = Vec::with_capacity(k + 1);
    let mut tapes = vec![Tape::default(); k];
    let mut feat = Vec::with_capacity(critic.features.len());
    for (i, tape) in tapes.iter_mut().enumerate() {
        critic.features.write(traj.t[i], traj.x_at(i), traj.psi[i], &mut feat);
        values.push(critic.net.forward_with(&feat, tape)? + critic.lambda * traj.t[i]);
    }
    values.push(terminal_value(critic.lambda, gamma, traj.horizon));
    Ok((values, tapes))
}

fn residuals_from(traj: &Trajectory, values: &[f64], gamma: f64) -> Vec<f64> {
    (0..traj.steps())
        .map(|k| {
            let th = traj.theta[k];
            values[k + 1] - values[k] - gamma * th * traj.dt - traj.qnorm[k] * th * th * traj.dt
        })
        .collect()
}

/// `V_{k+1} - V_k - gamma theta_k dt - |Q|_k theta_k^2 dt`.
pub fn td_residual(critic: &CriticParams, traj: &Trajectory, gamma: f64, k: usize) -> Result<f64> {
    let n = traj.steps();
    if k >= n {
        return Err(ArtError::Argument(format!("step {k} out of range for K = {n}")));
    }
    let v_k = critic.value(traj.t[k], traj.x_at(k), traj.psi[k])?;
    let v_next = if k + 1 == n {
        terminal_value(critic.lambda, gamma, traj.horizon)
    } else {
        critic.value(traj.t[k + 1], traj.x_at(k + 1), traj.psi[k + 1])?
    };
    let th = traj.theta[k];
    Ok(v_next - v_k - gamma * th * traj.dt - traj.qnorm[k] * th * th * traj.dt)
}

/// All TD residuals of a trajectory.
pub fn td_residuals(critic: &CriticParams, traj: &Trajectory, gamma: f64) -> Result<Vec<f64>> {
    let (values, _) = critic_pass(critic, traj, gamma)?;
    Ok(residuals_from(traj, &values, gamma))
}

/// Accumulated gradients for one iteration, before the optimizer steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub residuals: Vec<f64>,
    /// `sum_k dnet/dtheta_c (k) * delta_k`.
    pub critic: Vec<f64>,
    /// Score-function gradient, or the deterministic policy gradient when
    /// every step has zero variance.
    pub actor: Vec<f64>,
}

/// Residuals and both accumulated gradients, all from the pre-update critic.
pub fn gradients(policy: &PolicyParams, critic: &CriticParams, traj: &Trajectory, gamma: f64) -> Result<Gradients> {
    let n = traj.steps();
    let (values, tapes) = critic_pass(critic, traj, gamma)?;
    let residuals = residuals_from(traj, &values, gamma);

    let mut critic_grad = vec![0.0; critic.net.params().len()];
    for (tape, delta) in tapes.iter().zip(&residuals) {
        critic.net.backward_with(tape, *delta, Some(&mut critic_grad));
    }

    let deterministic = traj.var.iter().all(|v| *v == 0.0);
    let mut actor_grad = vec![0.0; policy.actor.params().len()];
    let mut tape = Tape::default();
    let mut feat = Vec::with_capacity(policy.features.len());
    #[allow(clippy::needless_range_loop)]
    for k in 0..n {
        let weight = if deterministic {
            ddelta_dtheta(critic, traj, &tapes, gamma, k)
        } else {
            (traj.theta[k] - traj.mean[k]) / traj.var[k] * residuals[k]
        };
        if weight == 0.0 {
            continue;
        }
        policy.features.write(traj.t[k], traj.x_at(k), traj.psi[k], &mut feat);
        policy.actor.forward_with(&feat, &mut tape)?;
        policy.actor.backward_with(&tape, weight, Some(&mut actor_grad));
    }
    Ok(Gradients { residuals, critic: critic_grad, actor: actor_grad })
}

/// `d delta_k / d theta_k` through the next state's critic value and the running cost.
fn ddelta_dtheta(critic: &CriticParams, traj: &Trajectory, tapes: &[Tape], gamma: f64, k: usize) -> f64 {
    let dt = traj.dt;
    let th = traj.theta[k];
    let mut g = -gamma * dt - 2.0 * traj.qnorm[k] * th * dt;
    if k + 1 < traj.steps() {
        let grad = critic.net.backward_with(&tapes[k + 1], 1.0, None);
        let (vx, vpsi) = critic.features.pullback(traj.x_at(k + 1), &grad);
        let f = &traj.field[k * traj.dim..(k + 1) * traj.dim];
        g += dt * vx.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
        if traj.psi_free(k) {
            g += dt * vpsi;
        }
    }
    g
}

/// Apply one Adam ascent step; a non-finite gradient skips the step and returns `false`.
pub fn ascend(
    net: &mut DenseNet,
    adam: &mut crate::nn::AdamState,
    grad: &[f64],
) -> Result<bool> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Ok(false);
    }
    adam.ascend(net.params_mut(), grad)?;
    Ok(true)
}

/// One critic ascent step along `sum_k dnet_k * delta_k`.
pub fn critic_update(
    critic: &mut CriticParams,
    adam: &mut crate::nn::AdamState,
    policy: &PolicyParams,
    traj: &Trajectory,
    gamma: f64,
) -> Result<bool> {
    let g = gradients(policy, critic, traj, gamma)?;
    ascend(&mut critic.net, adam, &g.critic)
}

/// One actor ascent step along `sum_k ((theta_k - m_k) / v_k) dm_k * delta_k`.
pub fn actor_update(
    policy: &mut PolicyParams,
    adam: &mut crate::nn::AdamState,
    critic: &CriticParams,
    traj: &Trajectory,
    gamma: f64,
) -> Result<bool> {
    let g = gradients(policy, critic, traj, gamma)?;
    ascend(&mut policy.actor, adam, &g.actor)
}

/// `gamma + a (psi_K - T)`.
pub fn multiplier_update(gamma: f64, traj: &Trajectory, rate: f64) -> f64 {
    gamma + rate * (traj.psi_terminal - traj.horizon)
}

/// `mu* = (V_x . F + V_psi - gamma) / (2 |Q|)` from the critic's input gradients.
#[allow(clippy::too_many_arguments)]
pub fn critic_implied_mean(
    critic: &CriticParams,
    spec: &DiffusionSpec,
    score: &dyn ScoreModel,
    t: f64,
    x: &[f64],
    psi: f64,
    gamma: f64,
    eps: f64,
) -> Result<f64> {
    let s = spec.remaining_time(psi)?;
    let qnorm = curvature_at(spec, score, s, x).norm;
    if qnorm <= eps {
        return Err(ArtError::UndefinedMaximizer { qnorm, floor: eps });
    }
    let mut f = vec![0.0; x.len()];
    pf_field_at(spec, score, s, x, &mut f);
    let (_, grad) = critic.net.backward(&critic.features.eval(t, x, psi), 1.0)?;
    let (vx, vpsi) = critic.features.pullback(x, &grad);
    let vxf: f64 = vx.iter().zip(&f).map(|(a, b)| a * b).sum();
    Ok((vxf + vpsi - gamma) / (2.0 * qnorm))
}
