//! Forward diffusion setup, analytic score models, the backward
//! probability-flow field `F`, and the curvature proxy `Q`.
//!
//! Time conventions: `tau` (or `psi`) runs forward along the sampler from 0
//! to `T`; the score is queried at the remaining original time `s = T - psi`.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ArtError, Result};

/// Coefficients of the forward SDE `dx = -f(s) x ds + g(s) dw`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Sde {
    /// `f = 0`, `g(s)^2 = 2 s`: variance grows by `tau^2` over `[0, tau]`.
    QuadraticVariance,
}

impl Sde {
    pub fn drift(&self, _s: f64) -> f64 {
        match self {
            Sde::QuadraticVariance => 0.0,
        }
    }

    pub fn drift_dt(&self, _s: f64) -> f64 {
        match self {
            Sde::QuadraticVariance => 0.0,
        }
    }

    /// `g(s)^2`.
    pub fn diffusion_sq(&self, s: f64) -> f64 {
        match self {
            Sde::QuadraticVariance => 2.0 * s,
        }
    }

    /// `g(s) g'(s)`, i.e. the derivative of `g^2 / 2`.
    pub fn diffusion_dg(&self, _s: f64) -> f64 {
        match self {
            Sde::QuadraticVariance => 1.0,
        }
    }

    /// Variance injected by the forward process over `[0, tau]` (isotropic, no drift).
    pub fn added_variance(&self, tau: f64) -> f64 {
        match self {
            Sde::QuadraticVariance => tau * tau,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSpec {
    pub dim: usize,
    pub horizon: f64,
    pub sde: Sde,
    /// Variance of an isotropic Gaussian data law, when the data law is one.
    /// Enables [`marginal_std`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_variance: Option<f64>,
}

impl DiffusionSpec {
    pub fn new(dim: usize, horizon: f64, sde: Sde) -> Result<Self> {
        if dim == 0 {
            return Err(ArtError::Argument("dimension must be at least 1".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(ArtError::Argument(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self { dim, horizon, sde, data_variance: None })
    }

    /// The one-dimensional demo: `p0 = N(0, 1)`, `dx = sqrt(2t) dw`, `T = 3`.
    pub fn demo_1d() -> Self {
        Self { dim: 1, horizon: 3.0, sde: Sde::QuadraticVariance, data_variance: Some(1.0) }
    }

    /// Remaining original time for a sampler position `psi`, checked against `[0, T]`.
    pub fn remaining_time(&self, psi: f64) -> Result<f64> {
        if !(0.0..=self.horizon).contains(&psi) {
            return Err(ArtError::Domain(format!(
                "psi = {psi} lies outside [0, {}]",
                self.horizon
            )));
        }
        Ok(self.horizon - psi)
    }
}

/// An analytic score model together with the derivative queries `Q` needs.
pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    /// `S(s, x)`.
    fn score(&self, s: f64, x: &[f64], out: &mut [f64]);

    /// `grad_x S(s, x) . v`, without forming the Jacobian.
    fn score_jvp(&self, s: f64, x: &[f64], v: &[f64], out: &mut [f64]);

    /// `d/ds S(s, x)`.
    fn score_dt(&self, s: f64, x: &[f64], out: &mut [f64]);

    /// Draw from the forward marginal at original time `tau` (under the
    /// quadratic-variance SDE).
    fn sample_marginal(&self, tau: f64, rng: &mut dyn RngCore, out: &mut [f64]);
}

/// Exact score of the demo: `N(0, 1 + s^2)` gives `S(s, x) = -x / (1 + s^2)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LinearGaussian1D;

impl ScoreModel for LinearGaussian1D {
    fn dim(&self) -> usize {
        1
    }

    fn score(&self, s: f64, x: &[f64], out: &mut [f64]) {
        out[0] = -x[0] / (1.0 + s * s);
    }

    fn score_jvp(&self, s: f64, _x: &[f64], v: &[f64], out: &mut [f64]) {
        out[0] = -v[0] / (1.0 + s * s);
    }

    fn score_dt(&self, s: f64, x: &[f64], out: &mut [f64]) {
        let den = 1.0 + s * s;
        out[0] = 2.0 * s * x[0] / (den * den);
    }

    fn sample_marginal(&self, tau: f64, rng: &mut dyn RngCore, out: &mut [f64]) {
        let z: f64 = rng.sample(StandardNormal);
        out[0] = (1.0 + tau * tau).sqrt() * z;
    }
}

/// Mixture of axis-aligned Gaussians. Under the quadratic-variance SDE the
/// forward marginal at time `tau` is the same mixture with every component
/// variance increased by `tau^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

impl GaussianMixture {
    /// `weights` are normalized; `variances` are the per-axis base variances.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != variances.len() {
            return Err(ArtError::Argument(
                "mixture needs matching, non-empty weights, means and variances".into(),
            ));
        }
        let dim = means[0].len();
        if dim == 0
            || means.iter().any(|m| m.len() != dim)
            || variances.iter().any(|v| v.len() != dim)
        {
            return Err(ArtError::Argument("mixture components disagree on dimension".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0)) || variances.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(ArtError::Argument("weights and variances must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { weights, means, variances })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Responsibilities `r_i(x)` and per-component `a_i = -(x - m_i) / var_i`,
    /// where `var_i = base_i + s^2`.
    fn posterior(&self, s: f64, x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let s2 = s * s;
        let mut logp = Vec::with_capacity(self.components());
        let mut a = Vec::with_capacity(self.components());
        for ((w, m), base) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            let mut lp = w.ln();
            let mut ai = Vec::with_capacity(x.len());
            for j in 0..x.len() {
                let var = base[j] + s2;
                let d = x[j] - m[j];
                lp -= 0.5 * (d * d / var + var.ln());
                ai.push(-d / var);
            }
            logp.push(lp);
            a.push(ai);
        }
        let top = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut r: Vec<f64> = logp.iter().map(|lp| (lp - top).exp()).collect();
        let z: f64 = r.iter().sum();
        r.iter_mut().for_each(|ri| *ri /= z);
        (r, a)
    }

    fn mix(r: &[f64], a: &[Vec<f64>], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (ri, ai) in r.iter().zip(a) {
            for (o, aij) in out.iter_mut().zip(ai) {
                *o += ri * aij;
            }
        }
    }
}

impl ScoreModel for GaussianMixture {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn score(&self, s: f64, x: &[f64], out: &mut [f64]) {
        let (r, a) = self.posterior(s, x);
        Self::mix(&r, &a, out);
    }

    fn score_jvp(&self, s: f64, x: &[f64], v: &[f64], out: &mut [f64]) {
        let (r, a) = self.posterior(s, x);
        let mut score = vec![0.0; x.len()];
        Self::mix(&r, &a, &mut score);
        let s_dot_v: f64 = score.iter().zip(v).map(|(p, q)| p * q).sum();
        let s2 = s * s;
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..self.components() {
            let a_dot_v: f64 = a[i].iter().zip(v).map(|(p, q)| p * q).sum();
            let coupling = a_dot_v - s_dot_v;
            for j in 0..x.len() {
                let var = self.variances[i][j] + s2;
                out[j] += r[i] * (-v[j] / var + coupling * a[i][j]);
            }
        }
    }

    fn score_dt(&self, s: f64, x: &[f64], out: &mut [f64]) {
        let (r, a) = self.posterior(s, x);
        let s2 = s * s;
        // d/ds log N_i and d/ds a_i
        let mut dlog = vec![0.0; self.components()];
        let mut da = vec![vec![0.0; x.len()]; self.components()];
        for i in 0..self.components() {
            for j in 0..x.len() {
                let var = self.variances[i][j] + s2;
                let d = x[j] - self.means[i][j];
                dlog[i] += -s / var + s * d * d / (var * var);
                da[i][j] = 2.0 * s * d / (var * var);
            }
        }
        let mean_dlog: f64 = r.iter().zip(&dlog).map(|(ri, di)| ri * di).sum();
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..self.components() {
            let dr = r[i] * (dlog[i] - mean_dlog);
            for j in 0..x.len() {
                out[j] += r[i] * da[i][j] + dr * a[i][j];
            }
        }
    }

    fn sample_marginal(&self, tau: f64, rng: &mut dyn RngCore, out: &mut [f64]) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        let add = tau * tau;
        for ((o, m), v) in out.iter_mut().zip(&self.means[pick]).zip(&self.variances[pick]) {
            let z: f64 = rng.sample(StandardNormal);
            *o = m + (v + add).sqrt() * z;
        }
    }
}

/// A sampler state: position `x` and original-time clock `psi` in `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub x: Vec<f64>,
    pub psi: f64,
}

impl PhaseState {
    pub fn new(x: Vec<f64>, psi: f64, horizon: f64) -> Self {
        Self { x, psi: psi.clamp(0.0, horizon) }
    }
}

/// `F(x, psi) = f(s) x + g(s)^2 / 2 * S(s, x)` with `s = T - psi`.
pub fn pf_field(spec: &DiffusionSpec, score: &dyn ScoreModel, x: &[f64], psi: f64) -> Result<Vec<f64>> {
    let s = spec.remaining_time(psi)?;
    let mut out = vec![0.0; x.len()];
    pf_field_at(spec, score, s, x, &mut out);
    Ok(out)
}

/// Unchecked field evaluation at remaining time `s`.
pub(crate) fn pf_field_at(spec: &DiffusionSpec, score: &dyn ScoreModel, s: f64, x: &[f64], out: &mut [f64]) {
    score.score(s, x, out);
    let f = spec.sde.drift(s);
    let half_g2 = 0.5 * spec.sde.diffusion_sq(s);
    for (o, xi) in out.iter_mut().zip(x) {
        *o = f * xi + half_g2 * *o;
    }
}

/// Curvature proxy: the leading coefficient `Q` of the one-step Euler residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Curvature {
    pub q: Vec<f64>,
    pub norm: f64,
}

/// `Q = A B - g g' S - f' x - g^2 / 2 * dS/ds`, with `B = F(x, psi)` and
/// `A B = f B + g^2 / 2 * (grad_x S) B` evaluated by a single JVP.
pub fn curvature(spec: &DiffusionSpec, score: &dyn ScoreModel, x: &[f64], psi: f64) -> Result<Curvature> {
    let s = spec.remaining_time(psi)?;
    Ok(curvature_at(spec, score, s, x))
}

pub(crate) fn curvature_at(spec: &DiffusionSpec, score: &dyn ScoreModel, s: f64, x: &[f64]) -> Curvature {
    let d = x.len();
    let f = spec.sde.drift(s);
    let df = spec.sde.drift_dt(s);
    let half_g2 = 0.5 * spec.sde.diffusion_sq(s);
    let g_dg = spec.sde.diffusion_dg(s);

    let mut sc = vec![0.0; d];
    score.score(s, x, &mut sc);
    let b: Vec<f64> = x.iter().zip(&sc).map(|(xi, si)| f * xi + half_g2 * si).collect();

    let mut jvp = vec![0.0; d];
    score.score_jvp(s, x, &b, &mut jvp);
    let mut dt = vec![0.0; d];
    score.score_dt(s, x, &mut dt);

    let q: Vec<f64> = (0..d)
        .map(|j| f * b[j] + half_g2 * jvp[j] - g_dg * sc[j] - df * x[j] - half_g2 * dt[j])
        .collect();
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    Curvature { q, norm }
}

/// Standard deviation of the forward marginal at `tau` for isotropic Gaussian data.
pub fn marginal_std(spec: &DiffusionSpec, tau: f64) -> Result<f64> {
    let base = spec.data_variance.ok_or_else(|| {
        ArtError::Capability("marginal_std needs an isotropic Gaussian data law".into())
    })?;
    if !(0.0..=spec.horizon).contains(&tau) {
        return Err(ArtError::Domain(format!("tau = {tau} outside [0, {}]", spec.horizon)));
    }
    Ok((base + spec.sde.added_variance(tau)).sqrt())
}
