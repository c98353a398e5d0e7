//! Time grids on `[0, T]`: uniform, EDM, grids induced by per-step
//! time-warp rates, and log-linear resampling between step counts.

use serde::{Deserialize, Serialize};

use crate::error::{ArtError, Result};

/// A `K + 1` point grid `0 = tau[0], ..., tau[K] = T` in original diffusion time.
/// Steps may be negative; see [`GridReport::monotone`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    tau: Vec<f64>,
}

impl TimeGrid {
    /// Checked constructor: endpoints must be exactly `0` and `T` and every
    /// point must lie in `[0, T]`.
    pub fn new(horizon: f64, tau: Vec<f64>) -> Result<Self> {
        let grid = Self::from_raw(horizon, tau)?;
        let report = validate_grid(&grid);
        if !report.endpoints_ok {
            return Err(ArtError::Validation {
                indices: vec![0, grid.steps()],
                reason: "endpoints must be exactly 0 and T".into(),
            });
        }
        if !report.range_violations.is_empty() {
            return Err(ArtError::Validation {
                indices: report.range_violations,
                reason: format!("points outside [0, {horizon}]"),
            });
        }
        Ok(grid)
    }

    /// Unvalidated constructor (only shape is checked); use [`validate_grid`]
    /// to inspect the result.
    pub fn from_raw(horizon: f64, tau: Vec<f64>) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(ArtError::Argument(format!("horizon must be positive, got {horizon}")));
        }
        if tau.len() < 2 {
            return Err(ArtError::Argument("a grid needs at least two points".into()));
        }
        Ok(Self { horizon, tau })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of steps `K`.
    pub fn steps(&self) -> usize {
        self.tau.len() - 1
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    /// Step sizes `h_i = tau[i + 1] - tau[i]`.
    pub fn step_sizes(&self) -> impl Iterator<Item = f64> + '_ {
        self.tau.windows(2).map(|w| w[1] - w[0])
    }

    pub fn is_monotone(&self) -> bool {
        self.step_sizes().all(|h| h >= 0.0)
    }

    /// Scale the grid (and horizon) by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        let mut tau: Vec<f64> = self.tau.iter().map(|t| t * c).collect();
        let horizon = self.horizon * c;
        let k = tau.len() - 1;
        tau[0] = 0.0;
        tau[k] = horizon;
        Self::from_raw(horizon, tau)
    }
}

/// Per-step time-warp rates on a uniform `t`-clock with `dt = T / K`,
/// normalized so that `sum(theta) * dt = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaCurve {
    horizon: f64,
    theta: Vec<f64>,
}

impl ThetaCurve {
    /// Rescale `raw` so the induced total time change is exactly `T`.
    pub fn normalized(horizon: f64, raw: Vec<f64>) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(ArtError::Argument(format!("horizon must be positive, got {horizon}")));
        }
        if raw.is_empty() {
            return Err(ArtError::Argument("theta curve needs at least one step".into()));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(ArtError::Numeric("non-finite theta value".into()));
        }
        let dt = horizon / raw.len() as f64;
        let total: f64 = raw.iter().sum::<f64>() * dt;
        if !(total > 0.0) {
            return Err(ArtError::Validation {
                indices: vec![],
                reason: format!("induced total time change {total} is not positive"),
            });
        }
        let factor = horizon / total;
        let theta = raw.into_iter().map(|v| v * factor).collect();
        Ok(Self { horizon, theta })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.theta.len()
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.theta.len() as f64
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// `sum(theta) * dt`, which equals `T` up to round-off.
    pub fn budget(&self) -> f64 {
        self.theta.iter().sum::<f64>() * self.dt()
    }
}

/// `tau[i] = i T / K`.
pub fn uniform_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    if steps < 1 {
        return Err(ArtError::Argument("K must be at least 1".into()));
    }
    let mut tau: Vec<f64> = (0..=steps).map(|i| i as f64 * horizon / steps as f64).collect();
    tau[steps] = horizon;
    TimeGrid::new(horizon, tau)
}

/// EDM noise levels `s_k = (smax^(1/rho) + k/K (smin^(1/rho) - smax^(1/rho)))^rho`, `k = 0..=K`.
pub fn edm_levels(steps: usize, rho: f64, sigma_min: f64, sigma_max: f64) -> Result<Vec<f64>> {
    if steps < 1 {
        return Err(ArtError::Argument("K must be at least 1".into()));
    }
    if !(rho > 0.0) {
        return Err(ArtError::Argument(format!("rho must be positive, got {rho}")));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max) {
        return Err(ArtError::Argument(format!(
            "need 0 < sigma_min < sigma_max, got {sigma_min} and {sigma_max}"
        )));
    }
    let (lo, hi) = (sigma_min.powf(1.0 / rho), sigma_max.powf(1.0 / rho));
    Ok((0..=steps)
        .map(|k| (hi + k as f64 / steps as f64 * (lo - hi)).powf(rho))
        .collect())
}

/// EDM grid mapped into sampler time via `tau = T - s`.
///
/// With `append_zero` the last level is replaced by `s = 0` (and the first by
/// `s = T`), so the grid runs exactly from 0 to T. Without it the mapped
/// levels are affinely rescaled onto `[0, T]`.
pub fn edm_grid(
    horizon: f64,
    steps: usize,
    rho: f64,
    sigma_min: f64,
    sigma_max: f64,
    append_zero: bool,
) -> Result<TimeGrid> {
    if sigma_max > horizon {
        return Err(ArtError::Argument(format!("sigma_max {sigma_max} exceeds T = {horizon}")));
    }
    let levels = edm_levels(steps, rho, sigma_min, sigma_max)?;
    let mut tau: Vec<f64> = levels.iter().map(|s| horizon - s).collect();
    if append_zero {
        tau[0] = 0.0;
        tau[steps] = horizon;
    } else {
        let (a, b) = (tau[0], tau[steps]);
        for t in tau.iter_mut() {
            *t = ((*t - a) / (b - a) * horizon).clamp(0.0, horizon);
        }
        tau[0] = 0.0;
        tau[steps] = horizon;
    }
    TimeGrid::new(horizon, tau)
}

/// Grid induced by a time-warp curve: `tau[i] = sum_{j < i} theta[j] dt`.
pub fn grid_from_theta(curve: &ThetaCurve) -> Result<TimeGrid> {
    let horizon = curve.horizon();
    let dt = curve.dt();
    let k = curve.steps();
    let slack = 1e-9 * horizon;
    let mut tau = Vec::with_capacity(k + 1);
    let mut acc = 0.0;
    tau.push(0.0);
    let mut bad = Vec::new();
    for (i, th) in curve.theta().iter().enumerate() {
        acc += th * dt;
        if acc < -slack || acc > horizon + slack {
            bad.push(i + 1);
        }
        tau.push(acc.clamp(0.0, horizon));
    }
    if !bad.is_empty() {
        return Err(ArtError::Validation {
            indices: bad,
            reason: format!("induced psi leaves [0, {horizon}]"),
        });
    }
    tau[k] = horizon;
    TimeGrid::new(horizon, tau)
}

/// Inverse of [`grid_from_theta`]: `theta[k] = (tau[k + 1] - tau[k]) / dt`.
pub fn theta_of(grid: &TimeGrid) -> Result<ThetaCurve> {
    let dt = grid.horizon() / grid.steps() as f64;
    ThetaCurve::normalized(grid.horizon(), grid.step_sizes().map(|h| h / dt).collect())
}

/// Default floor for [`loglinear_resample`]: `1e-4 T`.
pub fn default_resample_floor(horizon: f64) -> f64 {
    1e-4 * horizon
}

/// Resample a monotone grid to `new_steps` steps by piecewise-linear
/// interpolation of `u = ln(max(T - tau, floor))` over the normalized index `k / K`.
pub fn loglinear_resample(grid: &TimeGrid, new_steps: usize, floor: f64) -> Result<TimeGrid> {
    if new_steps < 1 {
        return Err(ArtError::Argument("K_new must be at least 1".into()));
    }
    if !(floor > 0.0) {
        return Err(ArtError::Argument(format!("floor must be positive, got {floor}")));
    }
    if !grid.is_monotone() {
        return Err(ArtError::Unsupported("log-linear resampling needs a monotone grid".into()));
    }
    let horizon = grid.horizon();
    let k = grid.steps();
    let u: Vec<f64> = grid.tau().iter().map(|t| (horizon - t).max(floor).ln()).collect();
    let mut tau = Vec::with_capacity(new_steps + 1);
    for j in 0..=new_steps {
        // position in old-index units
        let pos = j as f64 * k as f64 / new_steps as f64;
        let seg = (pos.floor() as usize).min(k - 1);
        let frac = pos - seg as f64;
        let val = if frac == 0.0 { u[seg] } else { u[seg] + frac * (u[seg + 1] - u[seg]) };
        tau.push((horizon - val.exp()).clamp(0.0, horizon));
    }
    tau[0] = 0.0;
    tau[new_steps] = horizon;
    TimeGrid::new(horizon, tau)
}

/// Diagnostic summary of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub steps: usize,
    pub endpoints_ok: bool,
    pub range_violations: Vec<usize>,
    pub monotone: bool,
    pub min_step: f64,
    pub max_step: f64,
}

impl GridReport {
    pub fn is_valid(&self) -> bool {
        self.endpoints_ok && self.range_violations.is_empty()
    }
}

pub fn validate_grid(grid: &TimeGrid) -> GridReport {
    let horizon = grid.horizon();
    let tau = grid.tau();
    let k = grid.steps();
    let range_violations = tau
        .iter()
        .enumerate()
        .filter(|(_, t)| !(0.0..=horizon).contains(*t))
        .map(|(i, _)| i)
        .collect();
    let (min_step, max_step) = grid
        .step_sizes()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), h| (lo.min(h), hi.max(h)));
    GridReport {
        steps: k,
        endpoints_ok: tau[0] == 0.0 && tau[k] == horizon,
        range_violations,
        monotone: grid.is_monotone(),
        min_step,
        max_step,
    }
}
