//! Sample-quality metrics, theta-curve statistics and the W2-vs-K sweep.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::diffusion::{DiffusionSpec, ScoreModel};
use crate::error::{ArtError, Result};
use crate::par::{self, Execution};
use crate::sampler::{sample_batch, Method};
use crate::schedule::{edm_grid, uniform_grid, TimeGrid};

/// Table-1 step counts.
pub const DEFAULT_KS: [usize; 6] = [2, 5, 10, 20, 50, 100];

fn data_variance_1d(spec: &DiffusionSpec) -> Result<f64> {
    match spec.data_variance {
        Some(v) if spec.dim == 1 => Ok(v),
        _ => Err(ArtError::Capability(
            "closed-form evaluation needs a 1D Gaussian data law".into(),
        )),
    }
}

/// Euler terminal map of the linear demo, `x_K = c x_0`, with
/// `c = prod_i (1 - h_i s_i / (v + s_i^2))` and `s_i = T - tau_i`.
pub fn terminal_scale(spec: &DiffusionSpec, grid: &TimeGrid) -> Result<f64> {
    let v = data_variance_1d(spec)?;
    let horizon = grid.horizon();
    let tau = grid.tau();
    Ok(tau
        .windows(2)
        .map(|w| {
            let s = horizon - w[0];
            1.0 - (w[1] - w[0]) * s / (v + s * s)
        })
        .product())
}

/// W2 between centered 1D Gaussians is the gap between their standard deviations.
pub fn w2_between_stds(a: f64, b: f64) -> f64 {
    (a - b).abs()
}

/// W2 of the demo's Euler output `N(0, 10 c^2)` against `N(0, 1)`.
pub fn w2_gaussian(c: f64) -> f64 {
    w2_between_stds(10f64.sqrt() * c.abs(), 1.0)
}

/// Closed-form W2 of Euler sampling on `grid` for a 1D Gaussian data law.
pub fn w2_closed_form(spec: &DiffusionSpec, grid: &TimeGrid) -> Result<f64> {
    let v = data_variance_1d(spec)?;
    let c = terminal_scale(spec, grid)?;
    let start = (v + spec.sde.added_variance(spec.horizon)).sqrt();
    Ok(w2_between_stds(start * c.abs(), v.sqrt()))
}

/// Quantile function of `N(0, sigma^2)`.
pub fn normal_quantile(sigma: f64) -> Result<impl Fn(f64) -> f64> {
    let n = Normal::new(0.0, sigma).map_err(|e| ArtError::Argument(e.to_string()))?;
    Ok(move |p: f64| n.inverse_cdf(p))
}

/// `sqrt((1/n) sum_i (x_(i) - q((i - 1/2) / n))^2)` over the sorted samples.
pub fn w2_empirical_1d(samples: &[f64], target_quantile: impl Fn(f64) -> f64) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(ArtError::Argument(format!("need at least 2 samples, got {n}")));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(ArtError::Numeric("non-finite sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    let sum: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let d = x - target_quantile((i as f64 + 0.5) / nf);
            d * d
        })
        .sum();
    Ok((sum / nf).sqrt())
}

/// Per-step statistics of a family of theta curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaStats {
    pub count: usize,
    pub mean: Vec<f64>,
    pub q25: Vec<f64>,
    pub q75: Vec<f64>,
    pub ci_lo: Vec<f64>,
    pub ci_hi: Vec<f64>,
}

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.576;

/// Empirical quantile by inverting the step CDF: the smallest sample `x`
/// with `F(x) >= p`.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let idx = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

pub fn theta_stats(curves: &[Vec<f64>]) -> Result<ThetaStats> {
    let m = curves.len();
    if m < 2 {
        return Err(ArtError::Argument(format!("need at least 2 curves, got {m}")));
    }
    let k = curves[0].len();
    if k == 0 || curves.iter().any(|c| c.len() != k) {
        return Err(ArtError::Argument("curves must share a nonzero length".into()));
    }
    let mf = m as f64;
    let mut stats = ThetaStats {
        count: m,
        mean: Vec::with_capacity(k),
        q25: Vec::with_capacity(k),
        q75: Vec::with_capacity(k),
        ci_lo: Vec::with_capacity(k),
        ci_hi: Vec::with_capacity(k),
    };
    let mut column = vec![0.0; m];
    for j in 0..k {
        for (c, curve) in column.iter_mut().zip(curves) {
            *c = curve[j];
        }
        let mean = column.iter().sum::<f64>() / mf;
        let var = column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (mf - 1.0);
        let half = Z99 * var.sqrt() / mf.sqrt();
        column.sort_by(f64::total_cmp);
        stats.mean.push(mean);
        stats.q25.push(quantile_sorted(&column, 0.25));
        stats.q75.push(quantile_sorted(&column, 0.75));
        stats.ci_lo.push(mean - half);
        stats.ci_hi.push(mean + half);
    }
    Ok(stats)
}

impl ThetaStats {
    pub fn steps(&self) -> usize {
        self.mean.len()
    }

    pub fn iqr(&self) -> Vec<f64> {
        self.q75.iter().zip(&self.q25).map(|(a, b)| a - b).collect()
    }

    /// `max(mean) - min(mean)`.
    pub fn mean_range(&self) -> f64 {
        let (lo, hi) = self
            .mean
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        hi - lo
    }

    /// Median over steps of `IQR_k / mean_range`.
    pub fn median_iqr_ratio(&self) -> f64 {
        let range = self.mean_range();
        let mut r: Vec<f64> = self.iqr().iter().map(|q| q / range).collect();
        r.sort_by(f64::total_cmp);
        let n = r.len();
        if n % 2 == 1 {
            r[n / 2]
        } else {
            0.5 * (r[n / 2 - 1] + r[n / 2])
        }
    }

    /// Largest CI half-width relative to `mean_range`.
    pub fn max_ci_ratio(&self) -> f64 {
        let range = self.mean_range();
        self.ci_hi
            .iter()
            .zip(&self.ci_lo)
            .map(|(h, l)| 0.5 * (h - l) / range)
            .fold(0.0, f64::max)
    }

    /// `step,mean,q25,q75,ci_lo,ci_hi`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let rows = (0..self.steps()).map(|k| {
            vec![
                k.to_string(),
                self.mean[k].to_string(),
                self.q25[k].to_string(),
                self.q75[k].to_string(),
                self.ci_lo[k].to_string(),
                self.ci_hi[k].to_string(),
            ]
        });
        crate::formats::write_csv(out, &["step", "mean", "q25", "q75", "ci_lo", "ci_hi"], rows)
    }
}

/// A schedule family evaluated by the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SweepSchedule {
    Uniform,
    /// EDM levels with `sigma_max = T` unless given, `s = 0` appended.
    Edm { name: String, rho: f64, sigma_min: f64, sigma_max: Option<f64> },
    /// A fixed grid, resampled to each K by [`crate::schedule::loglinear_resample`].
    Learned { name: String, grid: TimeGrid },
}

impl SweepSchedule {
    pub fn name(&self) -> &str {
        match self {
            SweepSchedule::Uniform => "uniform",
            SweepSchedule::Edm { name, .. } | SweepSchedule::Learned { name, .. } => name,
        }
    }

    pub fn grid(&self, horizon: f64, steps: usize) -> Result<TimeGrid> {
        match self {
            SweepSchedule::Uniform => uniform_grid(horizon, steps),
            SweepSchedule::Edm { rho, sigma_min, sigma_max, .. } => {
                edm_grid(horizon, steps, *rho, *sigma_min, sigma_max.unwrap_or(horizon), true)
            }
            SweepSchedule::Learned { grid, .. } => {
                if grid.horizon() != horizon {
                    return Err(ArtError::Config(format!(
                        "learned grid has T = {}, sweep uses T = {horizon}",
                        grid.horizon()
                    )));
                }
                if grid.steps() == steps {
                    Ok(grid.clone())
                } else {
                    crate::schedule::loglinear_resample(
                        grid,
                        steps,
                        crate::schedule::default_resample_floor(horizon),
                    )
                }
            }
        }
    }
}

/// The default EDM (rho = 7) and tuned EDM (rho = 3) rows, `sigma_min = 0.002`.
pub fn default_edm_rows() -> Vec<SweepSchedule> {
    vec![
        SweepSchedule::Edm { name: "edm".into(), rho: 7.0, sigma_min: 0.002, sigma_max: None },
        SweepSchedule::Edm { name: "edm-t".into(), rho: 3.0, sigma_min: 0.002, sigma_max: None },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum W2Mode {
    /// Exact terminal-law W2 from the linear Euler map.
    ClosedForm,
    /// Sample, sort, and compare against the data quantiles.
    Empirical { samples: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub ks: Vec<usize>,
    pub mode: W2Mode,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { ks: DEFAULT_KS.to_vec(), mode: W2Mode::ClosedForm, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub schedule: String,
    pub k: usize,
    pub w2: f64,
    pub rho: Option<f64>,
    pub sigma_min: Option<f64>,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub closed_form: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn w2(&self, schedule: &str, k: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.schedule == schedule && r.k == k).map(|r| r.w2)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let opt = |v: Option<String>| v.unwrap_or_default();
        let rows = self.rows.iter().map(|r| {
            vec![
                r.schedule.clone(),
                r.k.to_string(),
                r.w2.to_string(),
                opt(r.rho.map(|v| v.to_string())),
                opt(r.sigma_min.map(|v| v.to_string())),
                opt(r.seed.map(|v| v.to_string())),
                opt(r.samples.map(|v| v.to_string())),
                r.closed_form.to_string(),
            ]
        });
        crate::formats::write_csv(
            out,
            &["schedule", "K", "w2", "rho", "sigma_min", "seed", "samples", "closed_form"],
            rows,
        )
    }
}

/// W2 of Euler sampling on `grid` in the requested mode.
pub fn w2_of_grid(
    spec: &DiffusionSpec,
    score: &dyn ScoreModel,
    grid: &TimeGrid,
    mode: W2Mode,
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    match mode {
        W2Mode::ClosedForm => w2_closed_form(spec, grid),
        W2Mode::Empirical { samples } => {
            let v = data_variance_1d(spec)?;
            let batch = sample_batch(spec, score, grid, Method::Euler, samples, seed, exec)?;
            w2_empirical_1d(&batch.xk, normal_quantile(v.sqrt())?)
        }
    }
}

/// W2 for every schedule at every K.
pub fn w2_sweep(
    spec: &DiffusionSpec,
    score: &dyn ScoreModel,
    schedules: &[SweepSchedule],
    config: &SweepConfig,
    exec: Execution,
) -> Result<SweepReport> {
    let cells: Vec<(usize, usize)> = (0..schedules.len())
        .flat_map(|s| config.ks.iter().map(move |&k| (s, k)))
        .collect();
    // Empirical cells already parallelize internally.
    let outer = match config.mode {
        W2Mode::ClosedForm => exec,
        W2Mode::Empirical { .. } => Execution::Sequential,
    };
    let rows = par::map_slice(outer, &cells, |&(s, k)| {
        let sched = &schedules[s];
        let grid = sched.grid(spec.horizon, k)?;
        let w2 = w2_of_grid(spec, score, &grid, config.mode, config.seed, exec)?;
        let (rho, sigma_min) = match sched {
            SweepSchedule::Edm { rho, sigma_min, .. } => (Some(*rho), Some(*sigma_min)),
            _ => (None, None),
        };
        let (seed, samples, closed_form) = match config.mode {
            W2Mode::ClosedForm => (None, None, true),
            W2Mode::Empirical { samples } => (Some(config.seed), Some(samples), false),
        };
        Ok(SweepRow { schedule: sched.name().to_string(), k, w2, rho, sigma_min, seed, samples, closed_form })
    });
    Ok(SweepReport { rows: rows.into_iter().collect::<Result<_>>()? })
}
