//! Fixed-grid integration of the backward probability-flow ODE and a
//! local-error probe against the reference integrator.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffusion::{curvature_at, pf_field_at, DiffusionSpec, ScoreModel};
use crate::error::{ArtError, Result};
use crate::ode::{self, Tolerance};
use crate::par::{self, Execution};
use crate::schedule::TimeGrid;
use crate::seed::{self, Substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    /// Trapezoidal predictor-corrector with a plain Euler final step.
    Heun,
}

impl Method {
    /// Score-field evaluations for a `steps`-step grid.
    pub fn nfe(self, steps: usize) -> usize {
        match self {
            Method::Euler => steps,
            Method::Heun => 2 * steps - 1,
        }
    }
}

fn remaining(grid: &TimeGrid, i: usize) -> f64 {
    let s = grid.horizon() - grid.tau()[i];
    assert!(
        (0.0..=grid.horizon()).contains(&s),
        "score queried at s = {s} outside [0, {}]",
        grid.horizon()
    );
    s
}

fn check_dim(spec: &DiffusionSpec, score: &dyn ScoreModel, x0: &[f64]) -> Result<()> {
    if x0.len() != spec.dim || score.dim() != spec.dim {
        return Err(ArtError::Argument(format!(
            "dimension mismatch: spec {}, score {}, state {}",
            spec.dim,
            score.dim(),
            x0.len()
        )));
    }
    Ok(())
}

fn check_finite(x: &[f64], step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ArtError::NumericOverflow { step })
    }
}

/// Explicit Euler on the grid; steps may be negative for non-monotone grids.
pub fn euler_sample(spec: &DiffusionSpec, score: &dyn ScoreModel, grid: &TimeGrid, x0: &[f64]) -> Result<Vec<f64>> {
    check_dim(spec, score, x0)?;
    let mut x = x0.to_vec();
    let mut field = vec![0.0; x.len()];
    for (i, h) in grid.step_sizes().enumerate() {
        pf_field_at(spec, score, remaining(grid, i), &x, &mut field);
        for (xi, fi) in x.iter_mut().zip(&field) {
            *xi += h * fi;
        }
        check_finite(&x, i)?;
    }
    Ok(x)
}

/// Heun (trapezoidal) steps followed by an Euler final step; `2K - 1` field evaluations.
pub fn heun_sample(spec: &DiffusionSpec, score: &dyn ScoreModel, grid: &TimeGrid, x0: &[f64]) -> Result<Vec<f64>> {
    check_dim(spec, score, x0)?;
    if !grid.is_monotone() {
        return Err(ArtError::Unsupported("Heun sampling needs a monotone grid".into()));
    }
    let k = grid.steps();
    let d = x0.len();
    let mut x = x0.to_vec();
    let (mut d0, mut d1, mut pred) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for (i, h) in grid.step_sizes().enumerate() {
        pf_field_at(spec, score, remaining(grid, i), &x, &mut d0);
        if i + 1 < k {
            for j in 0..d {
                pred[j] = x[j] + h * d0[j];
            }
            pf_field_at(spec, score, remaining(grid, i + 1), &pred, &mut d1);
            for j in 0..d {
                x[j] += 0.5 * h * (d0[j] + d1[j]);
            }
        } else {
            for j in 0..d {
                x[j] += h * d0[j];
            }
        }
        check_finite(&x, i)?;
    }
    Ok(x)
}

pub fn sample(method: Method, spec: &DiffusionSpec, score: &dyn ScoreModel, grid: &TimeGrid, x0: &[f64]) -> Result<Vec<f64>> {
    match method {
        Method::Euler => euler_sample(spec, score, grid, x0),
        Method::Heun => heun_sample(spec, score, grid, x0),
    }
}

/// Terminal samples from a batch of trajectories started at `p_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub dim: usize,
    pub seed: u64,
    pub nfe: usize,
    /// Row-major `n x dim`.
    pub x0: Vec<f64>,
    pub xk: Vec<f64>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.x0.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    pub fn terminal(&self, i: usize) -> &[f64] {
        &self.xk[i * self.dim..(i + 1) * self.dim]
    }

    /// One row per trajectory: `seed_index, x0_*, xK_*`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut header = vec!["seed_index".to_string()];
        header.extend((0..self.dim).map(|j| format!("x0_{j}")));
        header.extend((0..self.dim).map(|j| format!("xK_{j}")));
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = (0..self.len()).map(|i| {
            let mut row = vec![i.to_string()];
            row.extend(self.x0[i * self.dim..(i + 1) * self.dim].iter().map(|v| v.to_string()));
            row.extend(self.terminal(i).iter().map(|v| v.to_string()));
            row
        });
        crate::formats::write_csv(out, &header_refs, rows)
    }
}

/// Draw `n` initial states from `p_T` (trajectory `i` uses substream index `i`)
/// and integrate each on `grid`.
pub fn sample_batch(
    spec: &DiffusionSpec,
    score: &dyn ScoreModel,
    grid: &TimeGrid,
    method: Method,
    n: usize,
    seed: u64,
    exec: Execution,
) -> Result<SampleBatch> {
    let stream = Substream::new(seed, seed::EVAL);
    let d = spec.dim;
    let horizon = spec.horizon;
    let rows = par::map_indexed(exec, n, |i| {
        let mut rng = stream.rng(i as u64);
        let mut x0 = vec![0.0; d];
        score.sample_marginal(horizon, &mut rng, &mut x0);
        sample(method, spec, score, grid, &x0).map(|xk| (x0, xk))
    });
    let mut batch = SampleBatch {
        dim: d,
        seed,
        nfe: method.nfe(grid.steps()),
        x0: Vec::with_capacity(n * d),
        xk: Vec::with_capacity(n * d),
    };
    for row in rows {
        let (x0, xk) = row?;
        batch.x0.extend(x0);
        batch.xk.extend(xk);
    }
    Ok(batch)
}

/// One-step Euler residual on the reparameterized clock and its leading-order prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalErrorProbe {
    /// `|x_exact(h) - (x + h theta F(x, psi))|`.
    pub residual: f64,
    /// `h^2 / 2 * theta^2 * |Q(x, psi)|`.
    pub predicted: f64,
}

/// Compare one Euler step of `dx/dt = theta F(x, psi + theta t)` against the
/// reference integrator.
pub fn local_error_probe(
    spec: &DiffusionSpec,
    score: &dyn ScoreModel,
    x: &[f64],
    psi: f64,
    theta: f64,
    h: f64,
    tol: Tolerance,
) -> Result<LocalErrorProbe> {
    check_dim(spec, score, x)?;
    if !(h > 0.0) {
        return Err(ArtError::Argument(format!("step must be positive, got {h}")));
    }
    let horizon = spec.horizon;
    let end = psi + h * theta;
    if !(0.0..=horizon).contains(&psi) || !(0.0..=horizon).contains(&end) {
        return Err(ArtError::Domain(format!("psi path [{psi}, {end}] leaves [0, {horizon}]")));
    }
    let s0 = horizon - psi;
    let mut field = vec![0.0; x.len()];
    pf_field_at(spec, score, s0, x, &mut field);
    let q = curvature_at(spec, score, s0, x);
    let predicted = 0.5 * h * h * theta * theta * q.norm;
    if theta == 0.0 {
        return Ok(LocalErrorProbe { residual: 0.0, predicted });
    }
    let exact = ode::integrate(
        |t, y, dy| {
            let s = (horizon - (psi + theta * t)).clamp(0.0, horizon);
            pf_field_at(spec, score, s, y, dy);
            dy.iter_mut().for_each(|v| *v *= theta);
        },
        0.0,
        h,
        x,
        tol,
    )?;
    let residual = exact
        .iter()
        .zip(x)
        .zip(&field)
        .map(|((e, xi), fi)| {
            let r = e - (xi + h * theta * fi);
            r * r
        })
        .sum::<f64>()
        .sqrt();
    Ok(LocalErrorProbe { residual, predicted })
}

/// One probe of a [`local_error_study`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub state: usize,
    pub psi: f64,
    pub theta: f64,
    pub h: f64,
    pub residual: f64,
    pub predicted: f64,
}

impl ProbeRow {
    pub fn ratio(&self) -> f64 {
        self.residual / self.predicted
    }

    pub fn gap(&self) -> f64 {
        (self.residual - self.predicted).abs()
    }
}

/// Probe `states` random phase states at every step size in `hs`.
///
/// State `i` uses substream index `i`: `theta ~ U[0.5, 2)`,
/// `psi ~ U[0, T - 4 max(h))` and `x` drawn from the marginal at `psi`.
pub fn local_error_study(
    spec: &DiffusionSpec,
    score: &dyn ScoreModel,
    states: usize,
    hs: &[f64],
    seed: u64,
    exec: Execution,
) -> Result<Vec<ProbeRow>> {
    use rand::Rng;
    let h_max = hs.iter().cloned().fold(0.0, f64::max);
    let room = spec.horizon - 2.0 * 2.0 * h_max;
    if !(room > 0.0) {
        return Err(ArtError::Argument(format!("step sizes up to {h_max} leave no room in [0, T]")));
    }
    let stream = Substream::new(seed, seed::EVAL);
    let per_state = par::map_indexed(exec, states, |i| -> Result<Vec<ProbeRow>> {
        let mut rng = stream.rng(i as u64);
        let theta: f64 = rng.random_range(0.5..2.0);
        let psi: f64 = rng.random_range(0.0..room);
        let mut x = vec![0.0; spec.dim];
        score.sample_marginal(spec.horizon - psi, &mut rng, &mut x);
        hs.iter()
            .map(|&h| {
                let p = local_error_probe(spec, score, &x, psi, theta, h, Tolerance { atol: 1e-13, rtol: 1e-13 })?;
                Ok(ProbeRow { state: i, psi, theta, h, residual: p.residual, predicted: p.predicted })
            })
            .collect()
    });
    let mut rows = Vec::with_capacity(states * hs.len());
    for r in per_state {
        rows.extend(r?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::LinearGaussian1D;
    use crate::schedule::uniform_grid;
    use approx::assert_relative_eq;

    fn demo() -> (DiffusionSpec, LinearGaussian1D) {
        (DiffusionSpec::demo_1d(), LinearGaussian1D)
    }

    #[test]
    fn euler_two_step_example() {
        let (spec, sc) = demo();
        let g = uniform_grid(3.0, 2).unwrap();
        let x = euler_sample(&spec, &sc, &g, &[1.0]).unwrap();
        // (1 - 1.5 * 3/10)(1 - 1.5 * 1.5/3.25)
        let expect = (1.0 - 0.45) * (1.0 - 2.25 / 3.25);
        assert_relative_eq!(x[0], expect, max_relative = 1e-14);
        assert_relative_eq!(x[0], 0.169231, max_relative = 1e-5);
        assert_eq!(euler_sample(&spec, &sc, &g, &[0.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn euler_converges_to_exact_map() {
        let (spec, sc) = demo();
        let g = uniform_grid(3.0, 10_000).unwrap();
        let x = euler_sample(&spec, &sc, &g, &[1.0]).unwrap();
        assert!((x[0] - 1.0 / 10f64.sqrt()).abs() < 1e-4);
    }

    #[test]
    fn euler_is_linear_on_demo() {
        let (spec, sc) = demo();
        let g = uniform_grid(3.0, 7).unwrap();
        let one = euler_sample(&spec, &sc, &g, &[1.0]).unwrap()[0];
        for x0 in [-3.5, 0.25, 2.0, 8.0] {
            let x = euler_sample(&spec, &sc, &g, &[x0]).unwrap()[0];
            assert!((x - x0 * one).abs() <= 4.0 * f64::EPSILON * (x0 * one).abs());
        }
    }

    #[test]
    fn heun_single_step_is_euler() {
        let (spec, sc) = demo();
        let g = uniform_grid(3.0, 1).unwrap();
        assert_eq!(
            heun_sample(&spec, &sc, &g, &[1.3]).unwrap(),
            euler_sample(&spec, &sc, &g, &[1.3]).unwrap()
        );
    }

    #[test]
    fn heun_rejects_non_monotone() {
        let (spec, sc) = demo();
        let g = TimeGrid::new(3.0, vec![0.0, 2.0, 1.0, 3.0]).unwrap();
        assert!(matches!(heun_sample(&spec, &sc, &g, &[1.0]), Err(ArtError::Unsupported(_))));
        assert!(euler_sample(&spec, &sc, &g, &[1.0]).is_ok());
    }

    #[test]
    fn nfe_accounting() {
        assert_eq!(Method::Heun.nfe(18), 35);
        for k in 1..50 {
            assert_eq!(Method::Euler.nfe(k), k);
            assert_eq!(Method::Heun.nfe(k), 2 * k - 1);
        }
    }

    #[test]
    fn probe_examples() {
        let (spec, sc) = demo();
        let p = local_error_probe(&spec, &sc, &[1.0], 0.0, 1.0, 0.1, Tolerance::default()).unwrap();
        assert_relative_eq!(p.predicted, 5e-5, max_relative = 1e-12);
        assert_relative_eq!(p.residual / p.predicted, 1.0, max_relative = 0.1);
        let z = local_error_probe(&spec, &sc, &[1.0], 1.0, 0.0, 0.1, Tolerance::default()).unwrap();
        assert_eq!((z.residual, z.predicted), (0.0, 0.0));
    }

    #[test]
    fn probe_rejects_leaving_range() {
        let (spec, sc) = demo();
        assert!(local_error_probe(&spec, &sc, &[1.0], 2.95, 1.0, 0.1, Tolerance::default()).is_err());
        assert!(local_error_probe(&spec, &sc, &[1.0], 1.0, 1.0, 0.0, Tolerance::default()).is_err());
    }

    #[test]
    fn batch_is_deterministic_across_execution_modes() {
        let (spec, sc) = demo();
        let g = uniform_grid(3.0, 5).unwrap();
        let a = sample_batch(&spec, &sc, &g, Method::Heun, 257, 11, Execution::Sequential).unwrap();
        let b = sample_batch(&spec, &sc, &g, Method::Heun, 257, 11, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.nfe, 9);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("seed_index,x0_0,xK_0\n0,"));
        assert_eq!(text.lines().count(), 258);
    }

    #[test]
    fn study_gap_shrinks_cubically() {
        let (spec, sc) = demo();
        let hs = [0.1, 0.05, 0.025];
        let rows = local_error_study(&spec, &sc, 4, &hs, 3, Execution::Sequential).unwrap();
        assert_eq!(rows.len(), 12);
        for st in rows.chunks(3) {
            for w in st.windows(2) {
                let f = w[0].gap() / w[1].gap();
                assert!((6.0..=10.0).contains(&f), "factor {f}");
            }
            assert!((st[2].ratio() - 1.0).abs() < (st[0].ratio() - 1.0).abs());
        }
        let again = local_error_study(&spec, &sc, 4, &hs, 3, Execution::Parallel).unwrap();
        assert_eq!(rows, again);
    }
}
