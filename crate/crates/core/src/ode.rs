//! Adaptive Dormand–Prince 5(4) integrator used as the high-accuracy
//! reference for local-error probes and order checks.

use crate::error::{ArtError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub atol: f64,
    pub rtol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { atol: 1e-10, rtol: 1e-10 }
    }
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

const MAX_STEPS: usize = 1_000_000;

/// Integrate `y' = rhs(t, y)` from `t0` to `t1` (either direction).
pub fn integrate<F>(mut rhs: F, t0: f64, t1: f64, y0: &[f64], tol: Tolerance) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y0.len();
    let mut y = y0.to_vec();
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(y);
    }
    let dir = span.signum();
    let mut t = t0;
    let mut h = span.abs().min(1e-2 * span.abs().max(1e-3)) * dir;
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    rhs(t, &y, &mut k[0]);

    for _ in 0..MAX_STEPS {
        if (t1 - t) * dir <= 0.0 {
            return Ok(y);
        }
        if (t + h - t1) * dir > 0.0 {
            h = t1 - t;
        }
        for stage in 1..7 {
            for i in 0..n {
                let mut acc = y[i];
                for (j, a) in A[stage].iter().enumerate().take(stage) {
                    acc += h * a * k[j][i];
                }
                tmp[i] = acc;
            }
            rhs(t + C[stage] * h, &tmp, &mut k[stage]);
        }
        let mut err = 0.0f64;
        let mut y_new = vec![0.0; n];
        for i in 0..n {
            let mut hi = y[i];
            let mut lo = y[i];
            for s in 0..7 {
                hi += h * B5[s] * k[s][i];
                lo += h * B4[s] * k[s][i];
            }
            y_new[i] = hi;
            let sc = tol.atol + tol.rtol * y[i].abs().max(hi.abs());
            err = err.max(((hi - lo) / sc).abs());
        }
        if !err.is_finite() {
            return Err(ArtError::Oracle(format!("non-finite error estimate at t = {t}")));
        }
        if err <= 1.0 {
            t += h;
            y = y_new;
            // first-same-as-last
            k.swap(0, 6);
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= factor;
        if h.abs() < 1e-14 * t.abs().max(1.0) {
            return Err(ArtError::Oracle(format!("step size underflow at t = {t}")));
        }
    }
    Err(ArtError::Oracle("step budget exhausted".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let y = integrate(|_, y, dy| dy[0] = -2.0 * y[0], 0.0, 1.5, &[1.0], Tolerance::default()).unwrap();
        assert!((y[0] - (-3.0f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn harmonic_oscillator_backwards() {
        let rhs = |_: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = y[1];
            dy[1] = -y[0];
        };
        let y = integrate(rhs, 2.0, 0.0, &[2f64.cos(), -(2f64.sin())], Tolerance::default()).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-9);
        assert!(y[1].abs() < 1e-9);
    }

    #[test]
    fn zero_span_is_identity() {
        let y = integrate(|_, _, dy| dy[0] = 1.0, 1.0, 1.0, &[4.0], Tolerance::default()).unwrap();
        assert_eq!(y, vec![4.0]);
    }
}
