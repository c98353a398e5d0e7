//! Small dense networks with exact reverse-mode gradients, and Adam.
//!
//! Parameters live in one flat vector: for each layer, its `out x in`
//! weight matrix (row-major) followed by its `out` biases. Hidden layers use
//! Softplus; the scalar output is linear.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ArtError, Result};

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Layer sizes `[in, 128, 128, 128, 1]`.
pub fn default_sizes(input: usize) -> Vec<usize> {
    vec![input, 128, 128, 128, 1]
}

/// Closed-form parameter count: `sum_l (in_l + 1) * out_l`.
pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Intermediates of one forward pass, reused by [`DenseNet::backward_with`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    input: Vec<f64>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
    /// Post-activations of each hidden layer.
    post: Vec<Vec<f64>>,
}

impl DenseNet {
    /// All-zero network.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(ArtError::Argument(format!("invalid layer sizes {sizes:?}")));
        }
        if *sizes.last().unwrap() != 1 {
            return Err(ArtError::Argument("network output must be scalar".into()));
        }
        Ok(Self { sizes: sizes.to_vec(), params: vec![0.0; param_count(sizes)] })
    }

    /// He-style uniform weights `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, zero biases.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut net.params[off..off + fan_in * fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            off += (fan_in + 1) * fan_out;
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        if params.len() != net.params.len() {
            return Err(ArtError::Argument(format!(
                "expected {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn output_offsets(&self) -> (usize, usize) {
        let n = self.sizes.len();
        let fan_in = self.sizes[n - 2];
        let w_off = self.params.len() - (fan_in + 1);
        (w_off, self.params.len() - 1)
    }

    /// Multiply the output layer's weights by `c`.
    pub fn scale_output_weights(&mut self, c: f64) {
        let (w_off, b_off) = self.output_offsets();
        self.params[w_off..b_off].iter_mut().for_each(|p| *p *= c);
    }

    pub fn set_output_bias(&mut self, b: f64) {
        let (_, b_off) = self.output_offsets();
        self.params[b_off] = b;
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(ArtError::Argument(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        let mut tape = Tape::default();
        self.forward_with(input, &mut tape)
    }

    /// Forward pass that records the intermediates needed for backward.
    pub fn forward_with(&self, input: &[f64], tape: &mut Tape) -> Result<f64> {
        self.check_input(input)?;
        let layers = self.sizes.len() - 1;
        tape.input.clear();
        tape.input.extend_from_slice(input);
        tape.pre.resize(layers - 1, Vec::new());
        tape.post.resize(layers - 1, Vec::new());
        let mut off = 0;
        let mut out = 0.0;
        for l in 0..layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + (fan_in + 1) * fan_out];
            let prev: &[f64] = if l == 0 { &tape.input } else { &tape.post[l - 1] };
            if l + 1 == layers {
                out = b[0] + w.iter().zip(prev).map(|(wi, ai)| wi * ai).sum::<f64>();
            } else {
                let mut z = Vec::with_capacity(fan_out);
                for r in 0..fan_out {
                    let row = &w[r * fan_in..(r + 1) * fan_in];
                    z.push(b[r] + row.iter().zip(prev).map(|(wi, ai)| wi * ai).sum::<f64>());
                }
                tape.post[l] = z.iter().map(|&v| softplus(v)).collect();
                tape.pre[l] = z;
            }
            off += (fan_in + 1) * fan_out;
        }
        Ok(out)
    }

    /// Reverse pass from a recorded tape. Parameter gradients (scaled by
    /// `upstream`) are added into `param_grads` when given; the input
    /// gradient is returned.
    pub fn backward_with(&self, tape: &Tape, upstream: f64, param_grads: Option<&mut [f64]>) -> Vec<f64> {
        let layers = self.sizes.len() - 1;
        let mut grads = param_grads;
        let mut delta = vec![upstream];
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += (self.sizes[l] + 1) * self.sizes[l + 1];
        }
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let w = &self.params[off..off + fan_in * fan_out];
            let prev: &[f64] = if l == 0 { &tape.input } else { &tape.post[l - 1] };
            if let Some(g) = grads.as_deref_mut() {
                for r in 0..fan_out {
                    let d = delta[r];
                    if d != 0.0 {
                        let row = &mut g[off + r * fan_in..off + (r + 1) * fan_in];
                        for (gi, ai) in row.iter_mut().zip(prev) {
                            *gi += d * ai;
                        }
                    }
                    g[off + fan_in * fan_out + r] += d;
                }
            }
            let mut back = vec![0.0; fan_in];
            for r in 0..fan_out {
                let d = delta[r];
                if d != 0.0 {
                    for (bi, wi) in back.iter_mut().zip(&w[r * fan_in..(r + 1) * fan_in]) {
                        *bi += d * wi;
                    }
                }
            }
            if l > 0 {
                for (bi, z) in back.iter_mut().zip(&tape.pre[l - 1]) {
                    *bi *= sigmoid(*z);
                }
            }
            delta = back;
        }
        delta
    }

    /// Exact gradients of `upstream * net(input)` with respect to parameters and input.
    pub fn backward(&self, input: &[f64], upstream: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::default();
        self.forward_with(input, &mut tape)?;
        let mut pg = vec![0.0; self.params.len()];
        let ig = self.backward_with(&tape, upstream, Some(&mut pg));
        Ok((pg, ig))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam without weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Self { config, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// Descent step `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(ArtError::Argument("Adam layout mismatch".into()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(ArtError::Numeric("non-finite gradient".into()));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grads[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= c.lr * mh / (vh.sqrt() + c.eps);
        }
        Ok(())
    }

    /// Ascent step along `direction` (descent on its negation).
    pub fn ascend(&mut self, params: &mut [f64], direction: &[f64]) -> Result<()> {
        let neg: Vec<f64> = direction.iter().map(|d| -d).collect();
        self.step(params, &neg)
    }
}

/// Checkpoint of one network with its optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub seed: u64,
}

impl NetCheckpoint {
    pub fn new(net: &DenseNet, adam: &AdamState, seed: u64) -> Self {
        Self { sizes: net.sizes.clone(), params: net.params.clone(), adam: adam.clone(), seed }
    }

    pub fn restore(&self) -> Result<(DenseNet, AdamState)> {
        let net = DenseNet::from_params(&self.sizes, self.params.clone())?;
        if self.adam.m.len() != net.params.len() || self.adam.v.len() != net.params.len() {
            return Err(ArtError::Format("checkpoint optimizer state does not match network".into()));
        }
        Ok((net, self.adam.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softplus_at_zero() {
        assert_relative_eq!(softplus(0.0), 2f64.ln(), max_relative = 1e-15);
        assert_relative_eq!(softplus(40.0), 40.0, max_relative = 1e-15);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = DenseNet::zeros(&default_sizes(3)).unwrap();
        assert_eq!(net.forward(&[0.3, -1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn linear_unit_net() {
        let net = DenseNet::from_params(&[1, 1], vec![2.5, -0.5]).unwrap();
        assert_eq!(net.forward(&[3.0]).unwrap(), 7.0);
        let (pg, ig) = net.backward(&[3.0], 2.0).unwrap();
        assert_eq!(pg, vec![6.0, 2.0]);
        assert_eq!(ig, vec![5.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DenseNet::init(&[3, 8, 8, 1], &mut rng).unwrap();
        let (pg, ig) = net.backward(&[0.1, 0.2, 0.3], 0.0).unwrap();
        assert!(pg.iter().chain(&ig).all(|g| *g == 0.0));
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let net = DenseNet::zeros(&[2, 4, 1]).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(ArtError::Argument(_))));
        assert!(DenseNet::zeros(&[2, 4, 2]).is_err());
        assert!(DenseNet::from_params(&[1, 1], vec![1.0]).is_err());
    }

    #[test]
    fn param_count_closed_form() {
        let sizes = default_sizes(3);
        assert_eq!(param_count(&sizes), 4 * 128 + 129 * 128 * 2 + 129);
        assert_eq!(DenseNet::zeros(&sizes).unwrap().params().len(), param_count(&sizes));
    }

    #[test]
    fn init_is_deterministic() {
        let a = DenseNet::init(&default_sizes(3), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = DenseNet::init(&default_sizes(3), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.params().iter().any(|p| *p != 0.0));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = AdamState::new(3, AdamConfig::default());
        let mut p = vec![1.0, 1.0, 1.0];
        adam.step(&mut p, &[0.5, -2.0, 1e-3]).unwrap();
        assert_relative_eq!(p[0], 1.0 - 1e-4, max_relative = 1e-9);
        assert_relative_eq!(p[1], 1.0 + 1e-4, max_relative = 1e-9);
        assert_relative_eq!(p[2], 1.0 - 1e-4, max_relative = 1e-6);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut adam = AdamState::new(2, AdamConfig::default());
        let mut p = vec![0.3, -0.7];
        adam.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.3, -0.7]);
    }

    #[test]
    fn adam_second_step_not_larger() {
        // Constant g: m_hat = g on both steps, v_hat = g^2, so both moves equal
        // lr * g / (|g| + eps); the eps term makes the second no larger.
        let mut adam = AdamState::new(1, AdamConfig::default());
        let mut p = vec![0.0];
        adam.step(&mut p, &[0.2]).unwrap();
        let first = p[0].abs();
        adam.step(&mut p, &[0.2]).unwrap();
        let second = (p[0].abs() - first).abs();
        assert!(second <= first * (1.0 + 1e-12));
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut adam = AdamState::new(1, AdamConfig::default());
        assert!(adam.step(&mut [0.0], &[f64::NAN]).is_err());
    }

    #[test]
    fn ascend_moves_uphill() {
        let mut adam = AdamState::new(1, AdamConfig::default());
        let mut p = vec![0.0];
        adam.ascend(&mut p, &[3.0]).unwrap();
        assert!(p[0] > 0.0);
    }

    fn fd_rel_err(analytic: f64, fd: f64) -> f64 {
        (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3)
    }

    #[test]
    fn gradients_match_central_differences() {
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for cfg in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg);
            let sizes = [3, 5, 4, 3, 1];
            let mut net = DenseNet::init(&sizes, &mut rng).unwrap();
            for b in net.params_mut().iter_mut() {
                *b += rng.random_range(-0.5..0.5) * 0.2;
            }
            let input: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let upstream = rng.random_range(0.5..2.0);
            let (pg, ig) = net.backward(&input, upstream).unwrap();
            for (i, &g) in pg.iter().enumerate() {
                let mut p = net.clone();
                p.params_mut()[i] += h;
                let up = p.forward(&input).unwrap();
                p.params_mut()[i] -= 2.0 * h;
                let dn = p.forward(&input).unwrap();
                worst = worst.max(fd_rel_err(g, upstream * (up - dn) / (2.0 * h)));
            }
            for j in 0..input.len() {
                let mut a = input.clone();
                a[j] += h;
                let up = net.forward(&a).unwrap();
                a[j] -= 2.0 * h;
                let dn = net.forward(&a).unwrap();
                worst = worst.max(fd_rel_err(ig[j], upstream * (up - dn) / (2.0 * h)));
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut net = DenseNet::init(&[2, 6, 1], &mut rng).unwrap();
            let mut adam = AdamState::new(net.params().len(), AdamConfig::default());
            for k in 0..5 {
                let (g, _) = net.backward(&[0.1 * k as f64, 1.0], 1.0).unwrap();
                let mut p = net.params().to_vec();
                adam.step(&mut p, &g).unwrap();
                net.params_mut().copy_from_slice(&p);
            }
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = DenseNet::init(&[2, 3, 1], &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let adam = AdamState::new(net.params().len(), AdamConfig::default());
        let ck = NetCheckpoint::new(&net, &adam, 2);
        let text = serde_json::to_string(&ck).unwrap();
        let back: NetCheckpoint = serde_json::from_str(&text).unwrap();
        let (n2, a2) = back.restore().unwrap();
        assert_eq!(n2, net);
        assert_eq!(a2, adam);
    }
}
