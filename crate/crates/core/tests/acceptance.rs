//! Acceptance suite. Each criterion prints one PASS/FAIL line to stdout
//! (written past the test harness capture) and then asserts.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use art_core::artrl::{
    critic_implied_mean, distill, train, CriticParams, DistillConfig, DistillOutput, FeatureMap, TrainConfig,
};
use art_core::diffusion::{curvature, DiffusionSpec, GaussianMixture, LinearGaussian1D, ScoreModel, Sde};
use art_core::eval::{w2_closed_form, SweepSchedule, DEFAULT_KS};
use art_core::formats::{GridSource, ScheduleFile};
use art_core::nn::DenseNet;
use art_core::par::Execution;
use art_core::sampler::{local_error_study, sample, sample_batch, Method};
use art_core::schedule::{edm_grid, grid_from_theta, uniform_grid, validate_grid, TimeGrid};

const UNIFORM_ROW: [f64; 6] = [0.468, 0.215, 0.114, 0.060, 0.027, 0.016];
const ART_ROW: [f64; 6] = [0.345, 0.149, 0.079, 0.042, 0.020, 0.013];

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{verdict} [{id:>2}] {name}: {detail}");
    let _ = out.flush();
}

fn demo() -> (DiffusionSpec, LinearGaussian1D) {
    (DiffusionSpec::demo_1d(), LinearGaussian1D)
}

fn uniform_w2(k: usize) -> f64 {
    w2_closed_form(&DiffusionSpec::demo_1d(), &uniform_grid(3.0, k).unwrap()).unwrap()
}

fn fmt_row(v: &[f64]) -> String {
    let cells: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", cells.join(", "))
}

/// A default-hyperparameter training run followed by distillation.
struct Run {
    tail_abs_gap: f64,
    distilled: DistillOutput,
    grid: TimeGrid,
    w2: Vec<f64>,
}

type RunKey = (u64, u64);

fn runs() -> &'static Mutex<HashMap<RunKey, Arc<OnceLock<Run>>>> {
    static RUNS: OnceLock<Mutex<HashMap<RunKey, Arc<OnceLock<Run>>>>> = OnceLock::new();
    RUNS.get_or_init(Default::default)
}

/// Train with the defaults (N = 5000, K = 100) at `lambda`, distill M = 10,000
/// rollouts, and evaluate the learned row. Shared between criteria.
fn trained(seed: u64, lambda: f64) -> Arc<OnceLock<Run>> {
    let cell = runs().lock().unwrap().entry((seed, lambda.to_bits())).or_default().clone();
    cell.get_or_init(|| {
        let (spec, sc) = demo();
        let cfg = TrainConfig { seed, lambda, ..TrainConfig::default() };
        let out = train(&spec, &sc, &cfg).expect("training");
        let dc = DistillConfig { seed, steps: cfg.steps, ..DistillConfig::default() };
        let distilled = distill(&out.policy, &spec, &sc, &dc, Execution::Parallel).expect("distill");
        let grid = grid_from_theta(&distilled.curve).expect("distilled grid");
        let row = SweepSchedule::Learned { name: "art-rl".into(), grid: grid.clone() };
        let w2 = DEFAULT_KS
            .iter()
            .map(|&k| w2_closed_form(&spec, &row.grid(3.0, k).unwrap()).unwrap())
            .collect();
        Run { tail_abs_gap: out.tail_abs_gap(0.1), distilled, grid, w2 }
    });
    cell
}

#[test]
fn criterion_01_uniform_row() {
    let start = Instant::now();
    let w2: Vec<f64> = DEFAULT_KS.iter().map(|&k| uniform_w2(k)).collect();
    let elapsed = start.elapsed().as_secs_f64();
    let rel: Vec<f64> = w2.iter().zip(UNIFORM_ROW).map(|(a, b)| (a - b).abs() / b).collect();
    let pass = rel.iter().all(|r| *r <= 0.03) && elapsed < 1.0;
    report(
        1,
        "uniform closed-form row within 3%",
        pass,
        &format!("w2 {} rel {} in {elapsed:.3}s", fmt_row(&w2), fmt_row(&rel)),
    );
    assert!(pass);
}

#[test]
fn criterion_02_learned_row() {
    let uniform: Vec<f64> = DEFAULT_KS.iter().map(|&k| uniform_w2(k)).collect();
    let mut passing = 0;
    let mut lines = Vec::new();
    for seed in 0..5 {
        let cell = trained(seed, 0.1);
        let run = cell.get().unwrap();
        let below = run.w2.iter().zip(&uniform).all(|(a, u)| a < u);
        let close = run.w2.iter().zip(ART_ROW).all(|(a, b)| (a - b).abs() / b <= 0.2);
        if below && close {
            passing += 1;
        }
        lines.push(format!("seed {seed}: {} below={below} within20%={close}", fmt_row(&run.w2)));
    }
    let pass = passing >= 3;
    report(2, "learned row beats uniform and is within 20% (3 of 5 seeds)", pass, &format!("{passing}/5 seeds; {}", lines.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_03_edm_ordering() {
    let spec = DiffusionSpec::demo_1d();
    let mut bad = Vec::new();
    for k in 5..=100 {
        let e3 = w2_closed_form(&spec, &edm_grid(3.0, k, 3.0, 0.002, 3.0, true).unwrap()).unwrap();
        let e7 = w2_closed_form(&spec, &edm_grid(3.0, k, 7.0, 0.002, 3.0, true).unwrap()).unwrap();
        let u = uniform_w2(k);
        if !(e3 < u && u < e7) {
            bad.push(k);
        }
    }
    let pass = bad.is_empty();
    report(3, "EDM(rho=3) < uniform < EDM(rho=7) for K = 5..=100", pass, &format!("violations at K = {bad:?}"));
    assert!(pass);
}

fn probe_ok(spec: &DiffusionSpec, score: &dyn ScoreModel, seed: u64) -> (bool, String) {
    let hs = [0.1, 0.05, 0.025, 0.0125];
    let rows = local_error_study(spec, score, 20, &hs, seed, Execution::Parallel).unwrap();
    let (mut fmin, mut fmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut ratio_ok = true;
    let mut last_dev: f64 = 0.0;
    let mut total = vec![0.0; hs.len()];
    for state in rows.chunks(hs.len()) {
        for (t, r) in total.iter_mut().zip(state) {
            *t += r.gap();
        }
        for w in state.windows(2) {
            let f = w[0].gap() / w[1].gap();
            fmin = fmin.min(f);
            fmax = fmax.max(f);
            if (w[1].ratio() - 1.0).abs() >= (w[0].ratio() - 1.0).abs() {
                ratio_ok = false;
            }
        }
        last_dev = last_dev.max((state[hs.len() - 1].ratio() - 1.0).abs());
    }
    let pass = ratio_ok && fmin >= 6.0 && fmax <= 10.0;
    let pooled: Vec<f64> = total.windows(2).map(|w| w[0] / w[1]).collect();
    (
        pass,
        format!(
            "per-state gap factors in [{fmin:.3}, {fmax:.3}], pooled {}, max |ratio-1| at h=0.0125 {last_dev:.2e}, ratio monotone {ratio_ok}",
            fmt_row(&pooled)
        ),
    )
}

#[test]
fn criterion_04_local_error_proxy() {
    let (spec, sc) = demo();
    let (p1, d1) = probe_ok(&spec, &sc, 41);
    let spec2 = DiffusionSpec::new(2, 3.0, Sde::QuadraticVariance).unwrap();
    let gm = GaussianMixture::new(
        vec![0.5, 0.5],
        vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
        vec![vec![1.0, 1.0], vec![1.0, 1.0]],
    )
    .unwrap();
    let (p2, d2) = probe_ok(&spec2, &gm, 42);
    let pass = p1 && p2;
    report(4, "local error residual/predicted -> 1, gap shrinks 6-10x per halving", pass, &format!("demo: {d1}; mixture: {d2}"));
    assert!(pass);
}

#[test]
fn criterion_05_curvature_closed_form() {
    let (spec, sc) = demo();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x: f64 = rng.random_range(-5.0..5.0);
        let psi: f64 = rng.random_range(0.0..=3.0);
        let s = 3.0 - psi;
        let exact = x / ((1.0 + s * s) * (1.0 + s * s));
        let q = curvature(&spec, &sc, &[x], psi).unwrap().q[0];
        worst = worst.max((q - exact).abs() / exact.abs());
    }
    let pass = worst < 1e-12;
    report(5, "curvature matches x/(1+s^2)^2", pass, &format!("max relative error {worst:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_06_gradient_integrity() {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for cfg in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + cfg);
        let net = DenseNet::init(&[3, 128, 128, 128, 1], &mut rng).unwrap();
        let input: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (pg, ig) = net.backward(&input, 1.0).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
        // every input, and a seeded sample of parameters from every layer
        for j in 0..3 {
            let mut a = input.clone();
            a[j] += h;
            let up = net.forward(&a).unwrap();
            a[j] -= 2.0 * h;
            let dn = net.forward(&a).unwrap();
            worst = worst.max(rel(ig[j], (up - dn) / (2.0 * h)));
        }
        for _ in 0..40 {
            let i = rng.random_range(0..pg.len());
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let up = p.forward(&input).unwrap();
            p.params_mut()[i] -= 2.0 * h;
            let dn = p.forward(&input).unwrap();
            worst = worst.max(rel(pg[i], (up - dn) / (2.0 * h)));
        }
    }
    let pass = worst < 1e-5;
    report(6, "network gradients match central differences", pass, &format!("max relative error {worst:.2e} over 100 configurations"));
    assert!(pass);
}

#[test]
fn criterion_07_constraint_handling() {
    let cell = trained(0, 0.1);
    let run = cell.get().unwrap();
    let budget_err = ((run.distilled.curve.budget() - 3.0) / 3.0).abs();
    let gap_ok = run.tail_abs_gap < 0.02 * 3.0;
    let pass = gap_ok && budget_err < 1e-12;
    report(
        7,
        "terminal clock within 0.02 T over the last 10% and exact distilled budget",
        pass,
        &format!("tail mean |psi_K - T| = {:.4} (limit 0.06), budget relative error {budget_err:.1e}", run.tail_abs_gap),
    );
    assert!(pass);
}

#[test]
fn criterion_08_value_structure() {
    let (spec, sc) = demo();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let features = FeatureMap::new(3.0, 1);
    let net = DenseNet::init(&[3, 128, 128, 128, 1], &mut rng).unwrap();
    let mut shift_ok = true;
    let mut mu_ok = true;
    for _ in 0..200 {
        let t: f64 = rng.random_range(0.0..=3.0);
        let psi: f64 = rng.random_range(0.0..2.99);
        let x = [rng.random_range(0.1..4.0)];
        let raw = net.forward(&features.eval(t, &x, psi)).unwrap();
        let mut mus = Vec::new();
        for lambda in [0.05, 0.1, 0.2] {
            let critic = CriticParams { net: net.clone(), features, lambda };
            let v = critic.value(t, &x, psi).unwrap();
            if ((v - raw) - lambda * t).abs() > 4.0 * f64::EPSILON * v.abs().max(1.0) {
                shift_ok = false;
            }
            mus.push(critic_implied_mean(&critic, &spec, &sc, t, &x, psi, 0.2, 1e-6).unwrap().to_bits());
        }
        mu_ok &= mus.iter().all(|m| *m == mus[0]);
    }
    let lo = trained(0, 0.05);
    let hi = trained(0, 0.2);
    let (a, b) = (&lo.get().unwrap().w2, &hi.get().unwrap().w2);
    let rel: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.min(*y)).collect();
    let robust = rel.iter().all(|r| *r <= 0.1);
    let pass = shift_ok && mu_ok && robust;
    report(
        8,
        "value shift, lambda-free implied mean, lambda-robust schedules",
        pass,
        &format!(
            "shift {shift_ok}, implied mean bit-identical {mu_ok}; w2 at 0.05 {} vs 0.2 {} rel {}",
            fmt_row(a),
            fmt_row(b),
            fmt_row(&rel)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_narrow_band() {
    let cell = trained(0, 0.1);
    let stats = &cell.get().unwrap().distilled.stats;
    let iqr = stats.median_iqr_ratio();
    let ci = stats.max_ci_ratio();
    let pass = iqr < 0.1 && ci < 0.01;
    report(9, "distilled IQR band and 99% CI are narrow", pass, &format!("median IQR/range {iqr:.4} (< 0.1), max CI half-width/range {ci:.4} (< 0.01), M = {}", stats.count));
    assert!(pass);
}

fn slope(ks: &[usize], errs: &[f64]) -> f64 {
    // least-squares slope of log(err) against log(1/K)
    let xs: Vec<f64> = ks.iter().map(|&k| -(k as f64).ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

#[test]
fn criterion_10_solver_orders() {
    let (spec, sc) = demo();
    let ks = [10, 20, 50, 100, 200, 500, 1000];
    let exact = 1.0 / 10f64.sqrt();
    let err = |m: Method| -> Vec<f64> {
        ks.iter()
            .map(|&k| (sample(m, &spec, &sc, &uniform_grid(3.0, k).unwrap(), &[1.0]).unwrap()[0] - exact).abs())
            .collect()
    };
    let (se, sh) = (slope(&ks, &err(Method::Euler)), slope(&ks, &err(Method::Heun)));
    let grid = uniform_grid(3.0, 7).unwrap();
    let nfe_ok = ks.iter().all(|&k| Method::Euler.nfe(k) == k && Method::Heun.nfe(k) == 2 * k - 1)
        && sample_batch(&spec, &sc, &grid, Method::Heun, 4, 0, Execution::Sequential).unwrap().nfe == 13
        && sample_batch(&spec, &sc, &grid, Method::Euler, 4, 0, Execution::Sequential).unwrap().nfe == 7;
    let pass = (se - 1.0).abs() <= 0.1 && (sh - 2.0).abs() <= 0.2 && nfe_ok;
    report(10, "Euler order 1, Heun order 2, exact NFE accounting", pass, &format!("slopes {se:.4} and {sh:.4}, NFE {nfe_ok}"));
    assert!(pass);
}

#[test]
fn criterion_11_schedule_export() {
    let (spec, sc) = demo();
    let cell = trained(0, 0.1);
    let learned = SweepSchedule::Learned { name: "art-rl".into(), grid: cell.get().unwrap().grid.clone() };
    let grids = [
        ("edm", edm_grid(3.0, 18, 7.0, 0.002, 3.0, true).unwrap()),
        ("art-rl", learned.grid(3.0, 18).unwrap()),
    ];
    let mut notes = Vec::new();
    let mut pass = true;
    for (name, grid) in grids {
        let text = serde_json::to_string(&ScheduleFile::from_grid(&grid, None)).unwrap();
        let back = GridSource::parse(&text).and_then(|g| g.to_grid()).unwrap();
        let valid = validate_grid(&back).is_valid() && back.steps() == 18 && back == grid;
        let nfe = sample_batch(&spec, &sc, &back, Method::Heun, 8, 0, Execution::Sequential).unwrap().nfe;
        pass &= valid && nfe == 35;
        notes.push(format!("{name}: valid {valid}, NFE {nfe}"));
    }
    report(11, "K=18 art-sched/1 exports validate with NFE 35", pass, &notes.join("; "));
    assert!(pass);
}
