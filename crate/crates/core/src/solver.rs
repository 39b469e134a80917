//! Weighted unidimensional scaling by smoothed-stress continuation.
//!
//! The raw stress of a configuration `x` is
//! `S(x) = Σ_{i<j} w_ij (|x_i - x_j| - δ_ij)^2`. Its cube-averaged
//! smoothing with side `ε` has the closed form
//!
//! ```text
//! S_ε(x) = Σ_{i<j} w_ij ((x_i - x_j)^2 - 2 δ_ij g_ε(x_i - x_j)) + Σ_{i<j} w_ij δ_ij^2
//! ```
//!
//! with `g_ε` the smoothed absolute value. [`solve`] minimizes `S_ε` along a
//! decreasing schedule of `ε`, warm-starting each stage from the previous
//! one, and finishes with a polish at a tiny `ε`.
//!
//! The per-stage iteration is the row-normalized fixed-point map
//! `x_i ← Σ_j w_ij (x_j + δ_ij u_ε(x_i - x_j)) / Σ_j w_ij`, damped by a
//! relaxation factor and guarded by step halving.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dissim::DissimMatrix;
use crate::error::{Error, Result};

/// One coordinate per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config1D {
    pub x: Vec<f64>,
}

impl Config1D {
    pub fn spread(&self) -> f64 {
        let (lo, hi) = self.x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        hi - lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    /// Number of `ε` stages in the continuation schedule.
    pub steps: usize,
    pub max_iters_per_eps: usize,
    /// Stage stops once the gradient norm drops below this.
    pub grad_tol: f64,
    /// Relaxation `γ` in `(0, 1]`; 1 is the undamped fixed-point map.
    pub relaxation: f64,
    pub backtracking: bool,
    pub seed: u64,
    /// Width of the uniform initial jitter, in units of `d*`.
    pub init_jitter: f64,
    /// Use `x_j - δ u` instead of `x_j + δ u` in the update.
    pub minus_update: bool,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            steps: 20,
            max_iters_per_eps: 10_000,
            grad_tol: 1e-6,
            relaxation: 0.5,
            backtracking: true,
            seed: 0,
            init_jitter: 0.01,
            minus_update: false,
        }
    }
}

impl SolverParams {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidParam("schedule needs at least one step".into()));
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(Error::InvalidParam(format!("relaxation {} outside (0, 1]", self.relaxation)));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidParam("gradient tolerance must be positive".into()));
        }
        if !(self.init_jitter >= 0.0) {
            return Err(Error::InvalidParam("jitter must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub eps: f64,
    pub iterations: usize,
    pub smoothed_stress: f64,
    pub grad_norm: f64,
    /// `S_ε` after every accepted step, starting with the stage's initial value.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub dstar: f64,
    pub stages: Vec<StageTrace>,
    pub polish: Option<StageTrace>,
    pub final_stress: f64,
}

/// `g_ε(t)`: `|t|` outside `(-ε, ε)`, a cubic blend with `g_ε(0) = ε/3` inside.
#[inline]
pub fn g_eps(t: f64, eps: f64) -> f64 {
    let a = t.abs();
    if a < eps {
        t * t * (3.0 * eps - a) / (3.0 * eps * eps) + eps / 3.0
    } else {
        a
    }
}

/// `u_ε = g_ε'`: `sign(t)` outside `(-ε, ε)`, `(t/ε)(2 - |t|/ε)` inside.
#[inline]
pub fn u_eps(t: f64, eps: f64) -> f64 {
    let a = t.abs();
    if a < eps {
        (t / eps) * (2.0 - a / eps)
    } else if t > 0.0 {
        1.0
    } else if t < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Compressed adjacency of the weighted pairs.
struct Problem {
    offsets: Vec<usize>,
    nbr: Vec<usize>,
    w: Vec<f64>,
    delta: Vec<f64>,
    row_w: Vec<f64>,
    /// Upper-triangle pairs for stress sums.
    pairs: Vec<(usize, usize, f64, f64)>,
    constant: f64,
}

impl Problem {
    fn new(m: &DissimMatrix) -> Self {
        let n = m.n();
        let mut offsets = Vec::with_capacity(n + 1);
        let (mut nbr, mut w, mut delta) = (Vec::new(), Vec::new(), Vec::new());
        let mut row_w = vec![0.0; n];
        offsets.push(0);
        for i in 0..n {
            for j in 0..n {
                let wij = m.weight(i, j);
                if wij > 0.0 {
                    nbr.push(j);
                    w.push(wij);
                    delta.push(m.dissim(i, j));
                    row_w[i] += wij;
                }
            }
            offsets.push(nbr.len());
        }
        let pairs: Vec<_> = m.pairs().map(|p| (p.i, p.j, p.weight, p.dissim)).collect();
        let constant = pairs.iter().map(|&(_, _, w, d)| w * d * d).sum();
        Self { offsets, nbr, w, delta, row_w, pairs, constant }
    }

    fn n(&self) -> usize {
        self.row_w.len()
    }

    fn check_rows(&self) -> Result<()> {
        match self.row_w.iter().position(|&s| !(s > 0.0)) {
            Some(i) => Err(Error::ZeroRowSum(i)),
            None => Ok(()),
        }
    }

    fn stress(&self, x: &[f64]) -> f64 {
        self.pairs.iter().map(|&(i, j, w, d)| w * ((x[i] - x[j]).abs() - d).powi(2)).sum()
    }

    fn smoothed(&self, x: &[f64], eps: f64) -> f64 {
        let s: f64 = self
            .pairs
            .iter()
            .map(|&(i, j, w, d)| {
                let t = x[i] - x[j];
                w * (t * t - 2.0 * d * g_eps(t, eps))
            })
            .sum();
        s + self.constant
    }

    /// `S_ε(y) - S_ε(x)` summed pairwise, avoiding cancellation against the
    /// large constant.
    fn smoothed_delta(&self, x: &[f64], y: &[f64], eps: f64) -> f64 {
        self.pairs
            .iter()
            .map(|&(i, j, w, d)| {
                let (t0, t1) = (x[i] - x[j], y[i] - y[j]);
                let sq = (t1 - t0) * (t1 + t0);
                let dg = if t0.abs() >= eps && t1.abs() >= eps {
                    t1.abs() - t0.abs()
                } else {
                    g_eps(t1, eps) - g_eps(t0, eps)
                };
                w * (sq - 2.0 * d * dg)
            })
            .sum()
    }

    fn gradient(&self, x: &[f64], eps: f64, out: &mut [f64]) {
        for i in 0..self.n() {
            let mut acc = 0.0;
            for k in self.offsets[i]..self.offsets[i + 1] {
                let t = x[i] - x[self.nbr[k]];
                acc += self.w[k] * (t - self.delta[k] * u_eps(t, eps));
            }
            out[i] = 2.0 * acc;
        }
    }

    /// Relaxed fixed-point step written into `out`.
    fn step(&self, x: &[f64], eps: f64, gamma: f64, minus_update: bool, out: &mut [f64]) {
        let sign = if minus_update { -1.0 } else { 1.0 };
        for i in 0..self.n() {
            let mut acc = 0.0;
            for k in self.offsets[i]..self.offsets[i + 1] {
                let j = self.nbr[k];
                acc += self.w[k] * (x[j] + sign * self.delta[k] * u_eps(x[i] - x[j], eps));
            }
            out[i] = (1.0 - gamma) * x[i] + gamma * acc / self.row_w[i];
        }
    }

    fn dstar(&self) -> f64 {
        (0..self.n())
            .map(|i| {
                let sum_d: f64 = self.delta[self.offsets[i]..self.offsets[i + 1]].iter().sum();
                sum_d / self.row_w[i]
            })
            .fold(0.0, f64::max)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|g| g * g).sum::<f64>().sqrt()
}

fn check_len(x: &[f64], m: &DissimMatrix) -> Result<()> {
    if x.len() != m.n() {
        return Err(Error::DimensionMismatch { expected: m.n(), got: x.len() });
    }
    Ok(())
}

pub fn stress(x: &[f64], m: &DissimMatrix) -> Result<f64> {
    check_len(x, m)?;
    Ok(Problem::new(m).stress(x))
}

pub fn smoothed_stress(x: &[f64], m: &DissimMatrix, eps: f64) -> Result<f64> {
    check_len(x, m)?;
    check_eps(eps)?;
    Ok(Problem::new(m).smoothed(x, eps))
}

pub fn smoothed_gradient(x: &[f64], m: &DissimMatrix, eps: f64) -> Result<Vec<f64>> {
    check_len(x, m)?;
    check_eps(eps)?;
    let mut g = vec![0.0; x.len()];
    Problem::new(m).gradient(x, eps, &mut g);
    Ok(g)
}

/// One simultaneous relaxed update of every coordinate.
pub fn iterate_once(x: &[f64], m: &DissimMatrix, eps: f64, gamma: f64) -> Result<Vec<f64>> {
    check_len(x, m)?;
    check_eps(eps)?;
    let p = Problem::new(m);
    p.check_rows()?;
    let mut out = vec![0.0; x.len()];
    p.step(x, eps, gamma, false, &mut out);
    Ok(out)
}

/// `d* = max_i Σ_j δ_ij / Σ_j w_ij`.
pub fn compute_dstar(m: &DissimMatrix) -> Result<f64> {
    let p = Problem::new(m);
    p.check_rows()?;
    Ok(p.dstar())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParam(format!("smoothing width must be positive, got {eps}")));
    }
    Ok(())
}

/// The continuation schedule `ε_q = 2 d* (Q - q + 1) / Q`, `q = 1..=Q`.
pub fn schedule(dstar: f64, steps: usize) -> Vec<f64> {
    let e1 = 2.0 * dstar;
    (1..=steps).map(|q| e1 * (steps - q + 1) as f64 / steps as f64).collect()
}

/// Runs the damped iteration at fixed `ε` until the gradient is small, the
/// iteration budget is spent, or step halving stalls. Returns the final
/// configuration, and the best raw-stress iterate when `track_raw` is set.
fn run_stage(
    p: &Problem,
    x: &mut Vec<f64>,
    eps: f64,
    params: &SolverParams,
    track_raw: bool,
) -> (StageTrace, Option<(f64, Vec<f64>)>) {
    let n = p.n();
    let mut grad = vec![0.0; n];
    let mut cand = vec![0.0; n];
    let mut current = p.smoothed(x, eps);
    let mut history = vec![current];
    let mut best_raw = track_raw.then(|| (p.stress(x), x.clone()));
    let mut iterations = 0;
    let mut gnorm;
    loop {
        p.gradient(x, eps, &mut grad);
        gnorm = norm(&grad);
        if gnorm < params.grad_tol || iterations >= params.max_iters_per_eps {
            break;
        }
        let mut gamma = params.relaxation;
        let mut accepted = false;
        for _ in 0..64 {
            p.step(x, eps, gamma, params.minus_update, &mut cand);
            if !params.backtracking || p.smoothed_delta(x, &cand, eps) <= 0.0 {
                accepted = true;
                break;
            }
            gamma *= 0.5;
        }
        iterations += 1;
        if !accepted || cand == *x {
            break;
        }
        std::mem::swap(x, &mut cand);
        current = p.smoothed(x, eps);
        history.push(current);
        if let Some((best, bx)) = best_raw.as_mut() {
            let s = p.stress(x);
            if s < *best {
                *best = s;
                bx.copy_from_slice(x);
            }
        }
    }
    (StageTrace { eps, iterations, smoothed_stress: current, grad_norm: gnorm, history }, best_raw)
}

/// Minimizes `S_ε` at a single fixed `ε` from `x0`.
pub fn minimize_smoothed(m: &DissimMatrix, x0: &[f64], eps: f64, params: &SolverParams) -> Result<(Config1D, StageTrace)> {
    check_len(x0, m)?;
    check_eps(eps)?;
    params.validate()?;
    let p = Problem::new(m);
    p.check_rows()?;
    let mut x = x0.to_vec();
    let (trace, _) = run_stage(&p, &mut x, eps, params, false);
    Ok((Config1D { x }, trace))
}

fn random_start(n: usize, width: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>() * width).collect()
}

/// Full continuation from a seeded jitter around zero.
pub fn solve(m: &DissimMatrix, params: &SolverParams) -> Result<(Config1D, SolverTrace)> {
    let p = Problem::new(m);
    p.check_rows()?;
    let x0 = random_start(m.n(), params.init_jitter * p.dstar(), params.seed);
    solve_problem(&p, x0, params)
}

/// Full continuation from a caller-supplied configuration.
pub fn solve_from(m: &DissimMatrix, x0: &[f64], params: &SolverParams) -> Result<(Config1D, SolverTrace)> {
    check_len(x0, m)?;
    let p = Problem::new(m);
    p.check_rows()?;
    solve_problem(&p, x0.to_vec(), params)
}

fn solve_problem(p: &Problem, mut x: Vec<f64>, params: &SolverParams) -> Result<(Config1D, SolverTrace)> {
    params.validate()?;
    if p.n() < 2 {
        return Err(Error::TooFewTraded(p.n()));
    }
    let dstar = p.dstar();
    if dstar <= 0.0 {
        // every target is zero: any constant configuration is exact
        let x = vec![0.0; p.n()];
        let final_stress = p.stress(&x);
        return Ok((Config1D { x }, SolverTrace { dstar, stages: Vec::new(), polish: None, final_stress }));
    }
    let eps_seq = schedule(dstar, params.steps);
    let mut stages = Vec::with_capacity(eps_seq.len());
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x9e37_79b9_7f4a_7c15);
    for &eps in &eps_seq {
        reinflate(&mut x, params.init_jitter * dstar, &mut rng);
        let (trace, _) = run_stage(p, &mut x, eps, params, false);
        log::debug!("eps {eps:.4e}: {} iters, S_eps {:.6e}, |grad| {:.2e}", trace.iterations, trace.smoothed_stress, trace.grad_norm);
        stages.push(trace);
    }
    let (x, polish) = polish(p, x, eps_seq[eps_seq.len() - 1] / 100.0, params);
    let final_stress = p.stress(&x);
    Ok((Config1D { x }, SolverTrace { dstar, stages, polish: Some(polish), final_stress }))
}

/// Rescales a configuration that has contracted below `width` back up to
/// that spread around its mean. The surviving deviation points along the
/// slowest-contracting mode, which is the first to turn unstable as `ε`
/// shrinks; without this the stage would stop on the tiny gradient of a
/// near-tie saddle. Exact ties are re-jittered.
fn reinflate(x: &mut [f64], width: f64, rng: &mut ChaCha8Rng) {
    if !(width > 0.0) {
        return;
    }
    let spread = Config1D { x: x.to_vec() }.spread();
    if spread >= width {
        return;
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    if spread > 0.0 {
        let f = width / spread;
        x.iter_mut().for_each(|v| *v = mean + (*v - mean) * f);
    } else {
        x.iter_mut().for_each(|v| *v = mean + rng.random::<f64>() * width);
    }
}

/// Near-raw minimization at a tiny `ε`, keeping the best raw-stress iterate.
fn polish(p: &Problem, mut x: Vec<f64>, eps: f64, params: &SolverParams) -> (Vec<f64>, StageTrace) {
    let (trace, best) = run_stage(p, &mut x, eps, params, true);
    let (best_s, best_x) = best.expect("tracked");
    if best_s <= p.stress(&x) { (best_x, trace) } else { (x, trace) }
}

/// A single local descent: minimize `S_ε` at the schedule's last `ε` from
/// `x0`, then polish. The baseline the continuation is compared against.
pub fn local_descent(m: &DissimMatrix, x0: &[f64], params: &SolverParams) -> Result<(Config1D, f64)> {
    check_len(x0, m)?;
    params.validate()?;
    let p = Problem::new(m);
    p.check_rows()?;
    let dstar = p.dstar();
    let mut x = x0.to_vec();
    if dstar > 0.0 {
        let eps = *schedule(dstar, params.steps).last().expect("non-empty schedule");
        run_stage(&p, &mut x, eps, params, false);
        x = polish(&p, x, eps / 100.0, params).0;
    }
    let s = p.stress(&x);
    Ok((Config1D { x }, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point() -> DissimMatrix {
        let mut m = DissimMatrix::zeros(2);
        m.set(0, 1, 1.0, 2.0);
        m
    }

    fn chain() -> DissimMatrix {
        let pts = [0.0f64, 1.0, 3.0];
        let mut m = DissimMatrix::zeros(3);
        for i in 0..3 {
            for j in i + 1..3 {
                m.set(i, j, 1.0, (pts[i] - pts[j]).abs());
            }
        }
        m
    }

    #[test]
    fn stress_examples() {
        let m = two_point();
        assert_eq!(stress(&[0.0, 2.0], &m).unwrap(), 0.0);
        assert_eq!(stress(&[0.0, 0.0], &m).unwrap(), 4.0);
        assert_eq!(stress(&[5.0, 7.0], &m).unwrap(), 0.0);
        assert!(stress(&[0.0], &m).is_err());
    }

    #[test]
    fn smoothing_kernel_values() {
        let eps = 0.7;
        assert!((g_eps(0.0, eps) - eps / 3.0).abs() < 1e-15);
        assert!((g_eps(eps, eps) - eps).abs() < 1e-15);
        assert!((g_eps(eps * (1.0 - 1e-12), eps) - eps).abs() < 1e-10);
        assert!((u_eps(eps / 2.0, eps) - 0.75).abs() < 1e-15);
        assert_eq!(u_eps(-2.0 * eps, eps), -1.0);
        assert_eq!(u_eps(0.0, eps), 0.0);
    }

    #[test]
    fn smoothed_equals_raw_when_far_apart() {
        let m = chain();
        let x = [0.0, 1.3, 4.0];
        let s = stress(&x, &m).unwrap();
        let se = smoothed_stress(&x, &m, 0.5).unwrap();
        assert!((s - se).abs() < 1e-12);
    }

    #[test]
    fn gradient_vanishes_at_exact_embedding() {
        let g = smoothed_gradient(&[0.0, 1.0, 3.0], &chain(), 0.5).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn iterate_worked_example() {
        let x = iterate_once(&[0.5, 0.0], &two_point(), 1.0, 1.0).unwrap();
        assert!((x[0] - 1.5).abs() < 1e-15);
        assert!((x[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn equal_coordinates_are_a_fixed_point() {
        let x = iterate_once(&[2.0, 2.0, 2.0], &chain(), 0.3, 1.0).unwrap();
        assert_eq!(x, vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn zero_row_rejected() {
        let mut m = DissimMatrix::zeros(3);
        m.set(0, 1, 1.0, 1.0);
        assert!(matches!(iterate_once(&[0.0; 3], &m, 1.0, 1.0), Err(Error::ZeroRowSum(2))));
        assert!(matches!(compute_dstar(&m), Err(Error::ZeroRowSum(2))));
    }

    #[test]
    fn dstar_examples() {
        assert_eq!(compute_dstar(&two_point()).unwrap(), 2.0);
        let mut z = DissimMatrix::zeros(2);
        z.set(0, 1, 1.0, 0.0);
        assert_eq!(compute_dstar(&z).unwrap(), 0.0);
        let mut scaled = DissimMatrix::zeros(2);
        scaled.set(0, 1, 1.0, 6.0);
        assert_eq!(compute_dstar(&scaled).unwrap(), 6.0);
    }

    #[test]
    fn schedule_is_linear() {
        let s = schedule(1.5, 4);
        assert_eq!(s, vec![3.0, 2.25, 1.5, 0.75]);
    }

    #[test]
    fn two_point_solve() {
        let (x, trace) = solve(&two_point(), &SolverParams::default()).unwrap();
        assert!(((x.x[0] - x.x[1]).abs() - 2.0).abs() < 1e-6);
        assert!(trace.final_stress < 1e-10);
    }

    #[test]
    fn chain_recovered() {
        let (x, trace) = solve(&chain(), &SolverParams::default()).unwrap();
        let mut v = x.x.clone();
        if v[2] < v[0] {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        assert!(((v[1] - v[0]) - 1.0).abs() < 1e-6);
        assert!(((v[2] - v[1]) - 2.0).abs() < 1e-6);
        assert!(((v[2] - v[0]) - 3.0).abs() < 1e-6);
        assert!(trace.final_stress < 1e-10);
    }

    #[test]
    fn single_huge_eps_stage_collapses() {
        let m = chain();
        let dstar = compute_dstar(&m).unwrap();
        let (x, _) = minimize_smoothed(&m, &[0.0, 5.0, -3.0], 5.0 * dstar, &SolverParams::default()).unwrap();
        assert!(x.spread() < 1e-6, "spread {}", x.spread());
    }

    #[test]
    fn undamped_two_point_cycles() {
        // gap 1 maps to gap 3 and back at γ = 1
        let m = two_point();
        let x1 = iterate_once(&[1.0, 0.0], &m, 0.5, 1.0).unwrap();
        let x2 = iterate_once(&x1, &m, 0.5, 1.0).unwrap();
        assert!(((x1[0] - x1[1]) - 3.0).abs() < 1e-15);
        assert!(((x2[0] - x2[1]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn minus_update_does_not_reach_zero_stress() {
        let params = SolverParams { minus_update: true, backtracking: false, relaxation: 1.0, max_iters_per_eps: 50, ..Default::default() };
        let (_, trace) = solve(&two_point(), &params).unwrap();
        assert!(trace.final_stress > 1e-3);
    }

    #[test]
    fn invalid_params_rejected() {
        let m = two_point();
        for params in [
            SolverParams { steps: 0, ..Default::default() },
            SolverParams { relaxation: 0.0, ..Default::default() },
            SolverParams { relaxation: 1.5, ..Default::default() },
            SolverParams { grad_tol: 0.0, ..Default::default() },
        ] {
            assert!(matches!(solve(&m, &params), Err(Error::InvalidParam(_))));
        }
    }

    #[test]
    fn zero_targets_give_constant() {
        let mut m = DissimMatrix::zeros(3);
        m.set(0, 1, 1.0, 0.0);
        m.set(1, 2, 1.0, 0.0);
        let (x, trace) = solve(&m, &SolverParams::default()).unwrap();
        assert_eq!(x.spread(), 0.0);
        assert_eq!(trace.final_stress, 0.0);
    }
}
