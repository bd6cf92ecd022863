//! Shared optimization machinery: softmax row embeddings, a deterministic
//! Barzilai–Borwein descent with forward-difference gradients, multistart
//! driving, and simplex grids.
//!
//! Everything here is deterministic given the caller's seed: random starts
//! come from per-index `ChaCha8` streams and parallel reductions fold in
//! fixed index order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// A block structure of simplex rows: parameter vectors are concatenations
/// of one unconstrained block per row, mapped to probabilities by a softmax
/// per block.
#[derive(Debug, Clone)]
pub struct RowLayout {
    rows: Vec<usize>,
    total: usize,
}

impl RowLayout {
    pub fn new(rows: Vec<usize>) -> Self {
        let total = rows.iter().sum();
        Self { rows, total }
    }

    /// One block spanning `n` cells (a single free distribution).
    pub fn single(n: usize) -> Self {
        Self::new(vec![n])
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Softmax per row; `out` must have length `total()`.
    pub fn embed_into(&self, params: &[f64], out: &mut [f64]) {
        let mut off = 0;
        for &len in &self.rows {
            let block = &params[off..off + len];
            let max = block.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &p) in out[off..off + len].iter_mut().zip(block) {
                let e = (p - max).exp();
                *o = e;
                sum += e;
            }
            for o in out[off..off + len].iter_mut() {
                *o /= sum;
            }
            off += len;
        }
    }

    pub fn embed(&self, params: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.total];
        self.embed_into(params, &mut out);
        out
    }

    /// Log-coordinates of a probability vector, floored away from zero so a
    /// distribution with hard zeros still yields a finite starting point.
    pub fn params_from_probs(&self, probs: &[f64], floor: f64) -> Vec<f64> {
        probs.iter().map(|&p| p.max(floor).ln()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DescentOptions {
    pub max_iters: usize,
    pub fd_step: f64,
    pub f_tol: f64,
    pub grad_tol: f64,
}

impl Default for DescentOptions {
    fn default() -> Self {
        Self { max_iters: 80, fd_step: 1e-6, f_tol: 1e-11, grad_tol: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct DescentResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iters: usize,
    pub evals: usize,
}

fn forward_gradient<F: Fn(&[f64]) -> f64>(
    f: &F,
    x: &mut Vec<f64>,
    fx: f64,
    h: f64,
    evals: &mut usize,
) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let keep = x[i];
        x[i] = keep + h;
        let fp = f(x);
        x[i] = keep;
        g[i] = (fp - fx) / h;
        *evals += 1;
    }
    g
}

/// Limited-memory quasi-Newton descent (L-BFGS two-loop recursion) with
/// Armijo backtracking and forward-difference gradients. Returns the best
/// iterate seen.
pub fn descend<F: Fn(&[f64]) -> f64>(f: F, x0: Vec<f64>, opts: &DescentOptions) -> DescentResult {
    const MEMORY: usize = 8;
    let mut x = x0;
    let mut fx = f(&x);
    let mut evals = 1usize;
    if !fx.is_finite() {
        return DescentResult { x, value: fx, iters: 0, evals };
    }
    let mut g = forward_gradient(&f, &mut x, fx, opts.fd_step, &mut evals);
    let mut history: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new(); // (s, y, 1/(s·y))
    let mut stall = 0usize;
    let mut iters = 0usize;
    for _ in 0..opts.max_iters {
        iters += 1;
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < opts.grad_tol {
            break;
        }
        // two-loop recursion for d = -H·g
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = vec![0.0; history.len()];
        for (i, (s, _, inv_sy)) in history.iter().enumerate().rev() {
            let a = inv_sy * s.iter().zip(&d).map(|(si, di)| si * di).sum::<f64>();
            alphas[i] = a;
            for (dj, yj) in d.iter_mut().zip(&history[i].1) {
                *dj -= a * yj;
            }
        }
        if let Some((s, y, _)) = history.last() {
            let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
            let yy: f64 = y.iter().map(|v| v * v).sum();
            if yy > 0.0 {
                let gamma = sy / yy;
                for dj in d.iter_mut() {
                    *dj *= gamma;
                }
            }
        } else {
            // first step: conservative scaling
            let scale = (1.0 / gnorm).min(1.0);
            for dj in d.iter_mut() {
                *dj *= scale;
            }
        }
        for (i, (s, y, inv_sy)) in history.iter().enumerate() {
            let b = inv_sy * y.iter().zip(&d).map(|(yi, di)| yi * di).sum::<f64>();
            let a = alphas[i];
            for (dj, sj) in d.iter_mut().zip(s) {
                *dj += (a - b) * sj;
            }
        }
        let mut slope: f64 = g.iter().zip(&d).map(|(gi, di)| gi * di).sum();
        if slope >= 0.0 {
            // not a descent direction: drop curvature info, take -g
            history.clear();
            let scale = (1.0 / gnorm).min(1.0);
            d = g.iter().map(|v| -v * scale).collect();
            slope = g.iter().zip(&d).map(|(gi, di)| gi * di).sum();
        }
        // Armijo backtracking, with greedy expansion when the unit step is
        // accepted outright (long shallow valleys need steps ≫ 1)
        let mut t = 1.0f64;
        let mut accepted = false;
        let mut x_new = x.clone();
        let mut f_new = fx;
        let mut tried_full = false;
        for _ in 0..40 {
            for (xn, (xi, di)) in x_new.iter_mut().zip(x.iter().zip(&d)) {
                *xn = xi + t * di;
            }
            f_new = f(&x_new);
            evals += 1;
            if f_new.is_finite() && f_new <= fx + 1e-4 * t * slope {
                accepted = true;
                break;
            }
            tried_full = true;
            t *= 0.5;
        }
        if !accepted {
            if history.is_empty() {
                break;
            }
            history.clear();
            continue;
        }
        if !tried_full {
            let mut best_t = t;
            let mut best_f = f_new;
            let mut grow = t;
            for _ in 0..30 {
                grow *= 2.0;
                let mut x_try = x.clone();
                for (xn, (xi, di)) in x_try.iter_mut().zip(x.iter().zip(&d)) {
                    *xn = xi + grow * di;
                }
                let f_try = f(&x_try);
                evals += 1;
                if f_try.is_finite() && f_try < best_f {
                    best_t = grow;
                    best_f = f_try;
                } else {
                    break;
                }
            }
            if best_t != t {
                t = best_t;
                f_new = best_f;
                for (xn, (xi, di)) in x_new.iter_mut().zip(x.iter().zip(&d)) {
                    *xn = xi + t * di;
                }
            }
        }
        let g_new = forward_gradient(&f, &mut x_new, f_new, opts.fd_step, &mut evals);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        if sy > 1e-12 * ss.sqrt() * yy.sqrt() && sy > 0.0 {
            if history.len() == MEMORY {
                history.remove(0);
            }
            history.push((s, y, 1.0 / sy));
        }
        let improved = fx - f_new;
        x = x_new;
        fx = f_new;
        g = g_new;
        if improved < opts.f_tol * fx.abs().max(1.0) {
            stall += 1;
            if stall >= 3 {
                break;
            }
        } else {
            stall = 0;
        }
    }
    DescentResult { x, value: fx, iters, evals }
}

#[derive(Debug, Clone)]
pub struct MultistartOptions {
    pub starts: usize,
    pub seed: u64,
    /// Standard deviation of the random initial log-coordinates.
    pub spread: f64,
    pub descent: DescentOptions,
}

impl Default for MultistartOptions {
    fn default() -> Self {
        Self { starts: 16, seed: 0, spread: 1.5, descent: DescentOptions::default() }
    }
}

#[derive(Debug, Clone)]
pub struct MultistartResult {
    pub x: Vec<f64>,
    pub value: f64,
    /// Best value per start (seeds first), for convergence diagnostics.
    pub start_values: Vec<f64>,
}

/// Runs `descend` from each provided seed and `opts.starts` random starts,
/// concurrently, reducing to the best in fixed index order.
pub fn multistart_minimize<F>(
    f: F,
    layout: &RowLayout,
    seeds: &[Vec<f64>],
    opts: &MultistartOptions,
) -> MultistartResult
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let dim = layout.total();
    let n = seeds.len() + opts.starts;
    let results: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x0 = if i < seeds.len() {
                seeds[i].clone()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    opts.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1)),
                );
                (0..dim).map(|_| (rng.gen::<f64>() - 0.5) * 2.0 * opts.spread).collect()
            };
            let r = descend(&f, x0, &opts.descent);
            (r.value, r.x)
        })
        .collect();
    let mut best = 0usize;
    for i in 1..results.len() {
        if results[i].0 < results[best].0 {
            best = i;
        }
    }
    MultistartResult {
        x: results[best].1.clone(),
        value: results[best].0,
        start_values: results.iter().map(|r| r.0).collect(),
    }
}

/// All points of the simplex `{w ≥ 0 : Σ w = 1}` with coordinates that are
/// multiples of `1/denom`, in lexicographic composition order.
pub fn simplex_grid(parts: usize, denom: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut current = vec![0usize; parts];
    fn rec(
        i: usize,
        remaining: usize,
        current: &mut Vec<usize>,
        denom: usize,
        out: &mut Vec<Vec<f64>>,
    ) {
        if i + 1 == current.len() {
            current[i] = remaining;
            out.push(current.iter().map(|&c| c as f64 / denom as f64).collect());
            return;
        }
        for c in 0..=remaining {
            current[i] = c;
            rec(i + 1, remaining - c, current, denom, out);
        }
    }
    rec(0, denom, &mut current, denom, &mut out);
    out
}

/// Local refinement candidates around a simplex point: all sum-zero
/// perturbations with entries in `{-step, 0, +step}` that stay non-negative.
pub fn simplex_neighbors(node: &[f64], step: f64) -> Vec<Vec<f64>> {
    let m = node.len();
    let mut out = Vec::new();
    let n_patterns = 3usize.pow(m as u32);
    'outer: for pat in 0..n_patterns {
        let mut delta = Vec::with_capacity(m);
        let mut rem = pat;
        let mut sum = 0i64;
        for _ in 0..m {
            let d = (rem % 3) as i64 - 1;
            rem /= 3;
            sum += d;
            delta.push(d);
        }
        if sum != 0 || delta.iter().all(|&d| d == 0) {
            continue;
        }
        let mut cand = Vec::with_capacity(m);
        for (i, &d) in delta.iter().enumerate() {
            let v = node[i] + d as f64 * step;
            if v < -1e-12 {
                continue 'outer;
            }
            cand.push(v.max(0.0));
        }
        out.push(cand);
    }
    out
}

/// `points` log-spaced values spanning `[min, max]`.
pub fn log_space(min: f64, max: f64, points: usize) -> Vec<f64> {
    assert!(min > 0.0 && max >= min && points >= 1);
    if points == 1 {
        return vec![max];
    }
    let (a, b) = (min.ln(), max.ln());
    (0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
        .collect()
}
