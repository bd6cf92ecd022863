//! The rate-distortion region through its supporting-hyperplane
//! characterization.
//!
//! For weights `(α^k, β^k)` on the simplex `Σ_j (α_j + β_j) = 1`, the
//! hyperplane value is
//!
//! ```text
//! R^(α,β) = min { α_1 I(X;W_1) + Σ_{j≥2} α_j I(X;W_j|W^{j−1}) + Σ_j β_j E[d_j(X,X̂_j)] }
//! ```
//!
//! minimized over test-channel chains `Q_{W_j|X,W^{j−1}}` and decoders
//! `X̂_j = φ_j(W^j, Y_j)`. A rate-distortion point lies in the region iff
//! `κ(R^k,D^k) ≥ R^(α,β)` for every weight vector; membership reports the
//! signed minimum of `κ − R^(α,β)` over a weight grid.
//!
//! The minimization over channels is nonconvex. Each evaluation solves the
//! decoder in closed form (the objective is linear in every decoder row, so
//! the per-cell argmin is optimal) and the channels are optimized by
//! multistart descent over softmax-embedded rows, with an optional
//! channel-grid certification pass for small instances.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{
    kappa, validate_weights, AuxiliarySystem, Decoder, RateDistortionPoint, SourceProblem,
};
use crate::opt::{
    multistart_minimize, simplex_grid, simplex_neighbors, DescentOptions, MultistartOptions,
    RowLayout,
};
use crate::prob::Pmf;
use crate::{Error, Result};

/// Cardinality cap schemes for the auxiliary alphabets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CapScheme {
    /// `|W_1| ≤ |X|+3`, `|W_j| ≤ |X|·Π_{l<j}|W_l| + 1` for `j ≥ 2`.
    PStar,
    /// `|W_j| ≤ |X|·Π_{l<j}|W_l| + 1` for every `j`.
    Chain,
    /// `|W_j| ≤ |X|^j`.
    PSh,
    /// Explicit per-stage caps.
    Custom(Vec<usize>),
}

impl CapScheme {
    pub fn caps(&self, problem: &SourceProblem) -> Result<Vec<usize>> {
        let k = problem.k();
        let x = problem.x_size();
        let caps = match self {
            CapScheme::PStar => {
                let mut caps = Vec::with_capacity(k);
                let mut prod = 1usize;
                for j in 0..k {
                    let c = if j == 0 { x + 3 } else { x * prod + 1 };
                    caps.push(c);
                    prod *= c;
                }
                caps
            }
            CapScheme::Chain => {
                let mut caps = Vec::with_capacity(k);
                let mut prod = 1usize;
                for _ in 0..k {
                    let c = x * prod + 1;
                    caps.push(c);
                    prod *= c;
                }
                caps
            }
            CapScheme::PSh => problem.psh_w_caps(),
            CapScheme::Custom(c) => {
                if c.len() != k {
                    return Err(Error::Input(format!("expected {k} custom caps")));
                }
                if c.iter().any(|&v| v == 0) {
                    return Err(Error::Input("caps must be ≥ 1".into()));
                }
                c.clone()
            }
        };
        Ok(caps)
    }
}

#[derive(Debug, Clone)]
pub struct RegionOptions {
    pub cap_scheme: CapScheme,
    pub multistarts: usize,
    /// Weight-grid step is `1/grid_denom` per simplex coordinate.
    pub grid_denom: usize,
    pub refine_rounds: usize,
    /// `|margin| ≤ boundary_band` reports boundary-indeterminate.
    pub boundary_band: f64,
    pub seed: u64,
    pub descent: DescentOptions,
    /// Node budget for the channel-grid certification pass; 0 disables it.
    pub channel_grid_budget: usize,
}

impl Default for RegionOptions {
    fn default() -> Self {
        Self {
            cap_scheme: CapScheme::PStar,
            multistarts: 16,
            grid_denom: 8,
            refine_rounds: 2,
            boundary_band: 1e-3,
            seed: 0,
            descent: DescentOptions::default(),
            channel_grid_budget: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverStatus {
    Converged,
    GridCertified,
    MultistartBest,
}

/// One supporting hyperplane: the weights, the optimized value, and the
/// system achieving it.
#[derive(Debug, Clone)]
pub struct HyperplaneValue {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub value: f64,
    pub argmin: AuxiliarySystem,
    pub status: SolverStatus,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Inside,
    Outside,
    BoundaryIndeterminate,
}

/// Outcome of a region membership query.
#[derive(Debug, Clone)]
pub struct MembershipReport {
    pub point: RateDistortionPoint,
    pub verdict: Verdict,
    /// `min over weights of (κ − R^(α,β))`; negative means outside.
    pub margin: f64,
    pub witness_alpha: Vec<f64>,
    pub witness_beta: Vec<f64>,
    pub nodes_evaluated: usize,
}

/// Per-user marginals `P(y_j | x)`.
fn py_per_user(problem: &SourceProblem) -> Vec<Vec<Vec<f64>>> {
    let k = problem.k();
    let y_sizes = problem.y_sizes();
    let mut out = vec![Vec::new(); k];
    for (j, &yj) in y_sizes.iter().enumerate() {
        let mut table = vec![vec![0.0; yj]; problem.x_size()];
        let tail: usize = y_sizes[j + 1..].iter().product();
        let block: usize = yj * tail;
        for (x, row) in problem.p_y_given_x().iter().enumerate() {
            for (yflat, &p) in row.iter().enumerate() {
                table[x][(yflat % block) / tail] += p;
            }
        }
        out[j] = table;
    }
    out
}

/// The chained-channel objective with the decoder step in closed form.
/// Returns the weighted value, per-user information and distortion terms,
/// and the optimal deterministic decoder tables.
struct ChainEval {
    value: f64,
    info: Vec<f64>,
    decoders: Vec<Vec<usize>>,
}

struct ChainObjective<'a> {
    problem: &'a SourceProblem,
    caps: Vec<usize>,
    py: Vec<Vec<Vec<f64>>>,
    layout: RowLayout,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl<'a> ChainObjective<'a> {
    fn new(problem: &'a SourceProblem, caps: Vec<usize>, alpha: &[f64], beta: &[f64]) -> Self {
        let mut rows = Vec::new();
        let mut prefix = 1usize;
        for &c in &caps {
            for _ in 0..problem.x_size() * prefix {
                rows.push(c);
            }
            prefix *= c;
        }
        Self {
            problem,
            caps,
            py: py_per_user(problem),
            layout: RowLayout::new(rows),
            alpha: alpha.to_vec(),
            beta: beta.to_vec(),
        }
    }

    /// `probs` is the concatenated channel rows in layout order.
    fn eval(&self, probs: &[f64]) -> ChainEval {
        let k = self.problem.k();
        let nx = self.problem.x_size();
        let px = self.problem.px();
        let mut info = vec![0.0; k];
        let mut dist = vec![0.0; k];
        let mut decoders = Vec::with_capacity(k);
        // t_prev[x * prefix_card + p] = Q(x, w^{j-1} = p)
        let mut t_prev: Vec<f64> = (0..nx).map(|x| px.get(x)).collect();
        let mut prefix_card = 1usize;
        let mut off = 0usize;
        for j in 0..k {
            let cj = self.caps[j];
            let rows = nx * prefix_card;
            let new_card = prefix_card * cj;
            let mut t = vec![0.0; nx * new_card];
            for x in 0..nx {
                for p in 0..prefix_card {
                    let base = t_prev[x * prefix_card + p];
                    let row = &probs[off + (x * prefix_card + p) * cj..][..cj];
                    for (w, &c) in row.iter().enumerate() {
                        t[x * new_card + p * cj + w] = base * c;
                    }
                }
            }
            off += rows * cj;
            // I(X; W_j | W^{j-1}) from t vs t_prev
            let mut m_new = vec![0.0; new_card];
            let mut m_prev = vec![0.0; prefix_card];
            for x in 0..nx {
                for pw in 0..new_card {
                    m_new[pw] += t[x * new_card + pw];
                }
                for p in 0..prefix_card {
                    m_prev[p] += t_prev[x * prefix_card + p];
                }
            }
            let mut ij = 0.0;
            for x in 0..nx {
                for pw in 0..new_card {
                    let v = t[x * new_card + pw];
                    if v > 0.0 {
                        let p = pw / cj;
                        ij += v
                            * (v * m_prev[p] / (t_prev[x * prefix_card + p] * m_new[pw])).ln();
                    }
                }
            }
            info[j] = ij.max(0.0);
            // closed-form decoder over (w^j, y_j) cells
            let yj = self.problem.y_sizes()[j];
            let nxh = self.problem.xhat_sizes()[j];
            let d = self.problem.distortion(j);
            let mut table = vec![0usize; new_card * yj];
            let mut ed = 0.0;
            for pw in 0..new_card {
                for y in 0..yj {
                    let mut best = f64::INFINITY;
                    let mut best_xh = 0usize;
                    for xh in 0..nxh {
                        let mut acc = 0.0;
                        for x in 0..nx {
                            acc += t[x * new_card + pw] * self.py[j][x][y] * d[x][xh];
                        }
                        if acc < best {
                            best = acc;
                            best_xh = xh;
                        }
                    }
                    table[pw * yj + y] = best_xh;
                    ed += best;
                }
            }
            dist[j] = ed;
            decoders.push(table);
            t_prev = t;
            prefix_card = new_card;
        }
        let value = (0..k)
            .map(|j| self.alpha[j] * info[j] + self.beta[j] * dist[j])
            .sum();
        ChainEval { value, info, decoders }
    }

    fn value_of_params(&self, params: &[f64]) -> f64 {
        let probs = self.layout.embed(params);
        self.eval(&probs).value
    }

    fn aux_from_probs(&self, probs: &[f64], decoders: Vec<Vec<usize>>) -> AuxiliarySystem {
        let k = self.problem.k();
        let nx = self.problem.x_size();
        let mut channels = Vec::with_capacity(k);
        let mut prefix = 1usize;
        let mut off = 0usize;
        for j in 0..k {
            let cj = self.caps[j];
            let rows = nx * prefix;
            let mut ch = Vec::with_capacity(rows);
            for r in 0..rows {
                ch.push(probs[off + r * cj..][..cj].to_vec());
            }
            off += rows * cj;
            prefix *= cj;
            channels.push(ch);
        }
        AuxiliarySystem {
            w_sizes: self.caps.clone(),
            channels,
            decoders: decoders.into_iter().map(Decoder::Deterministic).collect(),
        }
    }

    /// Structured starting points: uniform channels and near-deterministic
    /// "copy x" channels.
    fn seeds(&self) -> Vec<Vec<f64>> {
        let uniform = vec![0.0; self.layout.total()];
        let mut copy = Vec::with_capacity(self.layout.total());
        let nx = self.problem.x_size();
        let mut prefix = 1usize;
        for &cj in &self.caps {
            for row in 0..nx * prefix {
                let x = row / prefix;
                for w in 0..cj {
                    let p = if w == x % cj { 0.95 } else { 0.05 / (cj.max(2) - 1) as f64 };
                    copy.push(p.ln());
                }
            }
            prefix *= cj;
        }
        vec![uniform, copy]
    }
}

/// Evaluates the weighted objective of a *given* auxiliary system (its own
/// decoders, not re-optimized).
pub fn weighted_objective(
    problem: &SourceProblem,
    aux: &AuxiliarySystem,
    alpha: &[f64],
    beta: &[f64],
) -> Result<f64> {
    validate_weights(alpha, beta, problem.k())?;
    aux.validate(problem)?;
    let obj = ChainObjective::new(problem, aux.w_sizes.clone(), alpha, beta);
    let mut probs = Vec::with_capacity(obj.layout.total());
    for ch in &aux.channels {
        for row in ch {
            probs.extend_from_slice(row);
        }
    }
    // information terms from the closed-form eval, distortion from the
    // system's own decoders
    let eval = obj.eval(&probs);
    let py = py_per_user(problem);
    let mut value: f64 = (0..problem.k()).map(|j| alpha[j] * eval.info[j]).sum();
    let nx = problem.x_size();
    for j in 0..problem.k() {
        if beta[j] == 0.0 {
            continue;
        }
        let mut card = 1usize;
        for l in 0..=j {
            card *= aux.w_sizes[l];
        }
        let yj = problem.y_sizes()[j];
        let d = problem.distortion(j);
        let nxh = problem.xhat_sizes()[j];
        // Q(x, w^{≤j}) by chaining
        let mut t: Vec<f64> = vec![0.0; nx * card];
        for x in 0..nx {
            for pw in 0..card {
                let mut w = Vec::with_capacity(j + 1);
                let mut rem = pw;
                for l in (0..=j).rev() {
                    w.push(rem % aux.w_sizes[l]);
                    rem /= aux.w_sizes[l];
                }
                w.reverse();
                let mut p = problem.px().get(x);
                let mut prefix = 0usize;
                let mut prefix_card = 1usize;
                for (l, &wl) in w.iter().enumerate() {
                    p *= aux.channels[l][x * prefix_card + prefix][wl];
                    prefix = prefix * aux.w_sizes[l] + wl;
                    prefix_card *= aux.w_sizes[l];
                }
                t[x * card + pw] = p;
            }
        }
        let mut ed = 0.0;
        for pw in 0..card {
            for y in 0..yj {
                for x in 0..nx {
                    let q = t[x * card + pw] * py[j][x][y];
                    if q == 0.0 {
                        continue;
                    }
                    for xh in 0..nxh {
                        ed += q * aux.decoders[j].prob(pw * yj + y, xh) * d[x][xh];
                    }
                }
            }
        }
        value += beta[j] * ed;
    }
    Ok(value)
}

fn count_channel_grid(nodes_per_row: &[usize]) -> f64 {
    nodes_per_row.iter().map(|&n| n as f64).product()
}

/// Minimizes the supporting-hyperplane objective at fixed weights.
pub fn hyperplane_value(
    problem: &SourceProblem,
    alpha: &[f64],
    beta: &[f64],
    opts: &RegionOptions,
) -> Result<HyperplaneValue> {
    let mut analyzer = RegionAnalyzer::new(problem.clone(), opts.clone());
    analyzer.hyperplane(alpha, beta)
}

/// Region membership of a rate-distortion point via a weight-grid sweep.
pub fn membership(
    problem: &SourceProblem,
    point: &RateDistortionPoint,
    opts: &RegionOptions,
) -> Result<MembershipReport> {
    let mut analyzer = RegionAnalyzer::new(problem.clone(), opts.clone());
    analyzer.membership(point)
}

/// Exact rational weight node: numerators over a common denominator.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct NodeKey {
    num: Vec<u64>,
    den: u64,
}

impl NodeKey {
    fn new(num: Vec<u64>, den: u64) -> Self {
        let mut g = den;
        for &n in &num {
            g = gcd(g, n);
        }
        if g > 1 {
            return Self { num: num.iter().map(|n| n / g).collect(), den: den / g };
        }
        Self { num, den }
    }

    fn weights(&self, k: usize) -> (Vec<f64>, Vec<f64>) {
        let f: Vec<f64> = self.num.iter().map(|&n| n as f64 / self.den as f64).collect();
        (f[..k].to_vec(), f[k..].to_vec())
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Solves hyperplane values with a per-weight-node cache, so membership
/// sweeps and boundary bisections do not repeat work.
pub struct RegionAnalyzer {
    problem: SourceProblem,
    opts: RegionOptions,
    cache: HashMap<NodeKey, (f64, AuxiliarySystem, SolverStatus)>,
    warm_params: Option<Vec<f64>>,
}

impl RegionAnalyzer {
    pub fn new(problem: SourceProblem, opts: RegionOptions) -> Self {
        Self { problem, opts, cache: HashMap::new(), warm_params: None }
    }

    pub fn problem(&self) -> &SourceProblem {
        &self.problem
    }

    /// Hyperplane value at arbitrary weights (not cached).
    pub fn hyperplane(&mut self, alpha: &[f64], beta: &[f64]) -> Result<HyperplaneValue> {
        validate_weights(alpha, beta, self.problem.k())?;
        let caps = self.opts.cap_scheme.caps(&self.problem)?;
        let obj = ChainObjective::new(&self.problem, caps, alpha, beta);
        let mut seeds = obj.seeds();
        if let Some(w) = &self.warm_params {
            if w.len() == obj.layout.total() {
                seeds.push(w.clone());
            }
        }
        let ms_opts = MultistartOptions {
            starts: self.opts.multistarts,
            seed: self.opts.seed,
            spread: 2.0,
            descent: self.opts.descent.clone(),
        };
        let f = |params: &[f64]| obj.value_of_params(params);
        let result = multistart_minimize(&f, &obj.layout, &seeds, &ms_opts);
        let mut best_params = result.x.clone();
        let mut best_value = result.value;
        let mut status = {
            let near = result
                .start_values
                .iter()
                .filter(|v| (*v - best_value).abs() < 1e-7)
                .count();
            if near >= 2 {
                SolverStatus::Converged
            } else {
                SolverStatus::MultistartBest
            }
        };
        // channel-grid certification for small instances
        if self.opts.channel_grid_budget > 0 {
            if let Some((gp, gv)) = self.grid_scan(&obj) {
                if gv < best_value - 1e-12 {
                    let polished = crate::opt::descend(&f, gp, &self.opts.descent);
                    if polished.value < best_value {
                        best_value = polished.value;
                        best_params = polished.x;
                    }
                }
                status = SolverStatus::GridCertified;
            }
        }
        self.warm_params = Some(best_params.clone());
        let probs = obj.layout.embed(&best_params);
        let eval = obj.eval(&probs);
        let aux = obj.aux_from_probs(&probs, eval.decoders);
        let warning = if status == SolverStatus::MultistartBest {
            Some("best of multistart descents; not certified".to_string())
        } else {
            None
        };
        Ok(HyperplaneValue {
            alpha: alpha.to_vec(),
            beta: beta.to_vec(),
            value: best_value,
            argmin: aux,
            status,
            warning,
        })
    }

    /// Systematic scan over per-row channel simplex grids within the node
    /// budget. Returns the best node's parameters and value.
    fn grid_scan(&self, obj: &ChainObjective) -> Option<(Vec<f64>, f64)> {
        let rows = obj.layout.rows().to_vec();
        // choose the largest per-row resolution fitting the budget
        let mut reso = 0usize;
        for r in (1..=16usize).rev() {
            let per_row: Vec<usize> = rows
                .iter()
                .map(|&len| simplex_grid_len(len, r))
                .collect();
            if count_channel_grid(&per_row) <= self.opts.channel_grid_budget as f64 {
                reso = r;
                break;
            }
        }
        if reso == 0 {
            return None;
        }
        let row_grids: Vec<Vec<Vec<f64>>> =
            rows.iter().map(|&len| simplex_grid(len, reso)).collect();
        let sizes: Vec<usize> = row_grids.iter().map(|g| g.len()).collect();
        let total: usize = sizes.iter().product();
        let results: Vec<(usize, f64)> = (0..total)
            .into_par_iter()
            .map(|mut idx| {
                let mut probs = Vec::with_capacity(obj.layout.total());
                for (g, &s) in row_grids.iter().zip(&sizes) {
                    let pick = idx % s;
                    idx /= s;
                    probs.extend_from_slice(&g[pick]);
                }
                (0, obj.eval(&probs).value)
            })
            .enumerate()
            .map(|(i, (_, v))| (i, v))
            .collect();
        let (mut best_i, mut best_v) = (0usize, f64::INFINITY);
        for &(i, v) in &results {
            if v < best_v {
                best_v = v;
                best_i = i;
            }
        }
        // rebuild the winning node's probabilities, floored into log-coords
        let mut probs = Vec::with_capacity(obj.layout.total());
        let mut idx = best_i;
        for (g, &s) in row_grids.iter().zip(&sizes) {
            let pick = idx % s;
            idx /= s;
            probs.extend_from_slice(&g[pick]);
        }
        let params = obj.layout.params_from_probs(&probs, 1e-9);
        Some((params, best_v))
    }

    fn node_value(&mut self, key: &NodeKey) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let k = self.problem.k();
        let (alpha, beta) = key.weights(k);
        if let Some((v, _, _)) = self.cache.get(key) {
            return Ok((*v, alpha, beta));
        }
        let hv = self.hyperplane(&alpha, &beta)?;
        self.cache
            .insert(key.clone(), (hv.value, hv.argmin, hv.status));
        Ok((hv.value, alpha, beta))
    }

    /// The cached argmin system at exact rational weights, if present.
    pub fn cached_argmin(&self, num: Vec<u64>, den: u64) -> Option<&AuxiliarySystem> {
        self.cache.get(&NodeKey::new(num, den)).map(|(_, a, _)| a)
    }

    pub fn membership(&mut self, point: &RateDistortionPoint) -> Result<MembershipReport> {
        if point.k() != self.problem.k() {
            return Err(Error::Input(format!(
                "point has {} users, problem has {}",
                point.k(),
                self.problem.k()
            )));
        }
        if self.opts.grid_denom < 2 {
            return Err(Error::Input("grid resolution must be at least 2".into()));
        }
        let k = self.problem.k();
        let den = self.opts.grid_denom as u64;
        let mut frontier: Vec<NodeKey> = simplex_grid(2 * k, self.opts.grid_denom)
            .into_iter()
            .map(|node| {
                NodeKey::new(
                    node.iter().map(|&f| (f * den as f64).round() as u64).collect(),
                    den,
                )
            })
            .collect();
        let mut seen: std::collections::HashSet<NodeKey> = frontier.iter().cloned().collect();
        let mut best: Option<(f64, NodeKey)> = None;
        let mut evaluated = 0usize;
        let mut step_den = den;
        for round in 0..=self.opts.refine_rounds {
            for key in &frontier {
                let (value, alpha, beta) = self.node_value(key)?;
                let margin = kappa(point, &alpha, &beta)? - value;
                evaluated += 1;
                if best.as_ref().map(|(m, _)| margin < *m).unwrap_or(true) {
                    best = Some((margin, key.clone()));
                }
            }
            if round == self.opts.refine_rounds {
                break;
            }
            // refine by a factor 2 around the current minimizing node
            step_den *= 2;
            let (_, at) = best.clone().expect("grid is non-empty");
            let scale = step_den / at.den;
            let center: Vec<f64> =
                at.num.iter().map(|&n| (n * scale) as f64 / step_den as f64).collect();
            frontier = simplex_neighbors(&center, 1.0 / step_den as f64)
                .into_iter()
                .map(|node| {
                    NodeKey::new(
                        node.iter()
                            .map(|&f| (f * step_den as f64).round() as u64)
                            .collect(),
                        step_den,
                    )
                })
                .filter(|key| seen.insert(key.clone()))
                .collect();
        }
        let (margin, witness) = best.expect("grid is non-empty");
        let (wa, wb) = witness.weights(k);
        let verdict = if margin > self.opts.boundary_band {
            Verdict::Inside
        } else if margin < -self.opts.boundary_band {
            Verdict::Outside
        } else {
            Verdict::BoundaryIndeterminate
        };
        Ok(MembershipReport {
            point: point.clone(),
            verdict,
            margin,
            witness_alpha: wa,
            witness_beta: wb,
            nodes_evaluated: evaluated,
        })
    }

    /// Bisects the rate at fixed distortion until the membership margin
    /// changes sign; returns the boundary rate for user 1 of a single-user
    /// problem.
    pub fn boundary_rate(&mut self, d: f64, r_hi: f64, tol: f64) -> Result<f64> {
        if self.problem.k() != 1 {
            return Err(Error::Input("boundary bisection is for k = 1".into()));
        }
        let margin_at = |s: &mut Self, r: f64| -> Result<f64> {
            let point = RateDistortionPoint::new(vec![r], vec![d])?;
            Ok(s.membership(&point)?.margin)
        };
        let mut lo = 0.0f64;
        let mut hi = r_hi;
        if margin_at(self, lo)? >= 0.0 {
            return Ok(0.0);
        }
        if margin_at(self, hi)? < 0.0 {
            return Err(Error::Input(format!("no boundary below rate {r_hi}")));
        }
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if margin_at(self, mid)? < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

fn simplex_grid_len(parts: usize, denom: usize) -> usize {
    // C(denom + parts - 1, parts - 1)
    let mut num = 1f64;
    for i in 0..parts - 1 {
        num *= (denom + parts - 1 - i) as f64 / (i + 1) as f64;
    }
    num.round() as usize
}

/// Iterator over all deterministic decoder tables `(W^j, Y_j) → X̂_j`.
pub struct DecoderEnumerator {
    cells: usize,
    range: usize,
    next: Option<Vec<usize>>,
}

impl Iterator for DecoderEnumerator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let current = self.next.clone()?;
        // odometer increment
        let mut nxt = current.clone();
        let mut i = self.cells;
        loop {
            if i == 0 {
                self.next = None;
                break;
            }
            i -= 1;
            nxt[i] += 1;
            if nxt[i] < self.range {
                self.next = Some(nxt);
                break;
            }
            nxt[i] = 0;
        }
        Some(current)
    }
}

/// Enumerates every deterministic decoder for user `j` (0-based) with the
/// given auxiliary alphabet sizes, within an enumeration budget.
pub fn enumerate_decoders(
    problem: &SourceProblem,
    w_sizes: &[usize],
    j: usize,
    budget: u64,
) -> Result<DecoderEnumerator> {
    if j >= problem.k() || w_sizes.len() != problem.k() {
        return Err(Error::Input("user index or auxiliary sizes out of range".into()));
    }
    let cells: usize = w_sizes[..=j].iter().product::<usize>() * problem.y_sizes()[j];
    let range = problem.xhat_sizes()[j];
    let count = (range as f64).powi(cells as i32);
    if !(count <= budget as f64) {
        return Err(Error::Budget(format!(
            "{count:.3e} decoder tables exceed the budget of {budget}; \
             use the stochastic-decoder optimizer instead"
        )));
    }
    Ok(DecoderEnumerator { cells, range, next: Some(vec![0; cells]) })
}

/// Classical Blahut–Arimoto rate-distortion function `R(D)` in nats for a
/// single source pmf and distortion matrix. Independent of the region
/// machinery; used as a validation oracle for the `k = 1` specialization.
pub fn ba_reference(px: &Pmf, distortion: &[Vec<f64>], d: f64) -> Result<f64> {
    let nx = px.len();
    if distortion.len() != nx {
        return Err(Error::Input("distortion rows must match the source alphabet".into()));
    }
    let nxh = distortion[0].len();
    let dbar = distortion
        .iter()
        .flat_map(|r| r.iter())
        .cloned()
        .fold(0.0f64, f64::max);
    if !(0.0..=dbar).contains(&d) {
        return Err(Error::Input(format!("distortion level {d} outside [0, {dbar}]")));
    }
    // zero-rate distortion: best constant reproduction
    let d_max = (0..nxh)
        .map(|xh| (0..nx).map(|x| px.get(x) * distortion[x][xh]).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    if d >= d_max - 1e-15 {
        return Ok(0.0);
    }
    // Lagrangian sweep: for slope s ≥ 0 the BA iteration converges to the
    // point of the R(D) curve with D(s) non-increasing in s; bisect on s.
    let solve = |s: f64| -> Result<(f64, f64)> {
        let mut q = vec![1.0 / nxh as f64; nxh];
        let mut prev_r = f64::INFINITY;
        for _ in 0..50_000 {
            let mut q_next = vec![0.0; nxh];
            let mut rate = 0.0;
            let mut dist = 0.0;
            for x in 0..nx {
                let mut z = 0.0;
                for xh in 0..nxh {
                    z += q[xh] * (-s * distortion[x][xh]).exp();
                }
                for xh in 0..nxh {
                    let w = q[xh] * (-s * distortion[x][xh]).exp() / z;
                    q_next[xh] += px.get(x) * w;
                    if w > 0.0 && q[xh] > 0.0 {
                        rate += px.get(x) * w * (w / q[xh]).ln();
                    }
                    dist += px.get(x) * w * distortion[x][xh];
                }
            }
            q = q_next;
            if (rate - prev_r).abs() < 1e-9 {
                return Ok((rate.max(0.0), dist));
            }
            prev_r = rate;
        }
        Err(Error::NoConvergence(format!(
            "Blahut–Arimoto did not converge at slope {s}; last rate {prev_r}"
        )))
    };
    let mut lo = 0.0f64;
    let mut hi = 700.0f64;
    let (_, d_hi) = solve(hi)?;
    if d <= d_hi {
        let (r, _) = solve(hi)?;
        return Ok(r);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (_, dist) = solve(mid)?;
        if dist > d {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    let (r, _) = solve(0.5 * (lo + hi))?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::load_problem;
    use crate::prob::binary_entropy;

    fn bern03_nosi() -> SourceProblem {
        // X ~ Bern(0.3) (P(X=1)=0.3), Y independent uniform, Hamming
        let text = serde_json::json!({
            "k": 1,
            "alphabets": {"x": 2, "y": [2], "xhat": [2]},
            "joint": [[0.35, 0.35], [0.15, 0.15]],
            "distortion": [[[0.0, 1.0], [1.0, 0.0]]]
        })
        .to_string();
        load_problem(&text).unwrap()
    }

    fn bern03_bsc01() -> SourceProblem {
        // X ~ Bern(0.3), Y = X through a BSC(0.1), Hamming
        let text = serde_json::json!({
            "k": 1,
            "alphabets": {"x": 2, "y": [2], "xhat": [2]},
            "joint": [[0.63, 0.07], [0.03, 0.27]],
            "distortion": [[[0.0, 1.0], [1.0, 0.0]]]
        })
        .to_string();
        load_problem(&text).unwrap()
    }

    fn fast_opts() -> RegionOptions {
        RegionOptions {
            cap_scheme: CapScheme::PSh,
            multistarts: 6,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn caps_schemes() {
        let p = bern03_nosi();
        assert_eq!(CapScheme::PStar.caps(&p).unwrap(), vec![5]);
        assert_eq!(CapScheme::Chain.caps(&p).unwrap(), vec![3]);
        assert_eq!(CapScheme::PSh.caps(&p).unwrap(), vec![2]);
    }

    #[test]
    fn enumerate_decoder_counts() {
        let p = bern03_nosi();
        // |W| = 1: domain cells = |Y| = 2, range 2 -> 4 decoders
        let tables: Vec<_> = enumerate_decoders(&p, &[1], 0, 1 << 20).unwrap().collect();
        assert_eq!(tables.len(), 4);
        assert_eq!(
            tables.iter().collect::<std::collections::BTreeSet<_>>().len(),
            4
        );
        // singleton output alphabet -> exactly one decoder
        let text = serde_json::json!({
            "k": 1,
            "alphabets": {"x": 2, "y": [2], "xhat": [1]},
            "joint": [[0.35, 0.35], [0.15, 0.15]],
            "distortion": [[[0.5], [0.0]]]
        })
        .to_string();
        let p1 = load_problem(&text).unwrap();
        assert_eq!(enumerate_decoders(&p1, &[1], 0, 1 << 20).unwrap().count(), 1);
        // 2x2 domain with 3 outputs -> 81 distinct decoders
        let text3 = serde_json::json!({
            "k": 1,
            "alphabets": {"x": 2, "y": [2], "xhat": [3]},
            "joint": [[0.35, 0.35], [0.15, 0.15]],
            "distortion": [[[0.0, 1.0, 0.5], [1.0, 0.0, 0.5]]]
        })
        .to_string();
        let p3 = load_problem(&text3).unwrap();
        let all: Vec<_> = enumerate_decoders(&p3, &[2], 0, 1 << 20).unwrap().collect();
        assert_eq!(all.len(), 81);
        assert_eq!(all.iter().collect::<std::collections::BTreeSet<_>>().len(), 81);
        assert!(matches!(
            enumerate_decoders(&p3, &[2], 0, 10),
            Err(Error::Budget(_))
        ));
    }

    #[test]
    fn hyperplane_pure_rate_weight_is_zero() {
        let p = bern03_nosi();
        let hv = hyperplane_value(&p, &[1.0], &[0.0], &fast_opts()).unwrap();
        assert!(hv.value.abs() < 1e-9, "value {}", hv.value);
    }

    #[test]
    fn hyperplane_pure_distortion_weight_is_zero_for_hamming() {
        // with information free, W may carry X itself and Hamming reaches 0
        let p = bern03_bsc01();
        let hv = hyperplane_value(&p, &[0.0], &[1.0], &fast_opts()).unwrap();
        assert!(hv.value < 1e-6, "value {}", hv.value);
    }

    #[test]
    fn hyperplane_capped_w1_matches_zero_rate_causal_estimate() {
        // under a |W| = 1 cap the decoder sees only y, so the pure-distortion
        // value is the zero-rate causal estimate min over maps xh(y)
        let p = bern03_bsc01();
        let opts = RegionOptions {
            cap_scheme: CapScheme::Custom(vec![1]),
            multistarts: 2,
            seed: 3,
            ..Default::default()
        };
        let hv = hyperplane_value(&p, &[0.0], &[1.0], &opts).unwrap();
        // exhaustive map search oracle
        let py = py_per_user(&p);
        let mut best = f64::INFINITY;
        for m0 in 0..2usize {
            for m1 in 0..2usize {
                let mut ed = 0.0;
                for x in 0..2 {
                    for y in 0..2 {
                        let xh = if y == 0 { m0 } else { m1 };
                        ed += p.px().get(x) * py[0][x][y] * p.distortion(0)[x][xh];
                    }
                }
                best = best.min(ed);
            }
        }
        assert!((hv.value - best).abs() < 1e-9, "{} vs {best}", hv.value);
    }

    #[test]
    fn hyperplane_matches_scalarized_ba() {
        // equal weights, independent side info: value = min_D (R(D) + D)/2
        let p = bern03_nosi();
        let hv = hyperplane_value(&p, &[0.5], &[0.5], &fast_opts()).unwrap();
        let px = p.px().clone();
        let mut oracle = f64::INFINITY;
        let mut d: f64 = 0.0;
        while d <= 0.31 {
            let r = ba_reference(&px, p.distortion(0), d.min(0.3)).unwrap();
            oracle = oracle.min(0.5 * r + 0.5 * d);
            d += 1e-3;
        }
        assert!((hv.value - oracle).abs() < 5e-4, "{} vs {oracle}", hv.value);
    }

    #[test]
    fn hyperplane_reevaluates_at_argmin() {
        let p = bern03_bsc01();
        let hv = hyperplane_value(&p, &[0.5], &[0.5], &fast_opts()).unwrap();
        let v = weighted_objective(&p, &hv.argmin, &[0.5], &[0.5]).unwrap();
        assert!((v - hv.value).abs() < 1e-9, "{} vs {}", v, hv.value);
    }

    #[test]
    fn hyperplane_grid_certification_agrees() {
        let p = bern03_nosi();
        let mut opts = fast_opts();
        let base = hyperplane_value(&p, &[0.5], &[0.5], &opts).unwrap();
        opts.channel_grid_budget = 4096;
        let certified = hyperplane_value(&p, &[0.5], &[0.5], &opts).unwrap();
        assert_eq!(certified.status, SolverStatus::GridCertified);
        assert!((certified.value - base.value).abs() < 1e-6);
    }

    #[test]
    fn closed_form_decoder_matches_enumeration() {
        // replacing the closed-form decoder with exhaustive enumeration
        // changes nothing: fix the argmin channels, enumerate decoders
        let p = bern03_bsc01();
        let hv = hyperplane_value(&p, &[0.5], &[0.5], &fast_opts()).unwrap();
        let mut best = f64::INFINITY;
        for table in enumerate_decoders(&p, &hv.argmin.w_sizes, 0, 1 << 20).unwrap() {
            let mut aux = hv.argmin.clone();
            aux.decoders = vec![Decoder::Deterministic(table)];
            let v = weighted_objective(&p, &aux, &[0.5], &[0.5]).unwrap();
            best = best.min(v);
        }
        assert!((best - hv.value).abs() < 1e-9, "{best} vs {}", hv.value);
    }

    #[test]
    fn membership_trivial_inside_and_outside() {
        let p = bern03_bsc01();
        let opts = fast_opts();
        let inside = RateDistortionPoint::new(vec![2f64.ln()], vec![1.0]).unwrap();
        let r = membership(&p, &inside, &opts).unwrap();
        assert_eq!(r.verdict, Verdict::Inside);
        let outside = RateDistortionPoint::new(vec![0.0], vec![0.0]).unwrap();
        let r = membership(&p, &outside, &opts).unwrap();
        assert_eq!(r.verdict, Verdict::Outside);
        assert!(r.margin < 0.0);
    }

    #[test]
    fn membership_straddles_ba_boundary() {
        let p = bern03_nosi();
        let opts = fast_opts();
        let r_star = binary_entropy(0.3) - binary_entropy(0.1);
        let out = RateDistortionPoint::new(vec![r_star - 0.05], vec![0.1]).unwrap();
        let rep = membership(&p, &out, &opts).unwrap();
        assert_eq!(rep.verdict, Verdict::Outside, "margin {}", rep.margin);
        let inn = RateDistortionPoint::new(vec![r_star + 0.05], vec![0.1]).unwrap();
        let rep = membership(&p, &inn, &opts).unwrap();
        assert_eq!(rep.verdict, Verdict::Inside, "margin {}", rep.margin);
    }

    #[test]
    fn membership_monotone_in_resources() {
        let p = bern03_bsc01();
        let opts = fast_opts();
        let base = RateDistortionPoint::new(vec![0.15], vec![0.12]).unwrap();
        let verdict_base = membership(&p, &base, &opts).unwrap().verdict;
        if verdict_base == Verdict::Inside {
            let bigger = RateDistortionPoint::new(vec![0.3], vec![0.2]).unwrap();
            assert_eq!(membership(&p, &bigger, &opts).unwrap().verdict, Verdict::Inside);
        }
        // enlarging resources never flips inside -> outside
        let inside = RateDistortionPoint::new(vec![0.5], vec![0.25]).unwrap();
        assert_eq!(membership(&p, &inside, &opts).unwrap().verdict, Verdict::Inside);
        let larger = RateDistortionPoint::new(vec![0.6], vec![0.3]).unwrap();
        assert_eq!(membership(&p, &larger, &opts).unwrap().verdict, Verdict::Inside);
    }

    #[test]
    fn hyperplane_midpoint_concavity_in_weights() {
        let p = bern03_bsc01();
        let opts = fast_opts();
        let a = hyperplane_value(&p, &[0.25], &[0.75], &opts).unwrap().value;
        let b = hyperplane_value(&p, &[0.75], &[0.25], &opts).unwrap().value;
        let mid = hyperplane_value(&p, &[0.5], &[0.5], &opts).unwrap().value;
        assert!(mid >= 0.5 * a + 0.5 * b - 1e-9, "mid {mid} vs {}", 0.5 * a + 0.5 * b);
    }

    #[test]
    fn ba_reference_known_values() {
        let bern05 = Pmf::new(vec![0.5, 0.5]).unwrap();
        let hamming = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        // lossless point
        let r0 = ba_reference(&bern05, &hamming, 0.0).unwrap();
        assert!((r0 - std::f64::consts::LN_2).abs() < 1e-9, "{r0}");
        // max distortion
        let rmax = ba_reference(&bern05, &hamming, 1.0).unwrap();
        assert_eq!(rmax, 0.0);
        // closed form h(p) - h(D)
        let bern03 = Pmf::new(vec![0.7, 0.3]).unwrap();
        let r = ba_reference(&bern03, &hamming, 0.1).unwrap();
        let closed = binary_entropy(0.3) - binary_entropy(0.1);
        assert!((r - closed).abs() < 1e-6, "{r} vs {closed}");
    }

    #[test]
    fn membership_reports_boundary_band() {
        // a point directly on the classical boundary lands in the
        // indeterminate band
        let p = bern03_nosi();
        let r_star = binary_entropy(0.3) - binary_entropy(0.1);
        let point = RateDistortionPoint::new(vec![r_star], vec![0.1]).unwrap();
        let rep = membership(&p, &point, &fast_opts()).unwrap();
        assert_eq!(rep.verdict, Verdict::BoundaryIndeterminate, "margin {}", rep.margin);
        assert!(rep.margin.abs() <= 1e-3);
    }

    #[test]
    fn boundary_bisection_tracks_ba() {
        let p = bern03_nosi();
        let mut analyzer = RegionAnalyzer::new(p.clone(), fast_opts());
        let d = 0.1;
        let r = analyzer.boundary_rate(d, 1.0, 5e-4).unwrap();
        let oracle = binary_entropy(0.3) - binary_entropy(d);
        assert!((r - oracle).abs() < 5e-3, "{r} vs {oracle}");
    }
}
