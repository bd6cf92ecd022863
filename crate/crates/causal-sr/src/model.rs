//! Problem instances, rate-distortion query points, exponent parameters, and
//! auxiliary (test-channel plus decoder) systems.
//!
//! A [`SourceProblem`] fixes the number of users `k`, the joint source/side
//! information pmf over `(X, Y_1, …, Y_k)`, the reproduction alphabets, and
//! one distortion matrix per user. Rates are stored *cumulatively*: `R_j` is
//! the sum rate available to user `j`, so the increment of stage `j ≥ 2` is
//! `R_j − Σ_{l<j} R_l`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::prob::{Axis, JointPmf, Pmf, PMF_SUM_TOL};
use crate::{Error, Result};

/// Tolerance for the weight constraint `Σ_j (α_j + β_j) = 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// A fixed instance of the k-user causal successive refinement problem.
#[derive(Debug, Clone)]
pub struct SourceProblem {
    k: usize,
    joint: JointPmf,
    xhat_sizes: Vec<usize>,
    distortion: Vec<Vec<Vec<f64>>>,
    dbar: Vec<f64>,
    px: Pmf,
    /// `P(y⃗ | x)` flattened row-major over the side-information axes, one row
    /// per source symbol. Every row is defined because `P_X(x) > 0` is
    /// enforced at construction.
    p_y_given_x: Vec<Vec<f64>>,
}

impl SourceProblem {
    /// Builds and validates an instance.
    ///
    /// The joint must have axes named `x, y1, …, yk` in that order; every
    /// source symbol must have positive probability; distortion entries must
    /// be finite and non-negative.
    pub fn new(
        joint: JointPmf,
        xhat_sizes: Vec<usize>,
        distortion: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let k = joint.axes().len().checked_sub(1).ok_or_else(|| {
            Error::Data("joint needs at least axes (x, y1)".into())
        })?;
        if k == 0 {
            return Err(Error::Data("problem needs at least one user".into()));
        }
        if joint.axes()[0].name != "x" {
            return Err(Error::Data("first joint axis must be named x".into()));
        }
        for j in 1..=k {
            let want = format!("y{j}");
            if joint.axes()[j].name != want {
                return Err(Error::Data(format!(
                    "joint axis {j} must be named {want}, found {}",
                    joint.axes()[j].name
                )));
            }
        }
        if xhat_sizes.len() != k || distortion.len() != k {
            return Err(Error::Data(format!(
                "expected {k} reproduction alphabets and distortion matrices"
            )));
        }
        let x_size = joint.axes()[0].size;
        let mut dbar = Vec::with_capacity(k);
        for (j, d) in distortion.iter().enumerate() {
            if d.len() != x_size {
                return Err(Error::Data(format!(
                    "distortion matrix {} has {} rows, expected {x_size}",
                    j + 1,
                    d.len()
                )));
            }
            let mut max = 0.0f64;
            for row in d {
                if row.len() != xhat_sizes[j] {
                    return Err(Error::Data(format!(
                        "distortion matrix {} has a row of length {}, expected {}",
                        j + 1,
                        row.len(),
                        xhat_sizes[j]
                    )));
                }
                for &v in row {
                    if !v.is_finite() || v < 0.0 {
                        return Err(Error::Data(format!(
                            "distortion matrix {} entry {v} must be finite and ≥ 0",
                            j + 1
                        )));
                    }
                    max = max.max(v);
                }
            }
            dbar.push(max);
        }
        let px_marginal = joint.marginalize(&["x"])?;
        for (x, &p) in px_marginal.values().iter().enumerate() {
            if p <= 0.0 {
                return Err(Error::Data(format!(
                    "source symbol {x} has probability 0; drop it from the alphabet"
                )));
            }
        }
        let px = Pmf::new(px_marginal.values().to_vec())?;
        let y_cells: usize = joint.axes()[1..].iter().map(|a| a.size).product();
        let mut p_y_given_x = vec![vec![0.0; y_cells]; x_size];
        for (t, &v) in joint.values().iter().enumerate() {
            p_y_given_x[t / y_cells][t % y_cells] = v;
        }
        for (x, row) in p_y_given_x.iter_mut().enumerate() {
            for v in row.iter_mut() {
                *v /= px.get(x);
            }
        }
        Ok(Self { k, joint, xhat_sizes, distortion, dbar, px, p_y_given_x })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn joint(&self) -> &JointPmf {
        &self.joint
    }

    pub fn x_size(&self) -> usize {
        self.joint.axes()[0].size
    }

    pub fn y_sizes(&self) -> Vec<usize> {
        self.joint.axes()[1..].iter().map(|a| a.size).collect()
    }

    pub fn xhat_sizes(&self) -> &[usize] {
        &self.xhat_sizes
    }

    /// Distortion matrix of user `j` (0-based), indexed `[x][x̂]`.
    pub fn distortion(&self, j: usize) -> &Vec<Vec<f64>> {
        &self.distortion[j]
    }

    /// Largest distortion entry `d̄_j` of user `j` (0-based).
    pub fn dbar(&self, j: usize) -> f64 {
        self.dbar[j]
    }

    pub fn px(&self) -> &Pmf {
        &self.px
    }

    /// `P(y⃗ | x)` with the side-information tuple flattened row-major.
    pub fn p_y_given_x(&self) -> &[Vec<f64>] {
        &self.p_y_given_x
    }

    /// Number of flattened side-information cells `Π_j |Y_j|`.
    pub fn y_cells(&self) -> usize {
        self.y_sizes().iter().product()
    }

    /// Axes of the full tuple `T = (X, Y^k, W^k, X̂^k)` for given auxiliary
    /// alphabet sizes.
    pub fn t_axes(&self, w_sizes: &[usize]) -> Result<Vec<Axis>> {
        if w_sizes.len() != self.k {
            return Err(Error::Input(format!(
                "expected {} auxiliary alphabet sizes, got {}",
                self.k,
                w_sizes.len()
            )));
        }
        let mut axes = self.joint.axes().to_vec();
        for (j, &w) in w_sizes.iter().enumerate() {
            axes.push(Axis::new(format!("w{}", j + 1), w));
        }
        for (j, &s) in self.xhat_sizes.iter().enumerate() {
            axes.push(Axis::new(format!("xh{}", j + 1), s));
        }
        Ok(axes)
    }

    /// Default cardinality caps `|W_j| ≤ (Π of all alphabet sizes)^j` for the
    /// unstructured exponent optimization; configurable per run.
    pub fn default_w_caps(&self) -> Vec<usize> {
        let base: usize = self.x_size()
            * self.y_cells()
            * self.xhat_sizes.iter().product::<usize>();
        (1..=self.k).map(|j| base.saturating_pow(j as u32)).collect()
    }

    /// The tighter caps `|W_j| ≤ |X|^j` that already contain the optimizing
    /// distributions; the default for region/exponent pipelines.
    pub fn psh_w_caps(&self) -> Vec<usize> {
        (1..=self.k).map(|j| self.x_size().pow(j as u32)).collect()
    }
}

/// On-disk problem document (JSON).
#[derive(Debug, Deserialize, Serialize)]
struct ProblemFile {
    k: usize,
    alphabets: AlphabetSpec,
    joint: Value,
    distortion: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize, Serialize)]
struct AlphabetSpec {
    x: usize,
    y: Vec<usize>,
    xhat: Vec<usize>,
}

fn flatten_nested(v: &Value, dims: &[usize], out: &mut Vec<f64>) -> Result<()> {
    match dims.split_first() {
        None => match v.as_f64() {
            Some(f) => {
                out.push(f);
                Ok(())
            }
            None => Err(Error::Data(format!("expected a number in joint, found {v}"))),
        },
        Some((&d, rest)) => {
            let arr = v
                .as_array()
                .ok_or_else(|| Error::Data(format!("expected an array of length {d} in joint")))?;
            if arr.len() != d {
                return Err(Error::Data(format!(
                    "joint nesting has length {}, expected {d}",
                    arr.len()
                )));
            }
            for item in arr {
                flatten_nested(item, rest, out)?;
            }
            Ok(())
        }
    }
}

/// Parses and validates a problem document.
pub fn load_problem(text: &str) -> Result<SourceProblem> {
    let file: ProblemFile =
        serde_json::from_str(text).map_err(|e| Error::Data(format!("malformed problem file: {e}")))?;
    if file.k == 0 {
        return Err(Error::Data("k must be at least 1".into()));
    }
    if file.alphabets.y.len() != file.k || file.alphabets.xhat.len() != file.k {
        return Err(Error::Data(format!(
            "expected {} side-information and reproduction alphabets",
            file.k
        )));
    }
    let mut dims = vec![file.alphabets.x];
    dims.extend_from_slice(&file.alphabets.y);
    let mut values = Vec::with_capacity(dims.iter().product());
    flatten_nested(&file.joint, &dims, &mut values)?;
    let mut axes = vec![Axis::new("x", file.alphabets.x)];
    for (j, &s) in file.alphabets.y.iter().enumerate() {
        axes.push(Axis::new(format!("y{}", j + 1), s));
    }
    let joint = JointPmf::new(axes, values).map_err(|e| Error::Data(e.to_string()))?;
    SourceProblem::new(joint, file.alphabets.xhat.clone(), file.distortion)
}

/// Reads a problem document from disk.
pub fn load_problem_file(path: &std::path::Path) -> Result<SourceProblem> {
    load_problem(&std::fs::read_to_string(path)?)
}

/// A rate-distortion query point with cumulative rates in nats per symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateDistortionPoint {
    pub rates: Vec<f64>,
    pub distortions: Vec<f64>,
}

impl RateDistortionPoint {
    pub fn new(rates: Vec<f64>, distortions: Vec<f64>) -> Result<Self> {
        if rates.len() != distortions.len() || rates.is_empty() {
            return Err(Error::Input(
                "rates and distortions must be non-empty and of equal length".into(),
            ));
        }
        for w in rates.windows(2) {
            if w[1] < w[0] {
                return Err(Error::Input(format!(
                    "cumulative rates must be non-decreasing, found {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if rates[0] < 0.0 {
            return Err(Error::Input("rates must be non-negative".into()));
        }
        for &d in &distortions {
            if !(d.is_finite() && d >= 0.0) {
                return Err(Error::Input(format!("distortion level {d} must be ≥ 0")));
            }
        }
        Ok(Self { rates, distortions })
    }

    /// Builds a point from per-stage incremental rates `r_j ≥ 0`, inverting
    /// the cumulative bookkeeping: `R_j = r_j + Σ_{l<j} R_l`.
    pub fn from_incremental(incremental: Vec<f64>, distortions: Vec<f64>) -> Result<Self> {
        let mut rates = Vec::with_capacity(incremental.len());
        let mut sum = 0.0;
        for &r in &incremental {
            if r < 0.0 {
                return Err(Error::Input(format!("incremental rate {r} must be ≥ 0")));
            }
            let cum = sum + r;
            rates.push(cum);
            sum += cum;
        }
        Self::new(rates, distortions)
    }

    pub fn k(&self) -> usize {
        self.rates.len()
    }

    /// Stage increments `ΔR_1 = R_1`, `ΔR_j = R_j − Σ_{l<j} R_l`.
    pub fn rate_increments(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rates.len());
        let mut sum = 0.0;
        for &r in &self.rates {
            out.push(r - sum);
            sum += r;
        }
        out
    }
}

/// Validates weight vectors `(α^k, β^k) ∈ [0,1]^{2k}` with
/// `Σ_j (α_j + β_j) = 1`.
pub fn validate_weights(alpha: &[f64], beta: &[f64], k: usize) -> Result<()> {
    if alpha.len() != k || beta.len() != k {
        return Err(Error::Input(format!("expected {k} alpha and beta weights")));
    }
    for &v in alpha.iter().chain(beta) {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Input(format!("weight {v} outside [0,1]")));
        }
    }
    let sum: f64 = alpha.iter().sum::<f64>() + beta.iter().sum::<f64>();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Input(format!(
            "weights sum to {sum}, expected 1 within {WEIGHT_SUM_TOL}"
        )));
    }
    Ok(())
}

/// The exponent's dual variables `(θ, μ, α^k, β^k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterTuple {
    pub theta: f64,
    pub mu: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ParameterTuple {
    pub fn new(theta: f64, mu: f64, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(Error::Input(format!("theta {theta} must be positive")));
        }
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::Input(format!("mu {mu} must be positive")));
        }
        validate_weights(&alpha, &beta, alpha.len())?;
        Ok(Self { theta, mu, alpha, beta })
    }

    /// Largest stage weight `α⁺ = max_j α_j`.
    pub fn alpha_plus(&self) -> f64 {
        self.alpha.iter().cloned().fold(0.0, f64::max)
    }
}

/// Dual variables `(λ, α^k, β^k)` of the single-parameter exponent family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TildeParameters {
    pub lambda: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl TildeParameters {
    pub fn new(lambda: f64, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Input(format!("lambda {lambda} must be ≥ 0")));
        }
        validate_weights(&alpha, &beta, alpha.len())?;
        Ok(Self { lambda, alpha, beta })
    }

    pub fn alpha_plus(&self) -> f64 {
        self.alpha.iter().cloned().fold(0.0, f64::max)
    }
}

/// The weighted rate-distortion functional
/// `κ = α_1 R_1 + β_1 D_1 + Σ_{j≥2} (α_j (R_j − Σ_{l<j} R_l) + β_j D_j)`.
pub fn kappa(point: &RateDistortionPoint, alpha: &[f64], beta: &[f64]) -> Result<f64> {
    validate_weights(alpha, beta, point.k())?;
    let inc = point.rate_increments();
    let mut total = 0.0;
    for j in 0..point.k() {
        total += alpha[j] * inc[j] + beta[j] * point.distortions[j];
    }
    Ok(total)
}

/// Per-user decoder of an auxiliary system: a deterministic table or a
/// stochastic conditional over the reproduction alphabet, indexed row-major
/// by `(w_1, …, w_j, y_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Decoder {
    Deterministic(Vec<usize>),
    Stochastic(Vec<Vec<f64>>),
}

impl Decoder {
    /// Probability that the decoder outputs `xhat` in cell `row`.
    pub fn prob(&self, row: usize, xhat: usize) -> f64 {
        match self {
            Decoder::Deterministic(t) => {
                if t[row] == xhat {
                    1.0
                } else {
                    0.0
                }
            }
            Decoder::Stochastic(rows) => rows[row][xhat],
        }
    }

    /// The most likely output per cell; the table itself when deterministic.
    pub fn hard_table(&self) -> Vec<usize> {
        match self {
            Decoder::Deterministic(t) => t.clone(),
            Decoder::Stochastic(rows) => rows
                .iter()
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(i, _)| i)
                        .unwrap()
                })
                .collect(),
        }
    }
}

/// Test channels `Q_{W_j | X, W^{j−1}}` plus per-user decoders.
///
/// The Markov chain `W^k − X − Y^k` and the causal decoder structure
/// `X̂_j = φ_j(W^j, Y_j)` hold by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxiliarySystem {
    pub w_sizes: Vec<usize>,
    /// `channels[j]` has one row per `(x, w_1, …, w_j)` prefix cell
    /// (row-major, `x` slowest), each a pmf over `W_{j+1}`.
    pub channels: Vec<Vec<Vec<f64>>>,
    pub decoders: Vec<Decoder>,
}

impl AuxiliarySystem {
    /// Checks all table shapes and row normalizations against a problem.
    pub fn validate(&self, problem: &SourceProblem) -> Result<()> {
        let k = problem.k();
        if self.w_sizes.len() != k || self.channels.len() != k || self.decoders.len() != k {
            return Err(Error::Input(format!("auxiliary system must cover {k} users")));
        }
        let mut w_prefix = 1usize;
        for j in 0..k {
            let rows = problem.x_size() * w_prefix;
            if self.channels[j].len() != rows {
                return Err(Error::Input(format!(
                    "channel {} has {} rows, expected {rows}",
                    j + 1,
                    self.channels[j].len()
                )));
            }
            for row in &self.channels[j] {
                if row.len() != self.w_sizes[j] {
                    return Err(Error::Input(format!(
                        "channel {} row has {} entries, expected {}",
                        j + 1,
                        row.len(),
                        self.w_sizes[j]
                    )));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > PMF_SUM_TOL || row.iter().any(|&v| v < 0.0) {
                    return Err(Error::Input(format!(
                        "channel {} row is not a pmf (sum {s})",
                        j + 1
                    )));
                }
            }
            w_prefix *= self.w_sizes[j];
            let dec_rows = w_prefix * problem.y_sizes()[j];
            let want_out = problem.xhat_sizes()[j];
            match &self.decoders[j] {
                Decoder::Deterministic(t) => {
                    if t.len() != dec_rows {
                        return Err(Error::Input(format!(
                            "decoder {} has {} cells, expected {dec_rows}",
                            j + 1,
                            t.len()
                        )));
                    }
                    if t.iter().any(|&x| x >= want_out) {
                        return Err(Error::Input(format!(
                            "decoder {} outputs a symbol outside the reproduction alphabet",
                            j + 1
                        )));
                    }
                }
                Decoder::Stochastic(rows) => {
                    if rows.len() != dec_rows {
                        return Err(Error::Input(format!(
                            "decoder {} has {} cells, expected {dec_rows}",
                            j + 1,
                            rows.len()
                        )));
                    }
                    for row in rows {
                        if row.len() != want_out {
                            return Err(Error::Input(format!(
                                "decoder {} row has {} entries, expected {want_out}",
                                j + 1,
                                row.len()
                            )));
                        }
                        let s: f64 = row.iter().sum();
                        if (s - 1.0).abs() > PMF_SUM_TOL || row.iter().any(|&v| v < 0.0) {
                            return Err(Error::Input(format!(
                                "decoder {} row is not a pmf (sum {s})",
                                j + 1
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Chain marginal `Q_{W^k | X = x}` evaluated at a full `w⃗` tuple.
    pub fn w_chain_prob(&self, x: usize, w: &[usize]) -> f64 {
        let mut p = 1.0;
        let mut prefix = 0usize;
        let mut prefix_card = 1usize;
        for (j, &wj) in w.iter().enumerate() {
            let row = x * prefix_card + prefix;
            p *= self.channels[j][row][wj];
            prefix = prefix * self.w_sizes[j] + wj;
            prefix_card *= self.w_sizes[j];
        }
        p
    }
}

/// A full joint over `T = (X, Y^k, W^k, X̂^k)` with no structural constraints
/// beyond the configured auxiliary cardinality caps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeJoint {
    w_sizes: Vec<usize>,
    joint: JointPmf,
}

impl FreeJoint {
    /// Wraps a joint over the T axes, checking shape and caps.
    pub fn new(problem: &SourceProblem, w_sizes: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let axes = problem.t_axes(&w_sizes)?;
        let joint = JointPmf::new(axes, values)?;
        Ok(Self { w_sizes, joint })
    }

    pub fn from_joint(problem: &SourceProblem, joint: JointPmf) -> Result<Self> {
        let k = problem.k();
        let axes = joint.axes();
        if axes.len() != 1 + 3 * k {
            return Err(Error::Input(format!(
                "free joint must have {} axes, found {}",
                1 + 3 * k,
                axes.len()
            )));
        }
        let w_sizes: Vec<usize> = axes[1 + k..1 + 2 * k].iter().map(|a| a.size).collect();
        let expect = problem.t_axes(&w_sizes)?;
        if expect != axes {
            return Err(Error::Input("free joint axes do not match the problem".into()));
        }
        Ok(Self { w_sizes, joint })
    }

    pub fn w_sizes(&self) -> &[usize] {
        &self.w_sizes
    }

    pub fn joint(&self) -> &JointPmf {
        &self.joint
    }
}

/// Induces the joint `Q_T = P_{XY^k} · Π_j Q_{W_j|X W^{j−1}} · Π_j
/// Q_{X̂_j|W^j Y_j}` of an auxiliary system.
pub fn induce_joint(problem: &SourceProblem, aux: &AuxiliarySystem) -> Result<FreeJoint> {
    aux.validate(problem)?;
    let k = problem.k();
    let axes = problem.t_axes(&aux.w_sizes)?;
    let total: usize = axes.iter().map(|a| a.size).product();
    let y_sizes = problem.y_sizes();
    let xhat_sizes = problem.xhat_sizes();
    let mut values = vec![0.0; total];
    let mut coords = vec![0usize; axes.len()];
    for (t, out) in values.iter_mut().enumerate() {
        let mut rem = t;
        for (i, ax) in axes.iter().enumerate().rev() {
            coords[i] = rem % ax.size;
            rem /= ax.size;
        }
        let x = coords[0];
        let y = &coords[1..1 + k];
        let w = &coords[1 + k..1 + 2 * k];
        let xh = &coords[1 + 2 * k..];
        let y_flat = y
            .iter()
            .zip(&y_sizes)
            .fold(0usize, |acc, (&yi, &s)| acc * s + yi);
        let mut q = problem.joint().values()[x * problem.y_cells() + y_flat];
        q *= aux.w_chain_prob(x, w);
        let mut w_prefix = 0usize;
        for j in 0..k {
            w_prefix = w_prefix * aux.w_sizes[j] + w[j];
            let row = w_prefix * y_sizes[j] + y[j];
            q *= aux.decoders[j].prob(row, xh[j]);
            if q == 0.0 {
                break;
            }
        }
        let _ = xhat_sizes;
        *out = q;
    }
    // renormalize away accumulated rounding so downstream pmf gates hold
    let sum: f64 = values.iter().sum();
    debug_assert!((sum - 1.0).abs() < 1e-9);
    for v in values.iter_mut() {
        *v /= sum;
    }
    FreeJoint::new(problem, aux.w_sizes.clone(), values)
}
