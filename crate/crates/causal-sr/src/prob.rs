//! Finite-alphabet probability primitives.
//!
//! Everything downstream works with dense distributions over small indexed
//! alphabets: plain [`Pmf`]s, multi-axis [`JointPmf`]s in row-major layout,
//! and [`ConditionalPmf`]s derived by conditioning a joint. Information
//! quantities are in nats. The convention `0·log(0/q) = 0` applies
//! throughout; a positive numerator over a zero denominator inside a
//! positively weighted term is a hard [`Error::Domain`], never an infinity.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Absolute tolerance for "entries sum to 1" checks.
pub const PMF_SUM_TOL: f64 = 1e-12;

/// A probability mass function over an indexed finite alphabet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pmf {
    values: Vec<f64>,
}

impl Pmf {
    /// Validates non-negativity and normalization (within `1e-12`).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input("pmf must have at least one entry".into()));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Input(format!("pmf entry {i} is {v}, expected ≥ 0")));
            }
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PMF_SUM_TOL {
            return Err(Error::Input(format!(
                "pmf entries sum to {sum}, expected 1 within {PMF_SUM_TOL}"
            )));
        }
        Ok(Self { values })
    }

    /// Uniform distribution over `n` symbols.
    pub fn uniform(n: usize) -> Self {
        Self { values: vec![1.0 / n as f64; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.values
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }
}

/// Binary entropy `h(p) = -p ln p - (1-p) ln(1-p)` in nats.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// A named axis of a joint distribution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub size: usize,
}

impl Axis {
    pub fn new(name: impl Into<String>, size: usize) -> Self {
        Self { name: name.into(), size }
    }
}

/// A joint pmf over an ordered list of named axes, stored densely in
/// row-major order (last axis varies fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPmf {
    axes: Vec<Axis>,
    values: Vec<f64>,
}

impl JointPmf {
    pub fn new(axes: Vec<Axis>, values: Vec<f64>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for ax in &axes {
            if ax.size == 0 {
                return Err(Error::Input(format!("axis {} has size 0", ax.name)));
            }
            if !seen.insert(ax.name.clone()) {
                return Err(Error::Input(format!("duplicate axis name {}", ax.name)));
            }
        }
        let expect: usize = axes.iter().map(|a| a.size).product();
        if values.len() != expect {
            return Err(Error::Input(format!(
                "joint has {} entries, axes imply {expect}",
                values.len()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Input(format!("joint entry {i} is {v}, expected ≥ 0")));
            }
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PMF_SUM_TOL {
            return Err(Error::Input(format!(
                "joint entries sum to {sum}, expected 1 within {PMF_SUM_TOL}"
            )));
        }
        Ok(Self { axes, values })
    }

    /// Product of independent per-axis pmfs.
    pub fn product(factors: &[(Axis, &Pmf)]) -> Result<Self> {
        let axes: Vec<Axis> = factors.iter().map(|(a, _)| a.clone()).collect();
        for ((a, p), _) in factors.iter().zip(0..) {
            if a.size != p.len() {
                return Err(Error::Input(format!(
                    "axis {} has size {}, factor pmf has {}",
                    a.name,
                    a.size,
                    p.len()
                )));
            }
        }
        let total: usize = axes.iter().map(|a| a.size).product();
        let mut values = vec![1.0; total];
        let strides = strides_of(&axes);
        for (t, v) in values.iter_mut().enumerate() {
            for (ai, (_, p)) in factors.iter().enumerate() {
                let c = (t / strides[ai]) % axes[ai].size;
                *v *= p.get(c);
            }
        }
        Self::new(axes, values)
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn axis_index(&self, name: &str) -> Result<usize> {
        self.axes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::Input(format!("unknown axis name {name}")))
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.axes)
    }

    pub fn flat_index(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.axes.len());
        let strides = self.strides();
        coords.iter().zip(&strides).map(|(c, s)| c * s).sum()
    }

    pub fn coords(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0usize; self.axes.len()];
        for (i, ax) in self.axes.iter().enumerate().rev() {
            out[i] = flat % ax.size;
            flat /= ax.size;
        }
        out
    }

    pub fn prob(&self, coords: &[usize]) -> f64 {
        self.values[self.flat_index(coords)]
    }

    /// Sums out every axis not in `keep`. Axis order of the result follows
    /// this joint's axis order restricted to `keep`.
    pub fn marginalize(&self, keep: &[&str]) -> Result<JointPmf> {
        let keep_idx = self.resolve_axes(keep)?;
        let out_axes: Vec<Axis> = keep_idx.iter().map(|&i| self.axes[i].clone()).collect();
        let map = self.index_map(&keep_idx);
        let out_len: usize = out_axes.iter().map(|a| a.size).product();
        let mut out = vec![0.0; out_len];
        for (t, &v) in self.values.iter().enumerate() {
            out[map[t] as usize] += v;
        }
        JointPmf::new(out_axes, out)
    }

    /// For each cell of the `given` axes, the conditional distribution of the
    /// remaining axes. Zero-mass conditioning cells are flagged undefined.
    pub fn condition(&self, given: &[&str]) -> Result<ConditionalPmf> {
        let given_idx = self.resolve_axes(given)?;
        if given_idx.len() == self.axes.len() {
            return Err(Error::Input(
                "conditioning on every axis leaves no target axes".into(),
            ));
        }
        let target_idx: Vec<usize> = (0..self.axes.len())
            .filter(|i| !given_idx.contains(i))
            .collect();
        let given_axes: Vec<Axis> = given_idx.iter().map(|&i| self.axes[i].clone()).collect();
        let target_axes: Vec<Axis> = target_idx.iter().map(|&i| self.axes[i].clone()).collect();
        let g_map = self.index_map(&given_idx);
        let t_map = self.index_map(&target_idx);
        let n_rows: usize = given_axes.iter().map(|a| a.size).product();
        let row_len: usize = target_axes.iter().map(|a| a.size).product();
        let mut mass = vec![0.0; n_rows];
        let mut rows = vec![vec![0.0; row_len]; n_rows];
        for (t, &v) in self.values.iter().enumerate() {
            let g = g_map[t] as usize;
            mass[g] += v;
            rows[g][t_map[t] as usize] += v;
        }
        let rows = rows
            .into_iter()
            .zip(&mass)
            .map(|(row, &m)| {
                if m > 0.0 {
                    Some(row.iter().map(|v| v / m).collect())
                } else {
                    None
                }
            })
            .collect();
        Ok(ConditionalPmf { given: given_axes, target: target_axes, rows })
    }

    /// Flat index into a marginal over `subset` (axis indices), per cell of
    /// this joint. Shared by marginalization and the exponent hot path.
    pub(crate) fn index_map(&self, subset: &[usize]) -> Vec<u32> {
        index_map(&self.axes, subset)
    }

    fn resolve_axes(&self, names: &[&str]) -> Result<Vec<usize>> {
        let mut idx = Vec::with_capacity(names.len());
        for n in names {
            let i = self.axis_index(n)?;
            if idx.contains(&i) {
                return Err(Error::Input(format!("axis {n} listed twice")));
            }
            idx.push(i);
        }
        idx.sort_unstable();
        Ok(idx)
    }
}

pub(crate) fn strides_of(axes: &[Axis]) -> Vec<usize> {
    let mut strides = vec![1usize; axes.len()];
    for i in (0..axes.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * axes[i + 1].size;
    }
    strides
}

/// Maps each flat cell of the full joint over `axes` to the flat index of its
/// projection onto `subset` (given in increasing axis order).
pub(crate) fn index_map(axes: &[Axis], subset: &[usize]) -> Vec<u32> {
    let full: usize = axes.iter().map(|a| a.size).product();
    let strides = strides_of(axes);
    let mut sub_strides = vec![0usize; subset.len()];
    let mut acc = 1usize;
    for (si, &ai) in subset.iter().enumerate().rev() {
        sub_strides[si] = acc;
        acc *= axes[ai].size;
    }
    let mut map = vec![0u32; full];
    for (t, m) in map.iter_mut().enumerate() {
        let mut out = 0usize;
        for (si, &ai) in subset.iter().enumerate() {
            let c = (t / strides[ai]) % axes[ai].size;
            out += c * sub_strides[si];
        }
        *m = out as u32;
    }
    map
}

/// Conditional distribution of `target` axes for each cell of `given` axes.
///
/// Rows are `None` when the conditioning event has probability zero under
/// the joint they were derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalPmf {
    given: Vec<Axis>,
    target: Vec<Axis>,
    rows: Vec<Option<Vec<f64>>>,
}

impl ConditionalPmf {
    /// Builds a conditional from explicit rows (row-major over the given
    /// axes); every defined row must be a valid pmf over the target axes.
    pub fn from_rows(
        given: Vec<Axis>,
        target: Vec<Axis>,
        rows: Vec<Option<Vec<f64>>>,
    ) -> Result<Self> {
        let n_rows: usize = given.iter().map(|a| a.size).product();
        let row_len: usize = target.iter().map(|a| a.size).product();
        if rows.len() != n_rows {
            return Err(Error::Input(format!(
                "conditional has {} rows, given axes imply {n_rows}",
                rows.len()
            )));
        }
        for (r, row) in rows.iter().enumerate() {
            if let Some(row) = row {
                if row.len() != row_len {
                    return Err(Error::Input(format!(
                        "conditional row {r} has {} entries, target axes imply {row_len}",
                        row.len()
                    )));
                }
                Pmf::new(row.clone())
                    .map_err(|e| Error::Input(format!("conditional row {r}: {e}")))?;
            }
        }
        Ok(Self { given, target, rows })
    }

    pub fn given_axes(&self) -> &[Axis] {
        &self.given
    }

    pub fn target_axes(&self) -> &[Axis] {
        &self.target
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row_len(&self) -> usize {
        self.target.iter().map(|a| a.size).product()
    }

    /// Row by flat index over the given axes; `None` when undefined.
    pub fn row(&self, flat_given: usize) -> Option<&[f64]> {
        self.rows[flat_given].as_deref()
    }

    pub fn is_defined(&self, flat_given: usize) -> bool {
        self.rows[flat_given].is_some()
    }
}

/// Mutual information `I(X;W)` in nats from an input pmf and a channel
/// conditioned on it.
///
/// Rows of the channel at zero-probability inputs are ignored; undefined
/// rows under a positive-probability input are a domain error.
pub fn mutual_information(px: &Pmf, channel: &ConditionalPmf) -> Result<f64> {
    let n_in: usize = channel.given_axes().iter().map(|a| a.size).product();
    if n_in != px.len() {
        return Err(Error::Input(format!(
            "channel conditions on {n_in} cells, input pmf has {}",
            px.len()
        )));
    }
    let m = channel.row_len();
    let mut qw = vec![0.0; m];
    for x in 0..px.len() {
        let p = px.get(x);
        if p == 0.0 {
            continue;
        }
        let row = channel
            .row(x)
            .ok_or_else(|| Error::Domain(format!("channel row {x} undefined at P(x) > 0")))?;
        for (w, &c) in row.iter().enumerate() {
            qw[w] += p * c;
        }
    }
    let mut info = 0.0;
    for x in 0..px.len() {
        let p = px.get(x);
        if p == 0.0 {
            continue;
        }
        let row = channel.row(x).expect("checked above");
        for (w, &c) in row.iter().enumerate() {
            if c > 0.0 {
                // qw[w] >= p*c > 0 here, so the ratio is finite
                info += p * c * (c / qw[w]).ln();
            }
        }
    }
    Ok(info)
}

/// Conditional mutual information `I(A;B|G)` in nats over a joint pmf.
///
/// `a`, `b`, `given` must be disjoint axis-name sets; `given` may be empty,
/// which reduces to plain mutual information. Zero-probability conditioning
/// cells contribute 0.
pub fn conditional_mutual_information(
    joint: &JointPmf,
    a: &[&str],
    b: &[&str],
    given: &[&str],
) -> Result<f64> {
    for x in a {
        if b.contains(x) || given.contains(x) {
            return Err(Error::Input(format!("axis {x} appears in more than one set")));
        }
    }
    for x in b {
        if given.contains(x) {
            return Err(Error::Input(format!("axis {x} appears in more than one set")));
        }
    }
    let mut abg: Vec<&str> = Vec::new();
    abg.extend_from_slice(a);
    abg.extend_from_slice(b);
    abg.extend_from_slice(given);
    let m_abg = joint.marginalize(&abg)?;

    let names = |axes: &[Axis]| axes.iter().map(|x| x.name.clone()).collect::<Vec<_>>();
    let abg_names = names(m_abg.axes());
    let in_set = |set: &[&str], n: &String| set.iter().any(|s| s == n);
    let ag: Vec<&str> = abg_names
        .iter()
        .filter(|n| in_set(a, n) || in_set(given, n))
        .map(|s| s.as_str())
        .collect();
    let bg: Vec<&str> = abg_names
        .iter()
        .filter(|n| in_set(b, n) || in_set(given, n))
        .map(|s| s.as_str())
        .collect();
    let g: Vec<&str> = abg_names
        .iter()
        .filter(|n| in_set(given, n))
        .map(|s| s.as_str())
        .collect();

    let m_ag = m_abg.marginalize(&ag)?;
    let m_bg = m_abg.marginalize(&bg)?;
    let m_g = if g.is_empty() { None } else { Some(m_abg.marginalize(&g)?) };

    let ag_idx: Vec<usize> = ag.iter().map(|n| m_abg.axis_index(n).unwrap()).collect();
    let bg_idx: Vec<usize> = bg.iter().map(|n| m_abg.axis_index(n).unwrap()).collect();
    let g_idx: Vec<usize> = g.iter().map(|n| m_abg.axis_index(n).unwrap()).collect();
    let ag_map = m_abg.index_map(&{
        let mut v = ag_idx.clone();
        v.sort_unstable();
        v
    });
    let bg_map = m_abg.index_map(&{
        let mut v = bg_idx.clone();
        v.sort_unstable();
        v
    });
    let g_map = m_abg.index_map(&{
        let mut v = g_idx.clone();
        v.sort_unstable();
        v
    });

    let mut info = 0.0;
    for (t, &p) in m_abg.values().iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let pg = match &m_g {
            Some(mg) => mg.values()[g_map[t] as usize],
            None => 1.0,
        };
        let pag = m_ag.values()[ag_map[t] as usize];
        let pbg = m_bg.values()[bg_map[t] as usize];
        // pag, pbg >= p > 0 and pg >= pag > 0
        info += p * (p * pg / (pag * pbg)).ln();
    }
    Ok(info)
}

/// Maps unconstrained reals onto the open simplex by exponential
/// normalization (softmax).
pub fn simplex_embed(free: &[f64]) -> Pmf {
    let max = free.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = free.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Pmf { values: exps.iter().map(|e| e / sum).collect() }
}

/// Result of [`simplex_project`]: the nearest simplex point and a flag for
/// degenerate (no positive mass) input.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPmf {
    pub pmf: Pmf,
    pub degenerate: bool,
}

/// Euclidean projection of an arbitrary vector onto the probability simplex.
///
/// An input with no positive entry projects to the uniform pmf and is
/// flagged degenerate.
pub fn simplex_project(v: &[f64]) -> ProjectedPmf {
    let degenerate = v.iter().all(|&x| x <= 0.0);
    if degenerate {
        return ProjectedPmf { pmf: Pmf::uniform(v.len()), degenerate: true };
    }
    // sort-and-threshold projection
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (i as f64 + 1.0);
        if u - t > 0.0 {
            tau = t;
        } else {
            break;
        }
    }
    let values: Vec<f64> = v.iter().map(|&x| (x - tau).max(0.0)).collect();
    let sum: f64 = values.iter().sum();
    ProjectedPmf {
        pmf: Pmf { values: values.iter().map(|x| x / sum).collect() },
        degenerate: false,
    }
}
