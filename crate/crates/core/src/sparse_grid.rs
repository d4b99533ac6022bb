//! Deterministic quadrature: 1D rules, tensor grids, mixed differences,
//! downward-closed index sets and the combination technique.
//!
//! All 1D weights are probability weights: Clenshaw-Curtis and Legendre
//! rules integrate against the uniform density on `[-1, 1]`, Hermite rules
//! against the standard normal density.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ClenshawCurtis,
    GaussHermite,
    GaussLegendre,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule1D {
    pub family: Family,
    pub beta: u32,
    /// Ascending.
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule1D {
    pub fn new(family: Family, beta: u32) -> Self {
        match family {
            Family::ClenshawCurtis => cc_rule(beta),
            Family::GaussHermite => gh_rule(beta),
            Family::GaussLegendre => gl_rule(beta),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.points.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Number of points at level `beta` for `family`.
pub fn point_count(family: Family, beta: u32) -> usize {
    assert!(beta >= 1, "quadrature level starts at 1");
    match family {
        Family::ClenshawCurtis if beta == 1 => 1,
        Family::ClenshawCurtis => (1usize << (beta - 1)) + 1,
        Family::GaussHermite | Family::GaussLegendre => 2 * beta as usize - 1,
    }
}

/// Clenshaw-Curtis rule with `m(β)` points on `[-1, 1]`.
///
/// Points are `sin(π (2j − n) / 2n)`, `n = m − 1`: the cosine lattice in
/// ascending order, exactly symmetric, and bit-identical across levels.
pub fn cc_rule(beta: u32) -> QuadratureRule1D {
    let m = point_count(Family::ClenshawCurtis, beta);
    if m == 1 {
        return QuadratureRule1D {
            family: Family::ClenshawCurtis,
            beta,
            points: vec![0.0],
            weights: vec![1.0],
        };
    }
    let n = m - 1;
    let points = (0..m)
        .map(|j| {
            let k = 2 * j as i64 - n as i64;
            (PI * k as f64 / (2 * n) as f64).sin()
        })
        .collect();
    let weights = (0..m)
        .map(|k| {
            let theta = k as f64 * PI / n as f64;
            let mut s = 1.0;
            for j in 1..=n / 2 {
                let b = if 2 * j == n { 1.0 } else { 2.0 };
                s -= b * (2.0 * j as f64 * theta).cos() / (4.0 * (j * j) as f64 - 1.0);
            }
            let c = if k == 0 || k == n { 1.0 } else { 2.0 };
            // halved: probability weights on [-1, 1]
            0.5 * c * s / n as f64
        })
        .collect();
    QuadratureRule1D {
        family: Family::ClenshawCurtis,
        beta,
        points,
        weights,
    }
}

/// Golub-Welsch for a symmetric Jacobi matrix with zero diagonal. The
/// result is symmetrized about 0 so odd rules keep an exact center point.
fn golub_welsch(m: usize, offdiag: impl Fn(usize) -> f64) -> (Vec<f64>, Vec<f64>) {
    if m == 1 {
        return (vec![0.0], vec![1.0]);
    }
    let mut j = DMatrix::zeros(m, m);
    for k in 1..m {
        let b = offdiag(k);
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for i in 0..m {
        let r = m - 1 - i;
        points[i] = 0.5 * (pairs[i].0 - pairs[r].0);
        weights[i] = 0.5 * (pairs[i].1 + pairs[r].1);
    }
    if m % 2 == 1 {
        points[m / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    (points, weights)
}

/// Probabilists' Gauss-Hermite rule with `2β − 1` points.
pub fn gh_rule(beta: u32) -> QuadratureRule1D {
    gh_points(point_count(Family::GaussHermite, beta), beta)
}

/// Gauss-Hermite rule with an arbitrary point count `m`.
pub fn gh_with_points(m: usize) -> QuadratureRule1D {
    gh_points(m, 0)
}

fn gh_points(m: usize, beta: u32) -> QuadratureRule1D {
    assert!(m >= 1);
    let (points, weights) = golub_welsch(m, |k| (k as f64).sqrt());
    QuadratureRule1D {
        family: Family::GaussHermite,
        beta,
        points,
        weights,
    }
}

/// Gauss-Legendre rule with `2β − 1` points.
pub fn gl_rule(beta: u32) -> QuadratureRule1D {
    let m = point_count(Family::GaussLegendre, beta);
    let (points, weights) = golub_welsch(m, |k| {
        let k = k as f64;
        k / (4.0 * k * k - 1.0).sqrt()
    });
    QuadratureRule1D {
        family: Family::GaussLegendre,
        beta,
        points,
        weights,
    }
}

/// Maps each row `z` of `points` to `L z + μ` with `L Lᵀ = Σ`.
pub fn transform_gaussian_points(
    points: &DMatrix<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let d = mu.len();
    if points.ncols() != d || sigma.shape() != (d, d) {
        return Err(Error::Dimension {
            what: "gaussian point transform",
            expected: d,
            got: points.ncols(),
        });
    }
    let l = Cholesky::new(sigma.clone())
        .ok_or_else(|| Error::Decomposition {
            context: "point transform covariance".into(),
        })?
        .unpack();
    let mut out = points * l.transpose();
    for mut row in out.row_iter_mut() {
        row += mu.transpose();
    }
    Ok(out)
}

/// Visits every node of the tensor grid with its product weight.
pub fn for_each_tensor_node(rules: &[QuadratureRule1D], mut f: impl FnMut(&[usize], &[f64], f64)) {
    let d = rules.len();
    if d == 0 || rules.iter().any(|r| r.is_empty()) {
        return;
    }
    let mut idx = vec![0usize; d];
    let mut x: Vec<f64> = rules.iter().map(|r| r.points[0]).collect();
    loop {
        let w: f64 = rules.iter().zip(&idx).map(|(r, &i)| r.weights[i]).product();
        f(&idx, &x, w);
        let mut k = 0;
        loop {
            idx[k] += 1;
            if idx[k] < rules[k].len() {
                x[k] = rules[k].points[idx[k]];
                break;
            }
            idx[k] = 0;
            x[k] = rules[k].points[0];
            k += 1;
            if k == d {
                return;
            }
        }
    }
}

/// `Σ_j f(z_j) ω_j` over the full product grid.
pub fn tensor_quadrature(rules: &[QuadratureRule1D], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut sum = 0.0;
    for_each_tensor_node(rules, |_, x, w| sum += w * f(x));
    sum
}

/// Quadrature levels, one entry per dimension. Ordering is lexicographic.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MultiIndex(pub Vec<u32>);

impl MultiIndex {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    fn shifted(&self, k: usize, up: bool) -> MultiIndex {
        let mut v = self.0.clone();
        if up {
            v[k] += 1;
        } else {
            v[k] -= 1;
        }
        MultiIndex(v)
    }
}

impl From<Vec<u32>> for MultiIndex {
    fn from(v: Vec<u32>) -> Self {
        MultiIndex(v)
    }
}

/// A set of multi-indices with per-dimension floors (1 for quadrature
/// levels, 0 for a physical level).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSet {
    floors: Vec<u32>,
    members: BTreeSet<MultiIndex>,
}

impl IndexSet {
    pub fn new(floors: Vec<u32>) -> Self {
        Self {
            floors,
            members: BTreeSet::new(),
        }
    }

    /// `{λ : floor ≤ λ ≤ corner}`.
    pub fn full_box(floors: Vec<u32>, corner: &[u32]) -> Self {
        let mut set = Self::new(floors.clone());
        let extents: Vec<u32> = corner.iter().zip(&floors).map(|(c, f)| c + 1 - f).collect();
        let mut cur = floors.clone();
        'outer: loop {
            set.members.insert(MultiIndex(cur.clone()));
            for k in 0..cur.len() {
                cur[k] += 1;
                if cur[k] - floors[k] < extents[k] {
                    continue 'outer;
                }
                cur[k] = floors[k];
            }
            break;
        }
        set
    }

    /// `{λ : Σ (λ_k − floor_k) ≤ w}`.
    pub fn total_degree(floors: Vec<u32>, w: u32) -> Self {
        let corner: Vec<u32> = floors.iter().map(|f| f + w).collect();
        let mut set = Self::full_box(floors.clone(), &corner);
        set.members
            .retain(|m| m.0.iter().zip(&floors).map(|(a, f)| a - f).sum::<u32>() <= w);
        set
    }

    pub fn floors(&self) -> &[u32] {
        &self.floors
    }

    pub fn dim(&self) -> usize {
        self.floors.len()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, idx: &MultiIndex) -> bool {
        self.members.contains(idx)
    }

    pub fn iter(&self) -> impl Iterator<Item = &MultiIndex> {
        self.members.iter()
    }

    /// Inserts without any closure check.
    pub fn insert(&mut self, idx: MultiIndex) -> Result<()> {
        self.check_shape(&idx)?;
        self.members.insert(idx);
        Ok(())
    }

    fn check_shape(&self, idx: &MultiIndex) -> Result<()> {
        if idx.dim() != self.dim() {
            return Err(Error::Dimension {
                what: "multi-index",
                expected: self.dim(),
                got: idx.dim(),
            });
        }
        if idx.0.iter().zip(&self.floors).any(|(a, f)| a < f) {
            return Err(Error::Config(format!(
                "multi-index {:?} is below the floors {:?}",
                idx.0, self.floors
            )));
        }
        Ok(())
    }

    fn backward(&self, idx: &MultiIndex) -> Vec<MultiIndex> {
        (0..self.dim())
            .filter(|&k| idx.0[k] > self.floors[k])
            .map(|k| idx.shifted(k, false))
            .collect()
    }

    /// Errors with the first missing backward neighbor.
    pub fn check_downward_closed(&self) -> Result<()> {
        for m in &self.members {
            for b in self.backward(m) {
                if !self.members.contains(&b) {
                    return Err(Error::NotDownwardClosed(b.0));
                }
            }
        }
        Ok(())
    }

    pub fn is_downward_closed(&self) -> bool {
        self.check_downward_closed().is_ok()
    }

    /// Indices outside the set whose backward neighbors all belong to it.
    pub fn margin(&self) -> BTreeSet<MultiIndex> {
        let mut out = BTreeSet::new();
        if self.members.is_empty() {
            out.insert(MultiIndex(self.floors.clone()));
            return out;
        }
        for m in &self.members {
            for k in 0..self.dim() {
                let f = m.shifted(k, true);
                if !self.members.contains(&f) && self.backward(&f).iter().all(|b| self.members.contains(b)) {
                    out.insert(f);
                }
            }
        }
        out
    }

    /// Nonzero combination coefficients `Σ_{j ∈ {0,1}^k, λ+j ∈ Λ} (−1)^|j|`.
    pub fn combination_coefficients(&self) -> BTreeMap<MultiIndex, i64> {
        let d = self.dim();
        let mut out = BTreeMap::new();
        for m in &self.members {
            let mut c = 0i64;
            for mask in 0u32..(1 << d) {
                let mut v = m.0.clone();
                for (k, e) in v.iter_mut().enumerate() {
                    *e += (mask >> k) & 1;
                }
                if self.members.contains(&MultiIndex(v)) {
                    c += if mask.count_ones() % 2 == 0 { 1 } else { -1 };
                }
            }
            if c != 0 {
                out.insert(m.clone(), c);
            }
        }
        out
    }
}

/// `Δ^mix[U_λ] = Σ_{j ∈ {0,1}^k} (−1)^|j| U_{λ−j}`, omitting terms that
/// drop below a floor. `U` is called at most once per index through `memo`.
pub fn mixed_difference<U>(
    index: &MultiIndex,
    floors: &[u32],
    memo: &mut HashMap<MultiIndex, f64>,
    mut u: U,
) -> Result<f64>
where
    U: FnMut(&MultiIndex) -> Result<f64>,
{
    let d = index.dim();
    if floors.len() != d {
        return Err(Error::Dimension {
            what: "multi-index floors",
            expected: d,
            got: floors.len(),
        });
    }
    let mut sum = 0.0;
    for mask in 0u32..(1 << d) {
        let mut v = index.0.clone();
        let mut valid = true;
        for k in 0..d {
            if (mask >> k) & 1 == 1 {
                if v[k] <= floors[k] {
                    valid = false;
                    break;
                }
                v[k] -= 1;
            }
        }
        if !valid {
            continue;
        }
        let key = MultiIndex(v);
        let value = match memo.get(&key) {
            Some(&x) => x,
            None => {
                let x = u(&key)?;
                memo.insert(key, x);
                x
            }
        };
        sum += if mask.count_ones() % 2 == 0 { value } else { -value };
    }
    Ok(sum)
}

/// `Σ_{λ ∈ Λ} Δ^mix[U_λ]` through the combination coefficients, so each
/// `U_λ` is evaluated at most once. Checks closure before evaluating.
pub fn combination_estimate<U>(set: &IndexSet, mut u: U) -> Result<f64>
where
    U: FnMut(&MultiIndex) -> Result<f64>,
{
    set.check_downward_closed()?;
    let mut sum = 0.0;
    for (idx, c) in set.combination_coefficients() {
        sum += c as f64 * u(&idx)?;
    }
    Ok(sum)
}

/// Outcome of [`adapt_index_set`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveResult {
    pub set: IndexSet,
    /// Summed gains of the final margin.
    pub error_estimate: f64,
    /// Summed work of the admitted indices.
    pub work: f64,
    pub converged: bool,
}

/// Greedy dimension-adaptive construction.
///
/// `profit(λ)` returns `(gain, work)` for a margin index, typically
/// `|Δ^mix E_λ|` and the cost of the new nodes. Starting from the floor
/// index, the margin index with the largest `gain / work` is admitted
/// (lexicographically smallest on ties) until the summed margin gain falls
/// to `tol / 2`. Admission stops early, unconverged, once the admitted work
/// reaches `max_work` or the margin is empty. Indices above `caps` (when
/// given) are never considered.
pub fn adapt_index_set<P>(
    floors: Vec<u32>,
    caps: Option<&[u32]>,
    tol: f64,
    max_work: f64,
    mut profit: P,
) -> Result<AdaptiveResult>
where
    P: FnMut(&MultiIndex) -> Result<(f64, f64)>,
{
    if !(tol > 0.0) {
        return Err(Error::Config(format!("adaptive tolerance must be positive, got {tol}")));
    }
    let mut set = IndexSet::new(floors.clone());
    let root = MultiIndex(floors);
    let (_, w0) = profit(&root)?;
    set.insert(root)?;
    let mut work = w0;
    let mut profits: BTreeMap<MultiIndex, (f64, f64)> = BTreeMap::new();
    loop {
        let margin: Vec<MultiIndex> = set
            .margin()
            .into_iter()
            .filter(|m| caps.is_none_or(|c| m.0.iter().zip(c).all(|(a, b)| a <= b)))
            .collect();
        profits.retain(|k, _| margin.contains(k));
        for m in &margin {
            if !profits.contains_key(m) {
                profits.insert(m.clone(), profit(m)?);
            }
        }
        let error_estimate: f64 = profits.values().map(|p| p.0.abs()).sum();
        if error_estimate <= 0.5 * tol {
            return Ok(AdaptiveResult {
                set,
                error_estimate,
                work,
                converged: true,
            });
        }
        if work >= max_work || profits.is_empty() {
            return Ok(AdaptiveResult {
                set,
                error_estimate,
                work,
                converged: false,
            });
        }
        // BTreeMap iterates in lexicographic order; strict `>` keeps the
        // first among equals
        let mut best: Option<(&MultiIndex, f64)> = None;
        for (m, &(g, w)) in &profits {
            let ratio = g.abs() / w.max(f64::MIN_POSITIVE);
            if best.is_none_or(|(_, r)| ratio > r) {
                best = Some((m, ratio));
            }
        }
        let chosen = best.expect("non-empty margin").0.clone();
        work += profits[&chosen].1;
        profits.remove(&chosen);
        set.insert(chosen)?;
        debug_assert!(set.is_downward_closed());
    }
}
