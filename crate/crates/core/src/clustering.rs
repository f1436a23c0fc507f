//! Cluster assignment from precomputed distances.
//!
//! Backends: average-linkage agglomerative clustering, affinity propagation,
//! and a manifold-approximation transform (UMAP fuzzy weights) applied to a
//! distance matrix before clustering. Several runs can be combined by
//! averaging their distance matrices.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::rng_for;
use crate::error::{Error, Result};
use crate::linalg::{norm, sigmoid};

/// Where a distance matrix came from. Ensembling requires matching sources.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceSource {
    AttnDot,
    AttnCosine,
    EmbeddingCosine,
    Manifold,
}

const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// Square, symmetric, zero-diagonal, non-negative, finite.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    values: Array2<f64>,
    source: DistanceSource,
}

impl DistanceMatrix {
    pub fn new(values: Array2<f64>, source: DistanceSource) -> Result<Self> {
        let (r, c) = values.dim();
        if r != c {
            return Err(Error::Contract(format!("distance matrix is {r}x{c}")));
        }
        for i in 0..r {
            if values[[i, i]] != 0.0 {
                return Err(Error::Data(format!("distance diagonal at {i} is {}", values[[i, i]])));
            }
            for j in 0..i {
                let (a, b) = (values[[i, j]], values[[j, i]]);
                if !a.is_finite() || !b.is_finite() || a < 0.0 || b < 0.0 {
                    return Err(Error::Data(format!("invalid distance at ({i}, {j})")));
                }
                if (a - b).abs() > SYMMETRY_TOLERANCE {
                    return Err(Error::Data(format!("distance matrix asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { values, source })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn source(&self) -> DistanceSource {
        self.source
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    /// Sub-matrix over the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let values = Array2::from_shape_fn((rows.len(), rows.len()), |(a, b)| {
            self.values[[rows[a], rows[b]]]
        });
        Self {
            values,
            source: self.source,
        }
    }
}

/// Fills a symmetric matrix from its strict upper triangle.
fn symmetric_from(n: usize, mut f: impl FnMut(usize, usize) -> Result<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = f(i, j)?;
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    Dot,
    Cosine,
}

/// Pairwise distances from learned queries and keys.
///
/// `Dot`: `1 - (σ(q_i·k_j/√d) + σ(q_j·k_i/√d)) / 2`.
/// `Cosine`: mean of the two query/key cosine distances.
pub fn distance_from_attention(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    variant: AttentionVariant,
) -> Result<DistanceMatrix> {
    if q.dim() != k.dim() {
        return Err(Error::Contract(format!("Q is {:?}, K is {:?}", q.dim(), k.dim())));
    }
    if !q.iter().chain(k.iter()).all(|v| v.is_finite()) {
        return Err(Error::numerics("distance", "non-finite query or key"));
    }
    let n = q.nrows();
    let values = match variant {
        AttentionVariant::Dot => {
            let scale = (q.ncols() as f64).sqrt();
            let logits = q.dot(&k.t()) / scale;
            symmetric_from(n, |i, j| {
                let v = 1.0 - 0.5 * (sigmoid(logits[[i, j]]) + sigmoid(logits[[j, i]]));
                Ok(v.clamp(0.0, 1.0))
            })?
        }
        AttentionVariant::Cosine => {
            let qn = unit_rows(q, "query")?;
            let kn = unit_rows(k, "key")?;
            let cos = qn.dot(&kn.t());
            symmetric_from(n, |i, j| {
                let v = 0.5 * ((1.0 - cos[[i, j]]) + (1.0 - cos[[j, i]]));
                Ok(v.max(0.0))
            })?
        }
    };
    let source = match variant {
        AttentionVariant::Dot => DistanceSource::AttnDot,
        AttentionVariant::Cosine => DistanceSource::AttnCosine,
    };
    DistanceMatrix::new(values, source)
}

fn unit_rows(m: ArrayView2<'_, f64>, what: &str) -> Result<Array2<f64>> {
    let mut out = m.to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let nr = norm(row.view());
        if nr == 0.0 {
            return Err(Error::numerics("distance", format!("{what} row {i} has zero norm")));
        }
        row.mapv_inplace(|v| v / nr);
    }
    Ok(out)
}

/// `1 - cos(x_i, x_j)` over raw embeddings.
pub fn embedding_cosine_distance(x: ArrayView2<'_, f64>) -> Result<DistanceMatrix> {
    let xn = unit_rows(x, "embedding")?;
    let cos = xn.dot(&xn.t());
    let values = symmetric_from(x.nrows(), |i, j| Ok((1.0 - cos[[i, j]]).max(0.0)))?;
    DistanceMatrix::new(values, DistanceSource::EmbeddingCosine)
}

/// A hard partition with contiguous ids `0..k`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clustering {
    assignment: Vec<usize>,
    k: usize,
}

impl Clustering {
    /// Relabels arbitrary ids to `0..k` in order of first appearance.
    pub fn from_labels(raw: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let assignment = raw
            .iter()
            .map(|r| {
                let next = map.len();
                *map.entry(*r).or_insert(next)
            })
            .collect();
        Self {
            assignment,
            k: map.len(),
        }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignment {
            s[a] += 1;
        }
        s
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == cluster)
            .map(|(i, _)| i)
            .collect()
    }

    /// Mean of member rows of `x` per cluster (`k x d`).
    pub fn centroids(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.len() {
            return Err(Error::Contract(format!(
                "{} embedding rows for a clustering of {}",
                x.nrows(),
                self.len()
            )));
        }
        let mut c = Array2::zeros((self.k, x.ncols()));
        for (row, &a) in x.axis_iter(Axis(0)).zip(&self.assignment) {
            let mut target = c.row_mut(a);
            target += &row;
        }
        for (mut row, size) in c.axis_iter_mut(Axis(0)).zip(self.sizes()) {
            row.mapv_inplace(|v| v / size as f64);
        }
        Ok(c)
    }
}

/// Average-linkage (UPGMA) agglomerative clustering down to `k` clusters.
///
/// Each cluster is identified by its smallest member index; among pairs at
/// the minimum linkage distance the lexicographically smallest id pair
/// merges first.
pub fn agglomerative(dist: &DistanceMatrix, k: usize) -> Result<Clustering> {
    let n = dist.n();
    if k == 0 || k > n {
        return Err(Error::Contract(format!("cannot form {k} clusters from {n} points")));
    }
    let mut d: Vec<f64> = dist.values().iter().copied().collect();
    let idx = |i: usize, j: usize| i * n + j;
    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut label: Vec<usize> = (0..n).collect();
    let mut nn = vec![usize::MAX; n];
    let mut nn_dist = vec![f64::INFINITY; n];

    let refresh = |i: usize, d: &[f64], active: &[bool], nn: &mut [usize], nn_dist: &mut [f64]| {
        nn[i] = usize::MAX;
        nn_dist[i] = f64::INFINITY;
        for j in i + 1..n {
            if active[j] && d[idx(i, j)] < nn_dist[i] {
                nn[i] = j;
                nn_dist[i] = d[idx(i, j)];
            }
        }
    };
    for i in 0..n {
        refresh(i, &d, &active, &mut nn, &mut nn_dist);
    }

    let mut clusters = n;
    while clusters > k {
        let mut i = usize::MAX;
        let mut best = f64::INFINITY;
        for a in 0..n {
            if active[a] && nn[a] != usize::MAX && (i == usize::MAX || nn_dist[a] < best) {
                i = a;
                best = nn_dist[a];
            }
        }
        let j = nn[i];
        let (si, sj) = (size[i] as f64, size[j] as f64);
        for m in 0..n {
            if active[m] && m != i && m != j {
                let v = (si * d[idx(i, m)] + sj * d[idx(j, m)]) / (si + sj);
                d[idx(i, m)] = v;
                d[idx(m, i)] = v;
            }
        }
        size[i] += size[j];
        active[j] = false;
        label.iter_mut().filter(|l| **l == j).for_each(|l| *l = i);
        clusters -= 1;

        refresh(i, &d, &active, &mut nn, &mut nn_dist);
        for m in 0..n {
            if !active[m] || m == i {
                continue;
            }
            if nn[m] == i || nn[m] == j {
                refresh(m, &d, &active, &mut nn, &mut nn_dist);
            } else if m < i {
                let v = d[idx(m, i)];
                if v < nn_dist[m] || (v == nn_dist[m] && i < nn[m]) {
                    nn[m] = i;
                    nn_dist[m] = v;
                }
            }
        }
    }
    Ok(Clustering::from_labels(&label))
}

/// Bisection tolerance on `|Σ exp(..) - log₂ k|`.
pub const SIGMA_TOLERANCE: f64 = 1e-9;

/// Solves `Σ_j exp(-max(0, d_j - ρ)/σ) = log₂(k)` for σ, `k = dists.len()`.
///
/// Returns 1 when every neighbour sits at ρ (the weights are all 1 then,
/// whatever σ is).
pub fn solve_sigma(dists: &[f64], rho: f64) -> f64 {
    let target = (dists.len() as f64).log2();
    let excess: Vec<f64> = dists.iter().map(|&d| (d - rho).max(0.0)).collect();
    if excess.iter().all(|&e| e == 0.0) {
        return 1.0;
    }
    let total = |sigma: f64| excess.iter().map(|&e| (-e / sigma).exp()).sum::<f64>();
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut mid = 1.0f64;
    for _ in 0..2000 {
        let value = total(mid);
        if (value - target).abs() <= SIGMA_TOLERANCE {
            break;
        }
        if value > target {
            hi = mid;
            mid = 0.5 * (lo + hi);
        } else {
            lo = mid;
            mid = if hi.is_infinite() { mid * 2.0 } else { 0.5 * (lo + hi) };
        }
        if mid == lo || mid == hi {
            break;
        }
    }
    mid
}

/// UMAP-style fuzzy weights turned back into distances.
///
/// For each point the `k_neighbors` nearest other points (capped at `n - 1`)
/// define ρ (smallest positive neighbour distance) and σ; directed weights
/// `exp(-max(0, d - ρ)/σ)` are symmetrized with `w + w' - w w'` and the
/// result is `1 - w̃`. Exact duplicates (distance 0) get weight 1.
pub fn manifold_weights(dist: &DistanceMatrix, k_neighbors: usize) -> Result<DistanceMatrix> {
    if k_neighbors < 2 {
        return Err(Error::Contract(format!("k_neighbors must be at least 2, got {k_neighbors}")));
    }
    let n = dist.n();
    let k = k_neighbors.min(n.saturating_sub(1));
    let mut w = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let mut others: Vec<(f64, usize)> =
            (0..n).filter(|&j| j != i).map(|j| (dist.get(i, j), j)).collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        others.truncate(k);
        let rho = others
            .iter()
            .map(|&(d, _)| d)
            .find(|&d| d > 0.0)
            .unwrap_or(0.0);
        let ds: Vec<f64> = others.iter().map(|&(d, _)| d).collect();
        let sigma = solve_sigma(&ds, rho);
        for &(d, j) in &others {
            w[[i, j]] = (-(d - rho).max(0.0) / sigma).exp();
        }
    }
    let values = symmetric_from(n, |i, j| {
        let (a, b) = (w[[i, j]], w[[j, i]]);
        Ok((1.0 - (a + b - a * b)).clamp(0.0, 1.0))
    })?;
    DistanceMatrix::new(values, DistanceSource::Manifold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffinityConfig {
    pub damping: f64,
    pub max_iter: usize,
    pub convergence_iter: usize,
    /// Self-similarity; the median off-diagonal similarity when absent.
    pub preference: Option<f64>,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self {
            damping: 0.9,
            max_iter: 1000,
            convergence_iter: 50,
            preference: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffinityResult {
    pub clustering: Clustering,
    pub exemplars: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn argmax_cols(s: &Array2<f64>, row: usize, cols: &[usize]) -> usize {
    let mut best = 0;
    for (c, &col) in cols.iter().enumerate() {
        if s[[row, col]] > s[[row, cols[best]]] {
            best = c;
        }
    }
    best
}

/// Responsibility/availability message passing (Frey & Dueck).
///
/// A fixed-seed jitter of relative size 1e-16 breaks exact ties, so results
/// are reproducible.
pub fn affinity_propagation(similarity: ArrayView2<'_, f64>, config: &AffinityConfig) -> Result<AffinityResult> {
    let n = similarity.nrows();
    if similarity.ncols() != n || n == 0 {
        return Err(Error::Contract(format!("similarity is {:?}", similarity.dim())));
    }
    if !(0.5..1.0).contains(&config.damping) {
        return Err(Error::Contract(format!("damping {} outside [0.5, 1)", config.damping)));
    }
    if !similarity.iter().all(|v| v.is_finite()) {
        return Err(Error::numerics("affinity", "non-finite similarity"));
    }
    let single = |converged| AffinityResult {
        clustering: Clustering::from_labels(&vec![0; n]),
        exemplars: vec![0],
        converged,
        iterations: 0,
    };
    if n == 1 {
        return Ok(single(true));
    }
    let off: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| similarity[[i, j]])
        .collect();
    let preference = config.preference.unwrap_or_else(|| median(off.clone()));
    if off.iter().all(|&v| v == off[0]) {
        // No structure to exploit: either everyone is an exemplar or nobody
        // prefers themselves over the common similarity.
        if preference > off[0] {
            return Ok(AffinityResult {
                clustering: Clustering::from_labels(&(0..n).collect::<Vec<_>>()),
                exemplars: (0..n).collect(),
                converged: true,
                iterations: 0,
            });
        }
        return Ok(single(true));
    }

    let mut s = similarity.to_owned();
    for i in 0..n {
        s[[i, i]] = preference;
    }
    let mut rng = rng_for(0x05ee_da99, 0);
    s.mapv_inplace(|v| v + (f64::EPSILON * v + f64::MIN_POSITIVE * 100.0) * rng.sample::<f64, _>(StandardNormal));

    let lambda = config.damping;
    let mut r = Array2::<f64>::zeros((n, n));
    let mut a = Array2::<f64>::zeros((n, n));
    let conv = config.convergence_iter.max(1);
    let mut history = vec![vec![false; n]; conv];
    let mut converged = false;
    let mut iterations = 0;
    let mut exemplar_flags = vec![false; n];

    for it in 0..config.max_iter {
        iterations = it + 1;
        for i in 0..n {
            let (mut first, mut second, mut arg) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0);
            for k in 0..n {
                let v = a[[i, k]] + s[[i, k]];
                if v > first {
                    second = first;
                    first = v;
                    arg = k;
                } else if v > second {
                    second = v;
                }
            }
            for k in 0..n {
                let m = if k == arg { second } else { first };
                r[[i, k]] = lambda * r[[i, k]] + (1.0 - lambda) * (s[[i, k]] - m);
            }
        }
        for k in 0..n {
            let mut col = 0.0;
            for i in 0..n {
                col += if i == k { r[[i, k]] } else { r[[i, k]].max(0.0) };
            }
            for i in 0..n {
                let own = if i == k { r[[i, k]] } else { r[[i, k]].max(0.0) };
                let mut v = col - own;
                if i != k {
                    v = v.min(0.0);
                }
                a[[i, k]] = lambda * a[[i, k]] + (1.0 - lambda) * v;
            }
        }
        for k in 0..n {
            exemplar_flags[k] = a[[k, k]] + r[[k, k]] > 0.0;
        }
        history[it % conv].clone_from(&exemplar_flags);
        if it + 1 >= conv {
            let stable = (0..n).all(|k| {
                let count = history.iter().filter(|h| h[k]).count();
                count == 0 || count == conv
            });
            if stable && exemplar_flags.iter().any(|&e| e) {
                converged = true;
                break;
            }
        }
    }

    let mut exemplars: Vec<usize> = (0..n).filter(|&k| exemplar_flags[k]).collect();
    if exemplars.is_empty() {
        log::warn!("affinity propagation found no exemplars; returning one cluster");
        let mut res = single(false);
        res.iterations = iterations;
        return Ok(res);
    }
    let assign = |exemplars: &[usize]| -> Vec<usize> {
        let mut c: Vec<usize> = (0..n).map(|i| argmax_cols(&s, i, exemplars)).collect();
        for (e, &x) in exemplars.iter().enumerate() {
            c[x] = e;
        }
        c
    };
    let c = assign(&exemplars);
    for (e, slot) in exemplars.iter_mut().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&i| c[i] == e).collect();
        let mut best = members[0];
        let mut best_sum = f64::NEG_INFINITY;
        for &j in &members {
            let sum: f64 = members.iter().map(|&i| s[[i, j]]).sum();
            if sum > best_sum {
                best_sum = sum;
                best = j;
            }
        }
        *slot = best;
    }
    let c = assign(&exemplars);
    let labels: Vec<usize> = c.iter().map(|&e| exemplars[e]).collect();
    let mut centers = labels.clone();
    centers.sort_unstable();
    centers.dedup();
    let dense: Vec<usize> = labels
        .iter()
        .map(|l| centers.binary_search(l).expect("label is a center"))
        .collect();
    Ok(AffinityResult {
        clustering: Clustering::from_labels(&dense),
        exemplars: centers,
        converged,
        iterations,
    })
}

/// Similarity for affinity propagation: the negated distance (so the
/// symmetrized sigmoid similarity minus one for attention dot distances).
pub fn similarity_from_distance(dist: &DistanceMatrix) -> Array2<f64> {
    dist.values().mapv(|v| -v)
}

/// Elementwise mean of distance matrices from independent runs.
pub fn ensemble(distances: &[DistanceMatrix]) -> Result<DistanceMatrix> {
    let first = distances
        .first()
        .ok_or_else(|| Error::Contract("ensemble of zero runs".into()))?;
    let mut sum = Array2::<f64>::zeros(first.values.raw_dim());
    for d in distances {
        if d.values.dim() != first.values.dim() {
            return Err(Error::Contract(format!(
                "ensemble shapes differ: {:?} vs {:?}",
                d.values.dim(),
                first.values.dim()
            )));
        }
        if d.source != first.source {
            return Err(Error::Contract(format!(
                "ensemble mixes {:?} and {:?} distances",
                first.source, d.source
            )));
        }
        sum += &d.values;
    }
    let values = sum / distances.len() as f64;
    DistanceMatrix::new(values, first.source)
}

#[derive(Serialize, Deserialize)]
struct AssignmentRecord {
    idx: usize,
    cluster: usize,
}

/// One `{"idx": row, "cluster": id}` line per clustered row.
pub fn encode_assignments(rows: &[usize], clustering: &Clustering) -> Result<String> {
    if rows.len() != clustering.len() {
        return Err(Error::Contract(format!(
            "{} row indices for {} assignments",
            rows.len(),
            clustering.len()
        )));
    }
    let mut out = String::new();
    for (&idx, &cluster) in rows.iter().zip(clustering.assignment()) {
        out.push_str(&serde_json::to_string(&AssignmentRecord { idx, cluster }).expect("record serializes"));
        out.push('\n');
    }
    Ok(out)
}

/// Inverse of [`encode_assignments`]; cluster ids are made contiguous.
pub fn decode_assignments(text: &str) -> Result<(Vec<usize>, Clustering)> {
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: AssignmentRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("assignment line {}: {e}", line_no + 1)))?;
        rows.push(r.idx);
        ids.push(r.cluster);
    }
    if rows.is_empty() {
        return Err(Error::Format("assignment file is empty".into()));
    }
    Ok((rows, Clustering::from_labels(&ids)))
}
