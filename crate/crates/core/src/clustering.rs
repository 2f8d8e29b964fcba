//! Scalar K-means clustering of model parameters.
//!
//! Values are clustered in one dimension, so optimal clusters are contiguous
//! runs of the sorted data. Lloyd's iteration exploits this: the assignment
//! step is a binary search for `k - 1` boundaries and each cluster is a slice
//! of the sorted buffer. `optimal_kmeans_1d_dp` uses the same property to
//! find the global optimum by dynamic programming and serves as a test oracle.
//!
//! All accumulation (means and SSE) is done in f64 in ascending index order.
//! Every tie resolves to the lower centroid index.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{is_clusterable, ClusteredModel, ClusteredTensor, DenseModel, StoredTensor};
use crate::tensor::Tensor;

/// Largest table addressable by a u8 index.
pub const MAX_CLUSTERS: usize = 256;

/// Below this many clusters reports carry an accuracy warning.
pub const LOW_CLUSTER_WARNING: usize = 16;

/// Sorted, strictly increasing table of FP32 centroids (1 to 256 entries).
///
/// Tables shorter than the requested cluster count only arise when the data
/// has fewer distinct values than that; they then hold exactly those values.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: Vec<f32>,
}

impl Codebook {
    pub fn new(centroids: Vec<f32>) -> Result<Self> {
        if centroids.is_empty() || centroids.len() > MAX_CLUSTERS {
            return Err(Error::Domain(format!(
                "codebook must hold 1..={MAX_CLUSTERS} centroids, got {}",
                centroids.len()
            )));
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain("codebook holds a non-finite centroid".into()));
        }
        if centroids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("codebook centroids must be strictly increasing".into()));
        }
        Ok(Self { centroids })
    }

    /// Sorts, merges duplicates and builds the table.
    pub fn from_unsorted(mut centroids: Vec<f32>) -> Result<Self> {
        centroids.sort_by(f32::total_cmp);
        centroids.dedup();
        Self::new(centroids)
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    /// Size of the table in bytes (4 per centroid).
    pub fn byte_size(&self) -> usize {
        4 * self.centroids.len()
    }

    /// Index of the nearest centroid; on a tie the lower index wins.
    pub fn nearest(&self, v: f32) -> u8 {
        let c = &self.centroids;
        let hi = c.partition_point(|&x| x < v);
        let idx = if hi == 0 {
            0
        } else if hi == c.len() {
            c.len() - 1
        } else {
            let below = f64::from(v) - f64::from(c[hi - 1]);
            let above = f64::from(c[hi]) - f64::from(v);
            if below <= above {
                hi - 1
            } else {
                hi
            }
        };
        idx as u8
    }
}

/// One u8 codebook index per clustered scalar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub indices: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterMode {
    /// One codebook shared by every clusterable tensor.
    EntireModel,
    /// An independent codebook per clusterable tensor.
    PerLayer,
}

impl ClusterMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ClusterMode::EntireModel => "entire-model",
            ClusterMode::PerLayer => "per-layer",
        }
    }
}

impl std::fmt::Display for ClusterMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ClusterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entire-model" | "entire" => Ok(ClusterMode::EntireModel),
            "per-layer" => Ok(ClusterMode::PerLayer),
            other => Err(Error::Config(format!("unknown clustering mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClusteringConfig {
    pub clusters: usize,
    pub mode: ClusterMode,
    pub max_iters: usize,
    /// Stop once the relative SSE improvement of an iteration drops below this.
    pub rel_tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl ClusteringConfig {
    pub fn new(clusters: usize, mode: ClusterMode, seed: u64) -> Self {
        Self {
            clusters,
            mode,
            max_iters: 100,
            rel_tol: 1e-7,
            restarts: 8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLUSTERS).contains(&self.clusters) {
            return Err(Error::Config(format!(
                "cluster count {} outside 2..={MAX_CLUSTERS}",
                self.clusters
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(Error::Config(format!("rel_tol must be >= 0, got {}", self.rel_tol)));
        }
        Ok(())
    }
}

fn check_finite(values: &[f32]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Domain("cannot cluster an empty value list".into()));
    }
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite value at index {pos}")));
    }
    Ok(())
}

fn sorted_f64(values: &[f32]) -> Vec<f64> {
    let mut xs: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
    xs.sort_by(f64::total_cmp);
    xs
}

fn distinct_sorted(xs: &[f64]) -> usize {
    if xs.is_empty() {
        return 0;
    }
    1 + xs.windows(2).filter(|w| w[0] != w[1]).count()
}

pub fn distinct_count(values: &[f32]) -> usize {
    distinct_sorted(&sorted_f64(values))
}

fn kmeanspp_with(values: &[f64], k: usize, rng: &mut Xoshiro256StarStar) -> Vec<f64> {
    let n = values.len();
    let mut seeds = Vec::with_capacity(k);
    let first = values[rng.random_range(0..n as u64) as usize];
    seeds.push(first);
    let mut d2: Vec<f64> = values.iter().map(|&v| (v - first) * (v - first)).collect();
    while seeds.len() < k {
        let total: f64 = d2.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        // r·total can round up to total; fall back to the last positive weight
        let mut pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(n - 1);
        for (i, &w) in d2.iter().enumerate() {
            acc += w;
            if acc > target {
                pick = i;
                break;
            }
        }
        let s = values[pick];
        seeds.push(s);
        for (w, &v) in d2.iter_mut().zip(values) {
            let d = (v - s) * (v - s);
            if d < *w {
                *w = d;
            }
        }
    }
    seeds
}

/// k-means++ seeding driven by xoshiro256** seeded from `seed`.
///
/// The first seed is a uniformly drawn element; each further seed is drawn
/// with probability proportional to its squared distance from the nearest
/// seed chosen so far. Seeds come back in the order they were chosen and are
/// pairwise distinct.
pub fn kmeanspp_init(values: &[f32], k: usize, seed: u64) -> Result<Vec<f32>> {
    check_finite(values)?;
    let distinct = distinct_count(values);
    if k == 0 || k > distinct {
        return Err(Error::Infeasible {
            requested: k,
            distinct,
        });
    }
    let xs: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    Ok(kmeanspp_with(&xs, k, &mut rng)
        .into_iter()
        .map(|v| v as f32)
        .collect())
}

/// Result of [`lloyd_kmeans_1d`].
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub codebook: Codebook,
    pub assignment: ClusterAssignment,
    /// SSE of the returned codebook and assignment, in f64.
    pub sse: f64,
    /// SSE after every assignment step of the winning restart (f64 centroids).
    pub sse_history: Vec<f64>,
}

/// Lloyd state over sorted data: cluster `j` is `xs[starts[j]..starts[j+1]]`.
struct Lloyd<'a> {
    xs: &'a [f64],
    centroids: Vec<f64>,
    bounds: Vec<usize>,
}

impl<'a> Lloyd<'a> {
    fn assign(&mut self) {
        let k = self.centroids.len();
        let xs = self.xs;
        self.bounds.clear();
        self.bounds.push(0);
        for j in 0..k - 1 {
            let (lo, hi) = (self.centroids[j], self.centroids[j + 1]);
            let end = xs.partition_point(|&x| x - lo <= hi - x);
            let prev = *self.bounds.last().unwrap();
            self.bounds.push(end.max(prev));
        }
        self.bounds.push(xs.len());
    }

    fn cluster(&self, j: usize) -> &'a [f64] {
        &self.xs[self.bounds[j]..self.bounds[j + 1]]
    }

    /// Reseeds each empty cluster at the point farthest from its centroid.
    fn repair_empty(&mut self) {
        for _ in 0..self.centroids.len() {
            let Some(empty) = (0..self.centroids.len()).find(|&j| self.cluster(j).is_empty())
            else {
                return;
            };
            let mut far = (f64::NEG_INFINITY, 0.0);
            for j in 0..self.centroids.len() {
                let c = self.centroids[j];
                for &x in self.cluster(j) {
                    let d = (x - c).abs();
                    if d > far.0 {
                        far = (d, x);
                    }
                }
            }
            self.centroids[empty] = far.1;
            self.centroids.sort_by(f64::total_cmp);
            self.assign();
        }
    }

    fn update(&mut self) {
        for j in 0..self.centroids.len() {
            let members = self.cluster(j);
            if !members.is_empty() {
                self.centroids[j] = members.iter().sum::<f64>() / members.len() as f64;
            }
        }
    }

    fn sse(&self) -> f64 {
        let mut total = 0.0;
        for j in 0..self.centroids.len() {
            let c = self.centroids[j];
            total += self.cluster(j).iter().map(|&x| (x - c) * (x - c)).sum::<f64>();
        }
        total
    }
}

fn run_lloyd(xs: &[f64], mut init: Vec<f64>, max_iters: usize, rel_tol: f64) -> (Vec<f64>, Vec<f64>) {
    init.sort_by(f64::total_cmp);
    let mut st = Lloyd {
        xs,
        centroids: init,
        bounds: Vec::new(),
    };
    st.assign();
    st.repair_empty();
    let mut prev = st.sse();
    let mut history = vec![prev];
    for _ in 0..max_iters {
        if prev == 0.0 {
            break;
        }
        st.update();
        st.assign();
        st.repair_empty();
        let sse = st.sse();
        history.push(sse);
        let improvement = prev - sse;
        prev = sse;
        if improvement <= rel_tol * (prev + improvement) {
            break;
        }
    }
    (st.centroids, history)
}

fn assign_and_sse(values: &[f32], codebook: &Codebook) -> (Vec<u8>, f64) {
    let mut sse = 0.0;
    let cents = codebook.centroids();
    let indices = values
        .iter()
        .map(|&v| {
            let i = codebook.nearest(v);
            let d = f64::from(v) - f64::from(cents[i as usize]);
            sse += d * d;
            i
        })
        .collect();
    (indices, sse)
}

/// Lloyd's algorithm on scalars with k-means++ seeding and restarts.
///
/// Each restart draws fresh seeds from the same xoshiro256** stream (seeded
/// once from `cfg.seed`) and iterates until the relative SSE improvement
/// falls below `cfg.rel_tol` or `cfg.max_iters` is reached. The restart with
/// the lowest final SSE wins; the earliest one on a tie. `cfg.mode` is
/// ignored here.
pub fn lloyd_kmeans_1d(values: &[f32], cfg: &ClusteringConfig) -> Result<KMeansFit> {
    cfg.validate()?;
    check_finite(values)?;
    let xs = sorted_f64(values);
    let distinct = distinct_sorted(&xs);
    if cfg.clusters > distinct {
        return Err(Error::Infeasible {
            requested: cfg.clusters,
            distinct,
        });
    }
    let mut rng = Xoshiro256StarStar::seed_from_u64(cfg.seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..cfg.restarts {
        let init = kmeanspp_with(&xs, cfg.clusters, &mut rng);
        let (centroids, history) = run_lloyd(&xs, init, cfg.max_iters, cfg.rel_tol);
        let codebook = Codebook::from_unsorted(centroids.iter().map(|&c| c as f32).collect())?;
        let (indices, sse) = assign_and_sse(values, &codebook);
        if best.as_ref().is_none_or(|b| sse < b.sse) {
            best = Some(KMeansFit {
                codebook,
                assignment: ClusterAssignment { indices },
                sse,
                sse_history: history,
            });
        }
    }
    Ok(best.expect("restarts >= 1"))
}

/// Globally optimal 1-D k-means by dynamic programming over the sorted data.
///
/// `O(k·n²)` time; meant as a test oracle for inputs up to a few thousand
/// values. The returned SSE is measured against the exact f64 group means;
/// the codebook holds those means rounded to f32.
pub fn optimal_kmeans_1d_dp(values: &[f32], k: usize) -> Result<(Codebook, f64)> {
    check_finite(values)?;
    let xs = sorted_f64(values);
    let distinct = distinct_sorted(&xs);
    if k == 0 || k > distinct {
        return Err(Error::Infeasible {
            requested: k,
            distinct,
        });
    }
    let n = xs.len();
    let mut s1 = vec![0.0f64; n + 1];
    let mut s2 = vec![0.0f64; n + 1];
    for (i, &x) in xs.iter().enumerate() {
        s1[i + 1] = s1[i] + x;
        s2[i + 1] = s2[i] + x * x;
    }
    // cost of xs[i..j]
    let cost = |i: usize, j: usize| -> f64 {
        let len = (j - i) as f64;
        let s = s1[j] - s1[i];
        (s2[j] - s2[i] - s * s / len).max(0.0)
    };
    // best[m][j]: minimal cost of xs[..j] in m+1 groups; cut[m][j]: start of last group
    let mut best = vec![vec![f64::INFINITY; n + 1]; k];
    let mut cut = vec![vec![0usize; n + 1]; k];
    for j in 1..=n {
        best[0][j] = cost(0, j);
    }
    for m in 1..k {
        for j in (m + 1)..=n {
            let mut b = f64::INFINITY;
            let mut arg = m;
            for i in m..j {
                let c = best[m - 1][i] + cost(i, j);
                if c < b {
                    b = c;
                    arg = i;
                }
            }
            best[m][j] = b;
            cut[m][j] = arg;
        }
    }
    let mut groups = Vec::with_capacity(k);
    let mut end = n;
    for m in (0..k).rev() {
        let start = if m == 0 { 0 } else { cut[m][end] };
        groups.push(&xs[start..end]);
        end = start;
    }
    groups.reverse();
    let mut sse = 0.0;
    let mut centroids = Vec::with_capacity(k);
    for g in groups {
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        sse += g.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>();
        centroids.push(mean as f32);
    }
    Ok((Codebook::from_unsorted(centroids)?, sse))
}

/// Exact codebook of every distinct value, for inputs that need at most
/// `clusters` entries.
fn exact_codebook(values: &[f32]) -> Result<Codebook> {
    Codebook::from_unsorted(values.to_vec())
}

/// Clusters `values`, falling back to an exact table when the data has no
/// more distinct values than requested. Returns `(codebook, indices, sse, exact)`.
fn cluster_values(values: &[f32], cfg: &ClusteringConfig) -> Result<(Codebook, Vec<u8>, f64, bool)> {
    check_finite(values)?;
    if distinct_count(values) <= cfg.clusters {
        let cb = exact_codebook(values)?;
        let (idx, sse) = assign_and_sse(values, &cb);
        return Ok((cb, idx, sse, true));
    }
    let fit = lloyd_kmeans_1d(values, cfg)?;
    Ok((fit.codebook, fit.assignment.indices, fit.sse, false))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorClusterReport {
    pub name: String,
    pub shape: Vec<usize>,
    pub codebook_len: usize,
    pub sse: f64,
    /// The tensor had no more distinct values than requested clusters and is
    /// represented exactly.
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterReport {
    pub mode: ClusterMode,
    pub clusters: usize,
    pub codebook_count: usize,
    /// Sum of the per-tensor SSE values, in tensor order.
    pub total_sse: f64,
    pub tensors: Vec<TensorClusterReport>,
    pub warnings: Vec<String>,
}

fn tensor_sse(values: &[f32], indices: &[u8], codebook: &Codebook) -> f64 {
    let c = codebook.centroids();
    values
        .iter()
        .zip(indices)
        .map(|(&v, &i)| {
            let d = f64::from(v) - f64::from(c[i as usize]);
            d * d
        })
        .sum()
}

/// Clusters every clusterable tensor of `model` (see [`is_clusterable`]).
///
/// Non-clusterable tensors pass through dense. In per-layer mode tensor `i`
/// (counting clusterable tensors only) is clustered with seed
/// `cfg.seed + i`.
pub fn cluster_model(model: &DenseModel, cfg: &ClusteringConfig) -> Result<(ClusteredModel, ClusterReport)> {
    cfg.validate()?;
    let targets: Vec<usize> = model
        .tensors()
        .iter()
        .enumerate()
        .filter(|(_, t)| is_clusterable(&t.name, t.tensor.shape()))
        .map(|(i, _)| i)
        .collect();
    if targets.is_empty() {
        return Err(Error::Config("model has no clusterable tensors".into()));
    }

    let mut warnings = Vec::new();
    if cfg.clusters < LOW_CLUSTER_WARNING {
        warnings.push(format!(
            "{} clusters is below {LOW_CLUSTER_WARNING}; expect a large accuracy loss",
            cfg.clusters
        ));
    }

    // (codebook, indices, exact) per target, in target order
    let mut clustered: Vec<(Arc<Codebook>, Vec<u8>, bool)> = Vec::with_capacity(targets.len());
    let shared = match cfg.mode {
        ClusterMode::EntireModel => {
            let all: Vec<f32> = targets
                .iter()
                .flat_map(|&i| model.tensors()[i].tensor.data().iter().copied())
                .collect();
            let (cb, indices, _, exact) = cluster_values(&all, cfg)?;
            let cb = Arc::new(cb);
            let mut offset = 0;
            for &i in &targets {
                let len = model.tensors()[i].tensor.len();
                clustered.push((cb.clone(), indices[offset..offset + len].to_vec(), exact));
                offset += len;
            }
            Some(cb)
        }
        ClusterMode::PerLayer => {
            for (pos, &i) in targets.iter().enumerate() {
                let sub = ClusteringConfig {
                    seed: cfg.seed.wrapping_add(pos as u64),
                    ..*cfg
                };
                let (cb, indices, _, exact) = cluster_values(model.tensors()[i].tensor.data(), &sub)?;
                clustered.push((Arc::new(cb), indices, exact));
            }
            None
        }
    };

    let mut reports = Vec::with_capacity(targets.len());
    let mut stored = Vec::with_capacity(model.tensors().len());
    let mut next = clustered.into_iter();
    for nt in model.tensors() {
        if !is_clusterable(&nt.name, nt.tensor.shape()) {
            stored.push(StoredTensor::Dense(nt.clone()));
            continue;
        }
        let (cb, indices, exact) = next.next().expect("one result per target");
        let sse = tensor_sse(nt.tensor.data(), &indices, &cb);
        if exact {
            warnings.push(format!(
                "{}: fewer distinct values than clusters, stored with an exact {}-entry codebook",
                nt.name,
                cb.len()
            ));
        }
        reports.push(TensorClusterReport {
            name: nt.name.clone(),
            shape: nt.tensor.shape().to_vec(),
            codebook_len: cb.len(),
            sse,
            exact,
        });
        stored.push(StoredTensor::Clustered(ClusteredTensor::new(
            nt.name.clone(),
            nt.tensor.shape().to_vec(),
            cb,
            indices,
        )?));
    }

    let out = ClusteredModel::new(cfg.mode, shared, stored)?;
    let report = ClusterReport {
        mode: cfg.mode,
        clusters: cfg.clusters,
        codebook_count: out.codebook_count(),
        total_sse: reports.iter().map(|r| r.sse).sum(),
        tensors: reports,
        warnings,
    };
    Ok((out, report))
}

/// Reconstructs the FP32 tensor by table lookup.
pub fn dequantize_tensor(t: &ClusteredTensor) -> Result<Tensor> {
    let c = t.codebook.centroids();
    let data = t
        .indices
        .iter()
        .map(|&i| {
            c.get(i as usize).copied().ok_or_else(|| {
                Error::Corrupt(format!(
                    "{}: index {i} out of range for codebook of {}",
                    t.name,
                    c.len()
                ))
            })
        })
        .collect::<Result<Vec<f32>>>()?;
    Tensor::new(t.shape.clone(), data)
}

/// Dense copy of a clustered model.
pub fn dequantize_model(model: &ClusteredModel) -> Result<DenseModel> {
    let tensors = model
        .tensors()
        .iter()
        .map(|t| match t {
            StoredTensor::Dense(nt) => Ok(nt.clone()),
            StoredTensor::Clustered(ct) => Ok(crate::model::NamedTensor::new(
                ct.name.clone(),
                dequantize_tensor(ct)?,
            )),
        })
        .collect::<Result<Vec<_>>>()?;
    DenseModel::new(tensors)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorError {
    pub name: String,
    pub clustered: bool,
    pub sse: f64,
    pub max_abs_err: f64,
    pub mean_abs_err: f64,
}

/// Per-tensor reconstruction error of `clustered` against `dense`, in f64.
pub fn quantization_report(dense: &DenseModel, clustered: &ClusteredModel) -> Result<Vec<TensorError>> {
    if dense.tensors().len() != clustered.tensors().len() {
        return Err(Error::Graph(format!(
            "dense model has {} tensors, clustered model {}",
            dense.tensors().len(),
            clustered.tensors().len()
        )));
    }
    dense
        .tensors()
        .iter()
        .zip(clustered.tensors())
        .map(|(d, c)| {
            if d.name != c.name() || d.tensor.shape() != c.shape() {
                return Err(Error::Graph(format!(
                    "tensor mismatch: {} {:?} vs {} {:?}",
                    d.name,
                    d.tensor.shape(),
                    c.name(),
                    c.shape()
                )));
            }
            let (is_clustered, approx) = match c {
                StoredTensor::Dense(nt) => (false, nt.tensor.clone()),
                StoredTensor::Clustered(ct) => (true, dequantize_tensor(ct)?),
            };
            let sse = match c {
                StoredTensor::Clustered(ct) => tensor_sse(d.tensor.data(), &ct.indices, &ct.codebook),
                StoredTensor::Dense(_) => tensor_sse_dense(d.tensor.data(), approx.data()),
            };
            let mut max_abs = 0.0f64;
            let mut sum_abs = 0.0f64;
            for (&a, &b) in d.tensor.data().iter().zip(approx.data()) {
                let e = (f64::from(a) - f64::from(b)).abs();
                max_abs = max_abs.max(e);
                sum_abs += e;
            }
            Ok(TensorError {
                name: d.name.clone(),
                clustered: is_clustered,
                sse,
                max_abs_err: max_abs,
                mean_abs_err: sum_abs / d.tensor.len() as f64,
            })
        })
        .collect()
}

fn tensor_sse_dense(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}
