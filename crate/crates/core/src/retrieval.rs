//! Object-embedding retrieval: an inverted-list index whose coarse quantizer
//! is a streaming k-means with EMA centroid updates, plus exact search,
//! similarity-band filtering and elbow-based choice of `k`.

use std::collections::{HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, FormatError, Result};
use crate::gmm::kmeans_pp_indices;
use crate::grid::ClassId;
use crate::math::{dot, sq_dist};
use crate::samples::Samples;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, FormatError> {
        match code {
            0 => Ok(Modality::Image),
            1 => Ok(Modality::Text),
            other => Err(FormatError::Malformed(format!("modality code {other}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "text" => Ok(Modality::Text),
            other => Err(Error::InvalidInput(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub frame_id: String,
    pub component: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub object_id: u64,
    pub vector: Vec<f32>,
    pub modality: Modality,
    pub provenance: Provenance,
    /// Ground truth, for evaluation only.
    pub label: Option<ClassId>,
}

/// Unit-norm copy of `v`; errors on a zero or non-finite vector.
pub fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    if !crate::math::all_finite(v) {
        return Err(Error::NonFinite("embedding vector".into()));
    }
    let n = crate::math::norm(v);
    if !(n > 0.0) {
        return Err(Error::InvalidInput("zero-length embedding vector".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// `(1 - alpha) * centroid + alpha * x`.
pub fn kmeans_ema_update(centroid: &[f64], x: &[f64], alpha: f64) -> Vec<f64> {
    centroid
        .iter()
        .zip(x)
        .map(|(c, v)| (1.0 - alpha) * c + alpha * v)
        .collect()
}

/// Online k-means state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub k: usize,
    pub alpha: f64,
    pub centroids: Vec<Vec<f64>>,
    pub counts: Vec<u64>,
    pub updates: u64,
}

impl ClusterState {
    pub fn new(k: usize, alpha: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig("alpha must lie in [0, 1]".into()));
        }
        Ok(Self {
            k,
            alpha,
            centroids: Vec::with_capacity(k),
            counts: Vec::with_capacity(k),
            updates: 0,
        })
    }

    pub fn is_seeded(&self) -> bool {
        self.centroids.len() == self.k
    }

    /// Nearest centroid by Euclidean distance, lowest index on ties.
    pub fn nearest(&self, x: &[f64]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (j, c) in self.centroids.iter().enumerate() {
            let d = sq_dist(c, x);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        best.map(|(j, _)| j)
    }

    /// Centroid indices ordered by distance to `x`.
    pub fn ranked(&self, x: &[f64]) -> Vec<usize> {
        let mut order: Vec<(usize, f64)> = self
            .centroids
            .iter()
            .enumerate()
            .map(|(j, c)| (j, sq_dist(c, x)))
            .collect();
        order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        order.into_iter().map(|(j, _)| j).collect()
    }

    /// Seeds a new centroid while fewer than `k` exist, otherwise assigns to
    /// the nearest centroid and applies the EMA update.
    pub fn observe(&mut self, x: &[f64]) -> usize {
        self.updates += 1;
        if !self.is_seeded() {
            self.centroids.push(x.to_vec());
            self.counts.push(1);
            return self.centroids.len() - 1;
        }
        let j = self.nearest(x).expect("seeded state has centroids");
        self.centroids[j] = kmeans_ema_update(&self.centroids[j], x, self.alpha);
        self.counts[j] += 1;
        j
    }
}

/// Streaming k-means: first-`k` seeding and EMA updates, with an optional
/// one-time batch refinement after `k * warmup_per_cluster` observations.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamingKMeans {
    pub state: ClusterState,
    warmup: usize,
    seed: u64,
    buffer: Samples,
    warm: bool,
}

impl StreamingKMeans {
    pub fn new(dim: usize, k: usize, alpha: f64, warmup_per_cluster: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            state: ClusterState::new(k, alpha)?,
            warmup: k * warmup_per_cluster,
            seed,
            buffer: Samples::new(dim),
            warm: warmup_per_cluster == 0 || k == 1,
        })
    }

    pub fn is_warm(&self) -> bool {
        self.warm
    }

    /// Returns the assigned cluster and, when this observation completed the
    /// warm-up, the refined assignment of every buffered observation.
    pub fn observe(&mut self, x: &[f64]) -> (usize, Option<Vec<usize>>) {
        let j = self.state.observe(x);
        if self.warm {
            return (j, None);
        }
        self.buffer.data.extend_from_slice(x);
        if self.buffer.len() < self.warmup {
            return (j, None);
        }
        let result = kmeans(&self.buffer, self.state.k, self.seed, 50);
        let mut counts = vec![0u64; self.state.k];
        for &a in &result.assignment {
            counts[a] += 1;
        }
        self.state.centroids = result.centroids;
        self.state.counts = counts;
        self.buffer = Samples::new(self.buffer.dim);
        self.warm = true;
        let last = *result.assignment.last().expect("non-empty warm-up buffer");
        (last, Some(result.assignment))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexConfig {
    pub k: usize,
    pub alpha: f64,
    /// After `k * warmup_per_cluster` inserts the provisional centroids are
    /// replaced by a batch k-means over the inserted points. Zero disables it.
    pub warmup_per_cluster: usize,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            k: 16,
            alpha: 0.05,
            warmup_per_cluster: 10,
            seed: 0,
        }
    }
}

impl IndexConfig {
    pub fn default_nprobe(&self) -> usize {
        self.k.div_ceil(4).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub object_id: u64,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub hits: Vec<Hit>,
    /// Records whose similarity was evaluated.
    pub scanned: usize,
    pub probed_lists: usize,
}

/// Similarity-ranked object store for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub modality: Modality,
    pub dim: usize,
    pub config: IndexConfig,
    records: Vec<EmbeddingRecord>,
    by_id: HashMap<u64, usize>,
    stream: StreamingKMeans,
    assignment: Vec<usize>,
    lists: Vec<Vec<usize>>,
}

fn rank_hits(hits: &mut Vec<Hit>, n: usize) {
    hits.sort_by(|a, b| b.cosine.total_cmp(&a.cosine).then(a.object_id.cmp(&b.object_id)));
    hits.truncate(n);
}

impl EmbeddingIndex {
    pub fn new(modality: Modality, dim: usize, config: IndexConfig) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("index dimension must be >= 1".into()));
        }
        let stream = StreamingKMeans::new(dim, config.k, config.alpha, config.warmup_per_cluster, config.seed)?;
        Ok(Self {
            modality,
            dim,
            config,
            records: Vec::new(),
            by_id: HashMap::new(),
            stream,
            assignment: Vec::new(),
            lists: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn get(&self, object_id: u64) -> Option<&EmbeddingRecord> {
        self.by_id.get(&object_id).map(|&i| &self.records[i])
    }

    pub fn clusters(&self) -> &ClusterState {
        &self.stream.state
    }

    pub fn cluster_of(&self, object_id: u64) -> Option<usize> {
        self.by_id.get(&object_id).map(|&i| self.assignment[i])
    }

    /// Object ids in each inverted list, in insertion order.
    pub fn cluster_members(&self) -> Vec<Vec<u64>> {
        self.lists
            .iter()
            .map(|l| l.iter().map(|&i| self.records[i].object_id).collect())
            .collect()
    }

    pub fn list_count(&self) -> usize {
        self.lists.len()
    }

    /// Normalizes and stores the record; returns its cluster.
    pub fn insert(&mut self, mut record: EmbeddingRecord) -> Result<usize> {
        check_dim(self.dim, record.vector.len())?;
        if self.by_id.contains_key(&record.object_id) {
            return Err(Error::DuplicateObject(record.object_id));
        }
        if record.modality != self.modality {
            return Err(Error::InvalidInput(format!(
                "{} record inserted into {} index",
                record.modality.as_str(),
                self.modality.as_str()
            )));
        }
        let unit = normalized(&to_f64(&record.vector))?;
        record.vector = unit.iter().map(|&v| v as f32).collect();
        let x = to_f64(&record.vector);
        let (j, refined) = self.stream.observe(&x);
        let idx = self.records.len();
        self.by_id.insert(record.object_id, idx);
        self.records.push(record);
        match refined {
            Some(assignment) => {
                self.lists = vec![Vec::new(); self.config.k];
                for (i, &a) in assignment.iter().enumerate() {
                    self.lists[a].push(i);
                }
                self.assignment = assignment;
            }
            None => {
                if j == self.lists.len() {
                    self.lists.push(Vec::new());
                }
                self.lists[j].push(idx);
                self.assignment.push(j);
            }
        }
        Ok(j)
    }

    fn scan(&self, q: &[f64], indices: impl Iterator<Item = usize>) -> (Vec<Hit>, usize) {
        let mut scanned = 0;
        let hits = indices
            .map(|i| {
                scanned += 1;
                let r = &self.records[i];
                let cos: f64 = r.vector.iter().zip(q).map(|(&v, &z)| v as f64 * z).sum();
                Hit {
                    object_id: r.object_id,
                    cosine: cos.clamp(-1.0, 1.0),
                }
            })
            .collect();
        (hits, scanned)
    }

    /// Exact search restricted to the `nprobe` lists nearest to the query.
    pub fn query_topn(&self, z: &[f64], n: usize, nprobe: usize) -> Result<QueryOutcome> {
        check_dim(self.dim, z.len())?;
        if n == 0 {
            return Err(Error::InvalidInput("n must be >= 1".into()));
        }
        if self.is_empty() {
            return Ok(QueryOutcome { hits: Vec::new(), scanned: 0, probed_lists: 0 });
        }
        let lists = self.lists.len();
        if nprobe == 0 || nprobe > self.config.k {
            return Err(Error::InvalidInput(format!(
                "nprobe {nprobe} outside [1, {}]",
                self.config.k
            )));
        }
        let q = normalized(z)?;
        let probe: Vec<usize> = self.stream.state.ranked(&q).into_iter().take(nprobe.min(lists)).collect();
        let (mut hits, scanned) = self.scan(&q, probe.iter().flat_map(|&j| self.lists[j].iter().copied()));
        rank_hits(&mut hits, n);
        Ok(QueryOutcome { hits, scanned, probed_lists: probe.len() })
    }

    /// Linear scan over every record.
    pub fn exact_topn(&self, z: &[f64], n: usize) -> Result<Vec<Hit>> {
        check_dim(self.dim, z.len())?;
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let q = normalized(z)?;
        let (mut hits, _) = self.scan(&q, 0..self.records.len());
        rank_hits(&mut hits, n);
        Ok(hits)
    }

    /// Rebuilds an index from persisted parts.
    pub(crate) fn from_parts(
        modality: Modality,
        dim: usize,
        config: IndexConfig,
        records: Vec<EmbeddingRecord>,
        clusters: ClusterState,
        assignment: Vec<usize>,
        warm: bool,
    ) -> Result<Self> {
        check_dim(records.len(), assignment.len())?;
        let mut stream = StreamingKMeans::new(dim, config.k, config.alpha, config.warmup_per_cluster, config.seed)?;
        check_dim(config.k, clusters.k)?;
        let mut lists = vec![Vec::new(); clusters.centroids.len()];
        let mut by_id = HashMap::new();
        for (i, (r, &a)) in records.iter().zip(&assignment).enumerate() {
            check_dim(dim, r.vector.len())?;
            lists
                .get_mut(a)
                .ok_or_else(|| Error::InvalidInput(format!("assignment to missing cluster {a}")))?
                .push(i);
            if by_id.insert(r.object_id, i).is_some() {
                return Err(Error::DuplicateObject(r.object_id));
            }
        }
        stream.state = clusters;
        stream.warm = warm;
        if !warm {
            for r in &records {
                stream.buffer.data.extend(r.vector.iter().map(|&v| v as f64));
            }
        }
        Ok(Self { modality, dim, config, records, by_id, stream, assignment, lists })
    }

    pub(crate) fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub(crate) fn is_warm(&self) -> bool {
        self.stream.is_warm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBand {
    pub modality: Modality,
    pub lower: f64,
    pub upper: f64,
}

impl SimilarityBand {
    pub fn new(modality: Modality, lower: f64, upper: f64) -> Result<Self> {
        if !(-1.0 <= lower && lower <= upper && upper <= 1.0) {
            return Err(Error::InvalidConfig(format!("invalid band [{lower}, {upper}]")));
        }
        Ok(Self { modality, lower, upper })
    }

    /// Default band: `[0.7, 1.0]` for image space, `[0.25, 0.38]` for text space.
    pub fn default_for(modality: Modality) -> Self {
        match modality {
            Modality::Image => Self { modality, lower: 0.7, upper: 1.0 },
            Modality::Text => Self { modality, lower: 0.25, upper: 0.38 },
        }
    }

    pub fn contains(&self, cosine: f64) -> bool {
        self.lower <= cosine && cosine <= self.upper
    }
}

pub fn filter_band(results: &[Hit], band: &SimilarityBand) -> Vec<Hit> {
    results.iter().copied().filter(|h| band.contains(h.cosine)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
}

/// Lloyd's algorithm from k-means++ seeding. Empty clusters keep their centroid.
pub fn kmeans(samples: &Samples, k: usize, seed: u64, iterations: usize) -> KMeansResult {
    let n = samples.len();
    let k = k.min(n).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = kmeans_pp_indices(samples, k, &mut rng)
        .into_iter()
        .map(|i| samples.row(i).to_vec())
        .collect();
    let mut assignment = vec![0usize; n];
    for iter in 0..iterations.max(1) {
        let mut changed = false;
        for (i, row) in samples.rows().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centroids.iter().enumerate() {
                let d = sq_dist(row, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            if assignment[i] != best.0 || iter == 0 {
                changed |= assignment[i] != best.0;
                assignment[i] = best.0;
            }
        }
        if iter > 0 && !changed {
            break;
        }
        let mut sums = vec![vec![0.0; samples.dim]; k];
        let mut counts = vec![0usize; k];
        for (row, &a) in samples.rows().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(row) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    let inertia = samples
        .rows()
        .zip(&assignment)
        .map(|(row, &a)| sq_dist(row, &centroids[a]))
        .sum();
    KMeansResult { centroids, assignment, inertia }
}

fn distinct_rows(samples: &Samples) -> usize {
    let set: HashSet<Vec<u64>> = samples
        .rows()
        .map(|r| r.iter().map(|v| v.to_bits()).collect())
        .collect();
    set.len()
}

/// Inertia curve `J(k)` for `k` in `[k_min, k_max]`; best of three seeded restarts.
pub fn inertia_curve(samples: &Samples, k_min: usize, k_max: usize, seed: u64) -> Vec<f64> {
    (k_min..=k_max)
        .map(|k| {
            (0..3)
                .map(|r| kmeans(samples, k, seed.wrapping_add(r * 7919 + k as u64), 50).inertia)
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Picks the knee of the normalized inertia curve by maximal discrete curvature.
pub fn select_k_elbow(samples: &Samples, k_min: usize, k_max: usize, seed: u64) -> Result<usize> {
    if k_min == 0 || k_max < k_min {
        return Err(Error::InvalidConfig(format!("invalid k range [{k_min}, {k_max}]")));
    }
    if samples.is_empty() {
        return Err(Error::Empty("elbow samples"));
    }
    let distinct = distinct_rows(samples);
    if distinct < k_min {
        return Ok(distinct);
    }
    let k_max = k_max.min(distinct);
    if k_max == k_min {
        return Ok(k_min);
    }
    let curve = inertia_curve(samples, k_min, k_max, seed);
    Ok(k_min + knee_index(&curve))
}

/// Index of maximal curvature of a decreasing curve, both axes scaled to `[0, 1]`.
pub fn knee_index(curve: &[f64]) -> usize {
    let top = curve[0];
    if curve.len() < 3 {
        return if curve.len() == 2 && curve[1] < 0.5 * top { 1 } else { 0 };
    }
    if !(top > 0.0) {
        return 0;
    }
    let y: Vec<f64> = curve.iter().map(|v| v / top).collect();
    let h = 1.0 / (y.len() - 1) as f64;
    let mut best = (0, f64::NEG_INFINITY);
    for i in 1..y.len() - 1 {
        let d1 = (y[i + 1] - y[i - 1]) / (2.0 * h);
        let d2 = (y[i + 1] - 2.0 * y[i] + y[i - 1]) / (h * h);
        let kappa = d2 / (1.0 + d1 * d1).powf(1.5);
        if kappa > best.1 {
            best = (i, kappa);
        }
    }
    best.0
}

/// Cosine between two vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = crate::math::norm(a);
    let nb = crate::math::norm(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
    }
}
