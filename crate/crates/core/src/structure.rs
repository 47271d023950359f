//! Part segmentation, existence and adjacency: the StructureGraph of a shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, GraphViolation, Result};
use crate::shape::PointCloud;

/// Contact threshold used to derive adjacency from normalized geometry.
pub const DEFAULT_ADJACENCY_THRESHOLD: f64 = 0.05;

/// Per-point one-hot segmentation `S` (`n x m`, stored row-major as 0/1 bytes),
/// part existence `V` and symmetric part adjacency `E`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureGraph {
    m: usize,
    labels: Vec<u8>,
    existence: Vec<bool>,
    adjacency: Vec<bool>,
}

impl StructureGraph {
    /// Builds a graph from raw matrices. Only dimensions are checked here;
    /// use [`validate_structuregraph`] for the semantic invariants.
    pub fn from_parts(labels: Vec<u8>, existence: Vec<bool>, adjacency: Vec<bool>) -> Result<Self> {
        let m = existence.len();
        if m == 0 {
            return Err(Error::InvalidConfig("part count must be at least 1".into()));
        }
        if adjacency.len() != m * m {
            return Err(Error::InvalidConfig(format!("adjacency has {} entries, expected {}", adjacency.len(), m * m)));
        }
        if labels.len() % m != 0 {
            return Err(Error::InvalidConfig(format!("label matrix length {} is not a multiple of m={m}", labels.len())));
        }
        Ok(StructureGraph { m, labels, existence, adjacency })
    }

    /// One-hot labels from per-point part indices.
    pub fn from_indices(indices: &[usize], existence: Vec<bool>, adjacency: Vec<bool>) -> Result<Self> {
        let m = existence.len();
        let mut labels = vec![0u8; indices.len() * m];
        for (i, &j) in indices.iter().enumerate() {
            if j >= m {
                return Err(Error::InvalidConfig(format!("label {j} out of range for m={m}")));
            }
            labels[i * m + j] = 1;
        }
        Self::from_parts(labels, existence, adjacency)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of label rows.
    pub fn n(&self) -> usize {
        self.labels.len() / self.m
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label_row(&self, i: usize) -> &[u8] {
        &self.labels[i * self.m..(i + 1) * self.m]
    }

    /// Part index of point `i` if its row is one-hot.
    pub fn label_of(&self, i: usize) -> Option<usize> {
        let row = self.label_row(i);
        let mut found = None;
        for (j, &x) in row.iter().enumerate() {
            match x {
                0 => {}
                1 if found.is_none() => found = Some(j),
                _ => return None,
            }
        }
        found
    }

    /// Part index per point. Panics on a non-one-hot row; call on validated graphs.
    pub fn label_indices(&self) -> Vec<usize> {
        (0..self.n()).map(|i| self.label_of(i).expect("one-hot label row")).collect()
    }

    pub fn existence(&self) -> &[bool] {
        &self.existence
    }

    pub fn exists(&self, j: usize) -> bool {
        self.existence[j]
    }

    pub fn adjacency(&self) -> &[bool] {
        &self.adjacency
    }

    pub fn edge(&self, j: usize, k: usize) -> bool {
        self.adjacency[j * self.m + k]
    }

    pub fn part_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.m];
        for i in 0..self.n() {
            for (j, &x) in self.label_row(i).iter().enumerate() {
                if x == 1 {
                    counts[j] += 1;
                }
            }
        }
        counts
    }

    /// Same `V` and `E` with a different segmentation.
    pub fn with_labels(&self, labels: Vec<u8>) -> Result<Self> {
        Self::from_parts(labels, self.existence.clone(), self.adjacency.clone())
    }

    /// Reorders label rows to follow a point permutation.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut labels = Vec::with_capacity(perm.len() * self.m);
        for &i in perm {
            labels.extend_from_slice(self.label_row(i));
        }
        StructureGraph { m: self.m, labels, existence: self.existence.clone(), adjacency: self.adjacency.clone() }
    }
}

/// Checks every StructureGraph invariant and that there are `n` label rows.
pub fn validate_structuregraph(graph: &StructureGraph, n: usize) -> Result<()> {
    let m = graph.m;
    let fail = |v| Err(Error::InvalidGraph(v));
    for i in 0..graph.n() {
        if graph.label_of(i).is_none() {
            return fail(GraphViolation::NonOnehotRow);
        }
    }
    for i in 0..graph.n() {
        let j = graph.label_of(i).expect("checked");
        if !graph.existence[j] {
            return fail(GraphViolation::LabelOnAbsentPart);
        }
    }
    for j in 0..m {
        for k in 0..m {
            if graph.edge(j, k) != graph.edge(k, j) {
                return fail(GraphViolation::AsymmetricE);
            }
        }
    }
    if (0..m).any(|j| graph.edge(j, j)) {
        return fail(GraphViolation::SelfLoop);
    }
    for j in 0..m {
        for k in 0..m {
            if graph.edge(j, k) && !(graph.existence[j] && graph.existence[k]) {
                return fail(GraphViolation::EdgeOnAbsentPart);
            }
        }
    }
    if graph.n() != n {
        return fail(GraphViolation::RowCountMismatch);
    }
    Ok(())
}

/// Part index per point when no segmentation is given: existing parts get
/// contiguous blocks in ascending part order, sizes differing by at most one,
/// with the extra points going to the lowest-indexed existing parts.
pub fn default_segmentation_indices(n: usize, existence: &[bool]) -> Result<Vec<usize>> {
    let parts: Vec<usize> = existence.iter().enumerate().filter(|(_, &v)| v).map(|(j, _)| j).collect();
    if parts.is_empty() {
        return Err(Error::NoExistingPart);
    }
    let (base, extra) = (n / parts.len(), n % parts.len());
    let mut out = Vec::with_capacity(n);
    for (rank, &j) in parts.iter().enumerate() {
        let size = base + usize::from(rank < extra);
        out.extend(std::iter::repeat_n(j, size));
    }
    Ok(out)
}

/// One-hot `n x m` label matrix produced by the equal-distribution rule.
pub fn default_segmentation(n: usize, existence: &[bool]) -> Result<Vec<u8>> {
    let m = existence.len();
    let idx = default_segmentation_indices(n, existence)?;
    let mut labels = vec![0u8; n * m];
    for (i, j) in idx.into_iter().enumerate() {
        labels[i * m + j] = 1;
    }
    Ok(labels)
}

fn dist2(a: [f32; 3], b: [f32; 3]) -> f64 {
    (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum()
}

/// Minimum Euclidean distance between the points of each pair of parts,
/// `None` when either part is empty.
pub fn part_min_distances(cloud: &PointCloud, labels: &[usize], m: usize) -> Vec<Option<f64>> {
    let mut groups: Vec<Vec<[f32; 3]>> = vec![Vec::new(); m];
    for (p, &j) in cloud.points().iter().zip(labels) {
        groups[j].push(*p);
    }
    let mut out = vec![None; m * m];
    for j in 0..m {
        for k in j + 1..m {
            if groups[j].is_empty() || groups[k].is_empty() {
                continue;
            }
            let mut best = f64::INFINITY;
            for &a in &groups[j] {
                for &b in &groups[k] {
                    best = best.min(dist2(a, b));
                }
            }
            out[j * m + k] = Some(best.sqrt());
            out[k * m + j] = Some(best.sqrt());
        }
    }
    out
}

/// Two parts are adjacent iff both are non-empty and their closest points
/// are within `threshold`.
pub fn adjacency_from_parts(cloud: &PointCloud, labels: &[usize], m: usize, threshold: f64) -> Vec<bool> {
    assert!(threshold > 0.0, "threshold must be positive");
    assert_eq!(cloud.len(), labels.len());
    let t2 = threshold * threshold;
    let mut groups: Vec<Vec<[f32; 3]>> = vec![Vec::new(); m];
    for (p, &j) in cloud.points().iter().zip(labels) {
        groups[j].push(*p);
    }
    let mut adj = vec![false; m * m];
    for j in 0..m {
        for k in j + 1..m {
            let touch = groups[j].iter().any(|&a| groups[k].iter().any(|&b| dist2(a, b) <= t2));
            adj[j * m + k] = touch;
            adj[k * m + j] = touch;
        }
    }
    adj
}

/// Cyclomatic complexity `edges - nodes + 2 * components` over existing parts.
pub fn graph_complexity(graph: &StructureGraph) -> i64 {
    let m = graph.m;
    let nodes: Vec<usize> = (0..m).filter(|&j| graph.existence[j]).collect();
    if nodes.is_empty() {
        return 0;
    }
    let mut parent: Vec<usize> = (0..m).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut c = x;
        while p[c] != r {
            let next = p[c];
            p[c] = r;
            c = next;
        }
        r
    }
    let mut edges = 0i64;
    for &j in &nodes {
        for &k in &nodes {
            if j < k && graph.edge(j, k) {
                edges += 1;
                let (a, b) = (find(&mut parent, j), find(&mut parent, k));
                parent[a] = b;
            }
        }
    }
    let mut roots: Vec<usize> = nodes.iter().map(|&j| find(&mut parent, j)).collect();
    roots.sort_unstable();
    roots.dedup();
    edges - nodes.len() as i64 + 2 * roots.len() as i64
}

/// Symmetric adjacency vector from an undirected edge list.
pub fn adjacency_from_edges(m: usize, edges: &[(usize, usize)]) -> Vec<bool> {
    let mut adj = vec![false; m * m];
    for &(j, k) in edges {
        adj[j * m + k] = true;
        adj[k * m + j] = true;
    }
    adj
}
