//! Chamfer and earth mover's distances between point clouds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shape::PointCloud;

pub const EMD_EXACT_MAX: usize = 256;
pub const SINKHORN_EPSILON: f64 = 0.01;
pub const SINKHORN_ITERATIONS: usize = 500;

#[inline]
fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

/// Static 3-d tree for exact nearest squared distances.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    nodes: Vec<KdNode>,
}

#[derive(Debug, Clone, Copy)]
struct KdNode {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl KdTree {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let mut tree = KdTree { points, nodes: Vec::with_capacity(idx.len()) };
        tree.build(&mut idx, 0);
        tree
    }

    fn build(&mut self, idx: &mut [usize], depth: usize) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let pts = &self.points;
        idx.sort_by(|&a, &b| pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b)));
        let mid = idx.len() / 2;
        let node = self.nodes.len();
        self.nodes.push(KdNode { point: idx[mid], axis, left: None, right: None });
        let (lo, rest) = idx.split_at_mut(mid);
        let left = self.build(lo, depth + 1);
        let right = self.build(&mut rest[1..], depth + 1);
        self.nodes[node].left = left;
        self.nodes[node].right = right;
        Some(node)
    }

    /// Smallest squared distance from `q` to any stored point. The value is
    /// the same floating-point number a linear scan would return.
    pub fn nearest_sq(&self, q: [f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        if !self.nodes.is_empty() {
            self.search(0, q, &mut best);
        }
        best
    }

    fn search(&self, node: usize, q: [f64; 3], best: &mut f64) {
        let n = self.nodes[node];
        let p = self.points[n.point];
        let d = sq_dist(q, p);
        if d < *best {
            *best = d;
        }
        let diff = q[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        if let Some(c) = near {
            self.search(c, q, best);
        }
        if let Some(c) = far {
            if diff * diff <= *best {
                self.search(c, q, best);
            }
        }
    }
}

fn check_nonempty(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(())
}

/// Sum of the two directed mean nearest squared distances.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    check_nonempty(a, b)?;
    let (pa, pb) = (a.to_f64(), b.to_f64());
    let (ta, tb) = (KdTree::new(pa.clone()), KdTree::new(pb.clone()));
    let ab: f64 = pa.iter().map(|&p| tb.nearest_sq(p)).sum::<f64>() / pa.len() as f64;
    let ba: f64 = pb.iter().map(|&p| ta.nearest_sq(p)).sum::<f64>() / pb.len() as f64;
    Ok(ab + ba)
}

/// Double-loop reference for [`chamfer`].
pub fn chamfer_brute(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    check_nonempty(a, b)?;
    let (pa, pb) = (a.to_f64(), b.to_f64());
    let directed = |x: &[[f64; 3]], y: &[[f64; 3]]| {
        x.iter().map(|&p| y.iter().fold(f64::INFINITY, |m, &q| m.min(sq_dist(p, q)))).sum::<f64>() / x.len() as f64
    };
    Ok(directed(&pa, &pb) + directed(&pb, &pa))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmdMode {
    /// Exact assignment up to [`EMD_EXACT_MAX`] points, entropic above.
    Auto,
    Exact,
    Sinkhorn,
}

fn cost_matrix(a: &PointCloud, b: &PointCloud) -> (Vec<f64>, usize, usize) {
    let (pa, pb) = (a.to_f64(), b.to_f64());
    let mut c = Vec::with_capacity(pa.len() * pb.len());
    for &p in &pa {
        for &q in &pb {
            c.push(sq_dist(p, q).sqrt());
        }
    }
    (c, pa.len(), pb.len())
}

/// Minimum-cost perfect matching of a square `n x n` cost matrix (shortest
/// augmenting paths with potentials). Returns `assignment[row] = col`.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Exact mean matched Euclidean distance over bijections.
pub fn emd_exact(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    check_nonempty(a, b)?;
    if a.len() != b.len() {
        return Err(Error::SizeMismatch(a.len(), b.len()));
    }
    let (c, n, _) = cost_matrix(a, b);
    let assign = hungarian(&c, n);
    Ok(assign.iter().enumerate().map(|(i, &j)| c[i * n + j]).sum::<f64>() / n as f64)
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn transport cost with uniform marginals. The
/// regularization is annealed geometrically down to `epsilon` over the first
/// half of the iterations and held there for the rest.
pub fn emd_sinkhorn(a: &PointCloud, b: &PointCloud, epsilon: f64, iterations: usize) -> Result<f64> {
    check_nonempty(a, b)?;
    let (c, n, m) = cost_matrix(a, b);
    let (la, lb) = (-(n as f64).ln(), -(m as f64).ln());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let start = c.iter().fold(0.0f64, |x, &y| x.max(y)).max(epsilon);
    let warm = iterations / 2;
    let mut eps = epsilon;
    for it in 0..iterations {
        eps = if it < warm { start * (epsilon / start).powf(it as f64 / warm as f64) } else { epsilon };
        for i in 0..n {
            let row = &c[i * m..(i + 1) * m];
            f[i] = eps * la - eps * logsumexp(row.iter().zip(&g).map(|(&cij, &gj)| (gj - cij) / eps));
        }
        for j in 0..m {
            g[j] = eps * lb - eps * logsumexp((0..n).map(|i| (f[i] - c[i * m + j]) / eps));
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            total += ((f[i] + g[j] - c[i * m + j]) / eps).exp() * c[i * m + j];
        }
    }
    Ok(total)
}

pub fn emd(a: &PointCloud, b: &PointCloud, mode: EmdMode) -> Result<f64> {
    match mode {
        EmdMode::Exact => emd_exact(a, b),
        EmdMode::Sinkhorn => emd_sinkhorn(a, b, SINKHORN_EPSILON, SINKHORN_ITERATIONS),
        EmdMode::Auto if a.len() <= EMD_EXACT_MAX && b.len() <= EMD_EXACT_MAX => emd_exact(a, b),
        EmdMode::Auto => emd_sinkhorn(a, b, SINKHORN_EPSILON, SINKHORN_ITERATIONS),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::seeded_rng;

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut r = seeded_rng(seed);
        PointCloud::from_f64(&(0..n).map(|_| [r.normal(), r.normal(), r.normal()]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn hand_cases() {
        let o = PointCloud::from_f64(&[[0.0, 0.0, 0.0]]).unwrap();
        let x = PointCloud::from_f64(&[[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(chamfer(&o, &x).unwrap(), 2.0);
        let f = PointCloud::from_f64(&[[3.0, 4.0, 0.0]]).unwrap();
        assert_eq!(emd_exact(&o, &f).unwrap(), 5.0);
        let a = PointCloud::from_f64(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let b = PointCloud::from_f64(&[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(emd_exact(&a, &b).unwrap(), 0.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(matches!(emd_exact(&a, &o), Err(Error::SizeMismatch(2, 1))));
    }

    #[test]
    fn kd_tree_equals_brute_force_bitwise() {
        for s in 0..50 {
            let (a, b) = (cloud(20 + s as usize, s), cloud(35, 1000 + s));
            assert_eq!(chamfer(&a, &b).unwrap().to_bits(), chamfer_brute(&a, &b).unwrap().to_bits());
        }
        let dup = PointCloud::from_f64(&[[0.5, 0.5, 0.5]; 9]).unwrap();
        let c = cloud(9, 3);
        assert_eq!(chamfer(&dup, &c).unwrap().to_bits(), chamfer_brute(&dup, &c).unwrap().to_bits());
    }

    #[test]
    fn sinkhorn_is_close_to_exact() {
        let (a, b) = (cloud(120, 8), cloud(120, 9));
        let exact = emd_exact(&a, &b).unwrap();
        let approx = emd_sinkhorn(&a, &b, SINKHORN_EPSILON, SINKHORN_ITERATIONS).unwrap();
        assert!((approx / exact - 1.0).abs() < 0.02, "{approx} vs {exact}");
    }
}
