//! Set-level generation metrics over precomputed distance matrices.

use serde::{Deserialize, Serialize};

use super::distance::{chamfer, emd, EmdMode};
use crate::error::{Error, Result};
use crate::par::par_map;
use crate::shape::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Cd,
    Emd,
}

/// Row-major `rows x cols` matrix of pairwise distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DistMatrix {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DistMatrix { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn transpose(&self) -> DistMatrix {
        DistMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }
}

pub fn pair_distance(a: &PointCloud, b: &PointCloud, kernel: Kernel, emd_mode: EmdMode) -> Result<f64> {
    match kernel {
        Kernel::Cd => chamfer(a, b),
        Kernel::Emd => emd(a, b, emd_mode),
    }
}

/// All pairwise distances, computed by `workers` threads.
pub fn distance_matrix(a: &[&PointCloud], b: &[&PointCloud], kernel: Kernel, emd_mode: EmdMode, workers: usize) -> Result<DistMatrix> {
    let cols = b.len();
    let data = par_map(a.len() * cols, workers, |k| pair_distance(a[k / cols], b[k % cols], kernel, emd_mode));
    Ok(DistMatrix { rows: a.len(), cols, data: data.into_iter().collect::<Result<_>>()? })
}

/// Index of the smallest entry; ties go to the lower index.
fn argmin(xs: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, x) in xs.enumerate() {
        if best.is_none_or(|(_, b)| x < b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i)
}

/// `gen_ref` is `|gen| x |ref|`. Mean over reference clouds of the distance
/// to the closest generated cloud.
pub fn mmd(gen_ref: &DistMatrix) -> Result<f64> {
    if gen_ref.rows == 0 || gen_ref.cols == 0 {
        return Err(Error::EmptySet);
    }
    let total: f64 = (0..gen_ref.cols).map(|r| (0..gen_ref.rows).map(|g| gen_ref.get(g, r)).fold(f64::INFINITY, f64::min)).sum();
    Ok(total / gen_ref.cols as f64)
}

/// Fraction of reference clouds that are the nearest reference of at least
/// one generated cloud.
pub fn cov(gen_ref: &DistMatrix) -> Result<f64> {
    if gen_ref.rows == 0 || gen_ref.cols == 0 {
        return Err(Error::EmptySet);
    }
    let mut hit = vec![false; gen_ref.cols];
    for g in 0..gen_ref.rows {
        let r = argmin((0..gen_ref.cols).map(|r| gen_ref.get(g, r))).expect("non-empty");
        hit[r] = true;
    }
    Ok(hit.iter().filter(|&&h| h).count() as f64 / gen_ref.cols as f64)
}

/// Leave-one-out 1-NN accuracy over the union of both sets, indexed
/// generated-first. Ties go to the lower union index.
pub fn nna(gen_gen: &DistMatrix, gen_ref: &DistMatrix, ref_ref: &DistMatrix) -> Result<f64> {
    let (g, r) = (gen_ref.rows, gen_ref.cols);
    if g + r < 2 || g == 0 || r == 0 {
        return Err(Error::EmptySet);
    }
    let d = |i: usize, j: usize| match (i < g, j < g) {
        (true, true) => gen_gen.get(i, j),
        (true, false) => gen_ref.get(i, j - g),
        (false, true) => gen_ref.get(j, i - g),
        (false, false) => ref_ref.get(i - g, j - g),
    };
    let n = g + r;
    let mut correct = 0;
    for i in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for j in (0..n).filter(|&j| j != i) {
            let x = d(i, j);
            if best.is_none_or(|(_, b)| x < b) {
                best = Some((j, x));
            }
        }
        let (j, _) = best.expect("at least two samples");
        if (i < g) == (j < g) {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

pub const JSD_RESOLUTION: usize = 28;
pub const JSD_BOUND: f64 = 3.0;

/// Normalized occupancy histogram of every point over `[-3, 3]^3`; points
/// outside the box land in the boundary voxels.
pub fn occupancy(set: &[&PointCloud], resolution: usize) -> Vec<f64> {
    let mut h = vec![0.0; resolution.pow(3)];
    let mut total = 0.0;
    let cell = |x: f64| (((x + JSD_BOUND) / (2.0 * JSD_BOUND) * resolution as f64).floor().max(0.0) as usize).min(resolution - 1);
    for c in set {
        for i in 0..c.len() {
            let p = c.point(i);
            h[(cell(p[0]) * resolution + cell(p[1])) * resolution + cell(p[2])] += 1.0;
            total += 1.0;
        }
    }
    for x in &mut h {
        *x /= total;
    }
    h
}

/// Jensen-Shannon divergence of two distributions in nats.
pub fn jsd_histograms(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        total += 0.5 * kl(a, m) + 0.5 * kl(b, m);
    }
    total.max(0.0)
}

pub fn jsd(gen: &[&PointCloud], reference: &[&PointCloud], resolution: usize) -> Result<f64> {
    if gen.is_empty() || reference.is_empty() {
        return Err(Error::EmptySet);
    }
    if resolution < 2 {
        return Err(Error::InvalidConfig("voxel resolution must be at least 2".into()));
    }
    Ok(jsd_histograms(&occupancy(gen, resolution), &occupancy(reference, resolution)))
}

/// Structure consistency: fraction of the `m^2` ordered part pairs `(j, k)`
/// with both `v_j` and `e_jk` predicted correctly.
pub fn sca(input_v: &[bool], input_e: &[bool], pred_v: &[bool], pred_e: &[bool], m: usize) -> f64 {
    let mut hits = 0;
    for j in 0..m {
        for k in 0..m {
            if input_v[j] == pred_v[j] && input_e[j * m + k] == pred_e[j * m + k] {
                hits += 1;
            }
        }
    }
    hits as f64 / (m * m) as f64
}
