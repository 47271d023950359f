//! Evaluation: point cloud distances, set metrics, structure consistency and
//! the combined report.

pub mod distance;
pub mod sets;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ShapeRecord;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::par::worker_count;
use crate::shape::PointCloud;
use crate::synth::code_for;

pub use distance::{chamfer, chamfer_brute, emd, emd_exact, emd_sinkhorn, hungarian, EmdMode, KdTree};
pub use sets::{cov, distance_matrix, jsd, mmd, nna, sca, DistMatrix, Kernel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub emd_mode: EmdMode,
    /// Clouds larger than this are thinned to evenly spaced points before EMD.
    /// `None` keeps every point.
    pub emd_max_points: Option<usize>,
    pub jsd_resolution: usize,
    pub threshold: f64,
    pub workers: Option<usize>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig { emd_mode: EmdMode::Auto, emd_max_points: Some(distance::EMD_EXACT_MAX), jsd_resolution: sets::JSD_RESOLUTION, threshold: 0.5, workers: None }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.jsd_resolution < 2 {
            return Err(Error::InvalidConfig("jsd_resolution must be at least 2".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig("threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn workers(&self) -> usize {
        self.workers.unwrap_or_else(worker_count)
    }
}

/// Evenly spaced subset of at most `k` points.
pub fn thin(cloud: &PointCloud, k: usize) -> PointCloud {
    let n = cloud.len();
    if k == 0 || n <= k {
        return cloud.clone();
    }
    cloud.permuted(&(0..k).map(|i| i * n / k).collect::<Vec<_>>())
}

/// Anything that predicts `(V, E)` for a segmented cloud.
pub trait StructurePredictor {
    fn predict(&self, records: &[&ShapeRecord]) -> Result<Vec<(Vec<bool>, Vec<bool>)>>;
}

/// Returns the stored graph; an upper bound for any learned predictor.
pub struct GroundTruth;

impl StructurePredictor for GroundTruth {
    fn predict(&self, records: &[&ShapeRecord]) -> Result<Vec<(Vec<bool>, Vec<bool>)>> {
        Ok(records.iter().map(|r| (r.graph.existence().to_vec(), r.graph.adjacency().to_vec())).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mmd_cd: f64,
    pub mmd_emd: f64,
    pub cov_cd: f64,
    pub cov_emd: f64,
    pub nna_cd: f64,
    pub nna_emd: f64,
    pub jsd: f64,
    /// Mean SCA of the generated shapes of each structure code.
    pub sca: BTreeMap<String, f64>,
    pub sca_mean: Option<f64>,
    pub n_gen: usize,
    pub n_ref: usize,
}

fn structure_key(r: &ShapeRecord) -> String {
    code_for(r.graph.existence(), r.graph.adjacency()).map(str::to_string).unwrap_or_else(|| {
        if r.structure_code.is_empty() {
            "custom".into()
        } else {
            r.structure_code.clone()
        }
    })
}

/// SCA per structure code, averaged over that code's records.
pub fn sca_by_code(records: &[&ShapeRecord], predictions: &[(Vec<bool>, Vec<bool>)]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (r, (pv, pe)) in records.iter().zip(predictions) {
        let g = &r.graph;
        let s = sca(g.existence(), g.adjacency(), pv, pe, g.m());
        let e = acc.entry(structure_key(r)).or_insert((0.0, 0));
        e.0 += s;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

pub fn evaluate(gen: &[&ShapeRecord], reference: &[&ShapeRecord], predictor: Option<&dyn StructurePredictor>, config: &MetricConfig) -> Result<EvalReport> {
    config.validate()?;
    if gen.is_empty() || reference.is_empty() {
        return Err(Error::EmptySet);
    }
    let w = config.workers();
    let gc: Vec<&PointCloud> = gen.iter().map(|r| &r.cloud).collect();
    let rc: Vec<&PointCloud> = reference.iter().map(|r| &r.cloud).collect();
    let cd = (distance_matrix(&gc, &gc, Kernel::Cd, config.emd_mode, w)?, distance_matrix(&gc, &rc, Kernel::Cd, config.emd_mode, w)?, distance_matrix(&rc, &rc, Kernel::Cd, config.emd_mode, w)?);
    let k = config.emd_max_points.unwrap_or(0);
    let gt: Vec<PointCloud> = gc.iter().map(|c| thin(c, k)).collect();
    let rt: Vec<PointCloud> = rc.iter().map(|c| thin(c, k)).collect();
    let (gt, rt): (Vec<&PointCloud>, Vec<&PointCloud>) = (gt.iter().collect(), rt.iter().collect());
    let em = (distance_matrix(&gt, &gt, Kernel::Emd, config.emd_mode, w)?, distance_matrix(&gt, &rt, Kernel::Emd, config.emd_mode, w)?, distance_matrix(&rt, &rt, Kernel::Emd, config.emd_mode, w)?);
    let (sca, sca_mean) = match predictor {
        Some(p) => {
            let preds = p.predict(gen)?;
            let by_code = sca_by_code(gen, &preds);
            let mean = by_code.values().sum::<f64>() / by_code.len() as f64;
            (by_code, Some(mean))
        }
        None => (BTreeMap::new(), None),
    };
    Ok(EvalReport {
        mmd_cd: mmd(&cd.1)?,
        mmd_emd: mmd(&em.1)?,
        cov_cd: cov(&cd.1)?,
        cov_emd: cov(&em.1)?,
        nna_cd: nna(&cd.0, &cd.1, &cd.2)?,
        nna_emd: nna(&em.0, &em.1, &em.2)?,
        jsd: jsd(&gc, &rc, config.jsd_resolution)?,
        sca,
        sca_mean,
        n_gen: gen.len(),
        n_ref: reference.len(),
    })
}

impl EvalReport {
    /// One header row and one value row, metric columns then per-code SCA.
    pub fn to_csv(&self) -> String {
        let mut head = vec!["method", "MMD-CD", "MMD-EMD", "COV-CD", "COV-EMD", "1-NNA-CD", "1-NNA-EMD", "JSD"].into_iter().map(String::from).collect::<Vec<_>>();
        let mut row = vec!["sgen".to_string()];
        for v in [self.mmd_cd, self.mmd_emd, self.cov_cd, self.cov_emd, self.nna_cd, self.nna_emd, self.jsd] {
            row.push(format!("{v}"));
        }
        for (code, v) in &self.sca {
            head.push(format!("SCA-{code}"));
            row.push(format!("{v}"));
        }
        if let Some(m) = self.sca_mean {
            head.push("SCA-mean".into());
            row.push(format!("{m}"));
        }
        format!("{}\n{}\n", head.join(","), row.join(","))
    }

    /// Writes `report.json` and `report.csv` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("report.json"), &serde_json::to_vec_pretty(self)?)?;
        write_atomic(&dir.join("report.csv"), self.to_csv().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(dir.join("report.json"))?)?)
    }
}
