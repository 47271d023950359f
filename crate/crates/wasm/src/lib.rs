//! Browser bindings for the demo page. Every export returns JSON text.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use sgen_core::dataset::ShapeRecord;
use sgen_core::metrics::{chamfer, emd, sca, thin, EmdMode};
use sgen_core::structure::{adjacency_from_parts, graph_complexity, DEFAULT_ADJACENCY_THRESHOLD};
use sgen_core::synth::{code_for, sample_chair, GeneratorConfig, CATALOG_CODES};
use sgen_core::{PointCloud, Result};

#[derive(Debug, Serialize)]
pub struct Chair {
    pub code: String,
    /// Flattened `x y z` triples.
    pub points: Vec<f32>,
    pub labels: Vec<usize>,
    pub existence: Vec<bool>,
    pub adjacency: Vec<bool>,
    pub complexity: i64,
}

#[derive(Debug, Serialize)]
pub struct Detection {
    pub existence: Vec<bool>,
    pub adjacency: Vec<bool>,
    /// Catalog code of the detected graph, if any.
    pub code: Option<String>,
    /// Agreement with the requested graph.
    pub sca: f64,
}

#[derive(Debug, Serialize)]
pub struct Distances {
    pub chamfer: f64,
    pub emd: f64,
    /// Points per cloud used for EMD after thinning.
    pub emd_points: usize,
}

pub fn chair(code: &str, n: usize, seed: u64) -> Result<Chair> {
    let cfg = GeneratorConfig { n, ..GeneratorConfig::default() };
    cfg.validate()?;
    let r: ShapeRecord = sample_chair(code, &cfg, &mut sgen_core::diff::seeded_rng(seed))?;
    Ok(Chair {
        code: r.structure_code.clone(),
        points: r.cloud.flat(),
        labels: r.graph.label_indices(),
        existence: r.graph.existence().to_vec(),
        adjacency: r.graph.adjacency().to_vec(),
        complexity: graph_complexity(&r.graph),
    })
}

fn cloud(flat: &[f32]) -> Result<PointCloud> {
    if flat.len() % 3 != 0 {
        return Err(sgen_core::Error::InvalidConfig("coordinate count is not a multiple of 3".into()));
    }
    PointCloud::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Contact graph of a labelled cloud, scored against the requested code.
pub fn detect(flat: &[f32], labels: &[usize], requested: &str, threshold: f64) -> Result<Detection> {
    let c = cloud(flat)?;
    let m = sgen_core::synth::CHAIR_PARTS;
    if labels.len() != c.len() || labels.iter().any(|&l| l >= m) {
        return Err(sgen_core::Error::InvalidConfig("one part index below 4 is needed per point".into()));
    }
    let mut existence = vec![false; m];
    for &l in labels {
        existence[l] = true;
    }
    let adjacency = adjacency_from_parts(&c, labels, m, threshold);
    let want = sgen_core::synth::catalog_entry(requested)?;
    Ok(Detection {
        sca: sca(&want.existence, &want.adjacency, &existence, &adjacency, m),
        code: code_for(&existence, &adjacency).map(str::to_string),
        existence,
        adjacency,
    })
}

pub fn distances(a: &[f32], b: &[f32], emd_points: usize) -> Result<Distances> {
    let (a, b) = (cloud(a)?, cloud(b)?);
    let k = emd_points.min(a.len()).min(b.len());
    let (ta, tb) = (thin(&a, k), thin(&b, k));
    Ok(Distances { chamfer: chamfer(&a, &b)?, emd: emd(&ta, &tb, EmdMode::Auto)?, emd_points: k })
}

fn js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = catalogCodes)]
pub fn catalog_codes() -> String {
    serde_json::to_string(&CATALOG_CODES).expect("codes serialize")
}

#[wasm_bindgen(js_name = generateChair)]
pub fn generate_chair(code: &str, n: usize, seed: u32) -> std::result::Result<String, JsError> {
    js(chair(code, n, u64::from(seed)))
}

#[wasm_bindgen(js_name = detectStructure)]
pub fn detect_structure(points: &[f32], labels: &[u32], requested: &str) -> std::result::Result<String, JsError> {
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    js(detect(points, &labels, requested, DEFAULT_ADJACENCY_THRESHOLD))
}

#[wasm_bindgen(js_name = cloudDistances)]
pub fn cloud_distances(a: &[f32], b: &[f32], emd_points: usize) -> std::result::Result<String, JsError> {
    js(distances(a, b, emd_points))
}
