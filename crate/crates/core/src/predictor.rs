//! Adjacency predictor: a frozen encoder followed by a small fully connected
//! head that reads `V` and `E` back from a segmented cloud.
//!
//! The encoder sees a neutral graph (existence from the labels, no edges), so
//! every part is encoded from its own points and the head has to infer
//! contacts from geometry alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ShapeRecord;
use crate::diff::{adam_step_where, load_checkpoint, save_checkpoint, seeded_rng, AdamConfig, AdamState, Bound, Mat, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::StructurePredictor;
use crate::nn::Linear;
use crate::sgn::{GraphBatch, Sgn, SgnConfig};
use crate::structure::StructureGraph;

pub const PREDICTOR_GATE: f64 = 0.95;
const PREDICTOR_KIND: &str = "adjacency-predictor";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub hidden: usize,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    pub gate: f64,
    /// Permute the targets across training shapes (negative control).
    pub shuffle_targets: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig { hidden: 128, iterations: 1500, lr: 3e-3, seed: 0, gate: PREDICTOR_GATE, shuffle_targets: false }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.iterations == 0 {
            return Err(Error::InvalidConfig("predictor hidden width and iterations must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.gate) {
            return Err(Error::InvalidConfig("predictor lr must be positive and gate in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub final_loss: f64,
    pub gate: f64,
}

impl PredictorReport {
    pub fn passes(&self) -> bool {
        self.heldout_accuracy >= self.gate
    }

    pub fn check_gate(&self) -> Result<()> {
        if self.passes() {
            Ok(())
        } else {
            Err(Error::UndertrainedPredictor { accuracy: self.heldout_accuracy, gate: self.gate })
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictorMeta {
    kind: String,
    sgn: SgnConfig,
    config: PredictorConfig,
    report: PredictorReport,
}

#[derive(Debug, Clone)]
pub struct AdjacencyPredictor {
    pub sgn: Sgn,
    pub config: PredictorConfig,
    pub report: PredictorReport,
    store: ParamStore<f32>,
    shift: ParamId,
    scale: ParamId,
    hidden: Linear,
    out: Linear,
}

/// Existence from the labels and no edges.
pub fn neutral_graph(labels: &[usize], m: usize) -> Result<StructureGraph> {
    let mut v = vec![false; m];
    for &l in labels {
        if l >= m {
            return Err(Error::InvalidConfig(format!("label {l} out of range for {m} parts")));
        }
        v[l] = true;
    }
    StructureGraph::from_indices(labels, v, vec![false; m * m])
}

/// Turns `m + m*m` logits into `(V, E)`: the edge logits are symmetrized,
/// the diagonal is dropped, everything is thresholded with `sigmoid > 0.5`
/// and edges touching a predicted-absent part are cleared.
pub fn decode_logits(logits: &[f64], m: usize) -> (Vec<bool>, Vec<bool>) {
    let on = |x: f64| 1.0 / (1.0 + (-x).exp()) > 0.5;
    let v: Vec<bool> = logits[..m].iter().map(|&x| on(x)).collect();
    let l = &logits[m..m + m * m];
    let mut e = vec![false; m * m];
    for j in 0..m {
        for k in 0..m {
            if j != k && v[j] && v[k] {
                e[j * m + k] = on(0.5 * (l[j * m + k] + l[k * m + j]));
            }
        }
    }
    (v, e)
}

fn targets(records: &[&ShapeRecord], m: usize) -> Vec<Vec<f64>> {
    records
        .iter()
        .map(|r| {
            let g = &r.graph;
            g.existence().iter().chain(g.adjacency()).map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>()
        })
        .inspect(|t| debug_assert_eq!(t.len(), m + m * m))
        .collect()
}

/// Fraction of matching `V` and `E` entries over all shapes.
pub fn entry_accuracy(records: &[&ShapeRecord], predictions: &[(Vec<bool>, Vec<bool>)]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (r, (v, e)) in records.iter().zip(predictions) {
        let g = &r.graph;
        for (a, b) in g.existence().iter().chain(g.adjacency()).zip(v.iter().chain(e)) {
            hits += usize::from(a == b);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Flattened encoder node features, one `m * width` row per record.
fn encode(sgn: &Sgn, store: &ParamStore<f32>, records: &[&ShapeRecord]) -> Result<Mat<f32>> {
    let m = sgn.config.m;
    let graphs = records.iter().map(|r| neutral_graph(&r.graph.label_indices(), m)).collect::<Result<Vec<_>>>()?;
    let width = m * sgn.config.node_output_width();
    let mut out = Vec::with_capacity(records.len() * width);
    // chunks keep the block-diagonal attention mask small
    for (rs, gs) in records.chunks(32).zip(graphs.chunks(32)) {
        let items: Vec<_> = rs.iter().zip(gs).map(|(r, g)| (&r.cloud, g)).collect();
        let batch = GraphBatch::new(&items)?;
        let mut t = Tape::new();
        let p = store.bind_frozen(&mut t);
        let h = sgn.node_features(&mut t, &p, &batch);
        out.extend_from_slice(t.value(h).data());
    }
    let feats = Mat::from_vec(records.len(), width, out);
    if !feats.is_finite() {
        return Err(Error::NonfiniteState("encoder features".into()));
    }
    Ok(feats)
}

impl AdjacencyPredictor {
    fn build(sgn: &Sgn, store: &ParamStore<f32>, config: &PredictorConfig) -> Result<Self> {
        config.validate()?;
        let m = sgn.config.m;
        let width = m * sgn.config.node_output_width();
        let mut own = ParamStore::new();
        let mut rng = seeded_rng(config.seed);
        let sgn = Sgn::new(&mut own, &sgn.config, &mut rng.fork())?;
        let copied = own.load_from(store)?;
        if copied != own.len() {
            return Err(Error::CheckpointMismatch(format!("encoder store supplies {copied} of {} parameters", own.len())));
        }
        let shift = own.register("predictor/shift", Mat::zeros(1, width));
        let scale = own.register("predictor/scale", Mat::filled(1, width, 1.0));
        let hidden = Linear::new(&mut own, "predictor/hidden", width, config.hidden, true, &mut rng);
        let out = Linear::new(&mut own, "predictor/out", config.hidden, m + m * m, true, &mut rng);
        let report = PredictorReport { train_accuracy: 0.0, heldout_accuracy: 0.0, final_loss: f64::NAN, gate: config.gate };
        Ok(AdjacencyPredictor { sgn, config: config.clone(), report, store: own, shift, scale, hidden, out })
    }

    fn head(&self, t: &mut Tape<f32>, p: &Bound, x: Var) -> Var {
        let x = t.add_row(x, p.var(self.shift));
        let x = t.mul_row(x, p.var(self.scale));
        let h = self.hidden.forward(t, p, x);
        let h = t.silu(h);
        self.out.forward(t, p, h)
    }

    /// Head logits for precomputed features, `B x (m + m*m)`.
    fn logits(&self, feats: &Mat<f32>) -> Mat<f32> {
        let mut t = Tape::new();
        let p = self.store.bind_frozen(&mut t);
        let x = t.constant(feats.clone());
        let y = self.head(&mut t, &p, x);
        t.value(y).clone()
    }

    fn decode_all(&self, logits: &Mat<f32>) -> Vec<(Vec<bool>, Vec<bool>)> {
        let m = self.sgn.config.m;
        (0..logits.rows()).map(|i| decode_logits(&logits.row(i).iter().map(|&x| f64::from(x)).collect::<Vec<_>>(), m)).collect()
    }

    /// Trains the head on `train` with the encoder in `store` frozen, then
    /// scores both splits. The gate is reported, not enforced.
    pub fn train(sgn: &Sgn, store: &ParamStore<f32>, train: &[&ShapeRecord], test: &[&ShapeRecord], config: &PredictorConfig) -> Result<Self> {
        if train.is_empty() || test.is_empty() {
            return Err(Error::EmptySet);
        }
        let mut pred = Self::build(sgn, store, config)?;
        let m = pred.sgn.config.m;
        let feats = encode(&pred.sgn, &pred.store, train)?;
        pred.standardize(&feats);

        let mut y = targets(train, m);
        if config.shuffle_targets {
            seeded_rng(config.seed ^ 0x5EED).shuffle(&mut y);
        }
        let y = Mat::from_rows(&y.iter().map(|r| r.iter().map(|&x| x as f32).collect()).collect::<Vec<_>>());
        let trainable = |n: &str| n.starts_with("predictor/hidden") || n.starts_with("predictor/out");
        let mut adam = AdamState::new(&pred.store, AdamConfig { lr: config.lr, ..AdamConfig::default() });
        let mut last = f64::NAN;
        for step in 0..config.iterations {
            let mut t = Tape::new();
            let p = pred.store.bind_where(&mut t, trainable);
            let x = t.constant(feats.clone());
            let l = pred.head(&mut t, &p, x);
            let sp = t.softplus(l);
            let yc = t.constant(y.clone());
            let yl = t.mul(yc, l);
            let bce = t.sub(sp, yl);
            let loss = t.mean_all(bce);
            last = f64::from(t.value(loss).item());
            if !last.is_finite() {
                return Err(Error::NonfiniteLoss { step });
            }
            let mut g = t.backward(loss);
            pred.store.accumulate(&p, &mut g);
            adam_step_where(&mut pred.store, &mut adam, trainable)?;
        }
        pred.report.final_loss = last;
        pred.report.train_accuracy = entry_accuracy(train, &pred.decode_all(&pred.logits(&feats)));
        pred.report.heldout_accuracy = entry_accuracy(test, &pred.predict(test)?);
        Ok(pred)
    }

    fn standardize(&mut self, feats: &Mat<f32>) {
        let (n, w) = feats.shape();
        let mut shift = Mat::zeros(1, w);
        let mut scale = Mat::zeros(1, w);
        for c in 0..w {
            let mean = (0..n).map(|r| f64::from(feats.get(r, c))).sum::<f64>() / n as f64;
            let var = (0..n).map(|r| (f64::from(feats.get(r, c)) - mean).powi(2)).sum::<f64>() / n as f64;
            shift.set(0, c, -mean as f32);
            scale.set(0, c, (1.0 / (var.sqrt() + 1e-3)) as f32);
        }
        *self.store.get_mut(self.shift) = shift;
        *self.store.get_mut(self.scale) = scale;
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = PredictorMeta { kind: PREDICTOR_KIND.into(), sgn: self.sgn.config.clone(), config: self.config.clone(), report: self.report };
        save_checkpoint(path, &self.store, &serde_json::to_value(meta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = load_checkpoint(path)?;
        let meta: PredictorMeta = serde_json::from_value(meta).map_err(|e| Error::CheckpointMismatch(format!("not a predictor file: {e}")))?;
        if meta.kind != PREDICTOR_KIND {
            return Err(Error::CheckpointMismatch(format!("expected a predictor file, found `{}`", meta.kind)));
        }
        let mut scratch = ParamStore::<f32>::new();
        let sgn = Sgn::new(&mut scratch, &meta.sgn, &mut seeded_rng(0))?;
        let mut pred = Self::build(&sgn, &store, &meta.config)?;
        let copied = pred.store.load_from(&store)?;
        if copied != pred.store.len() || copied != store.len() {
            return Err(Error::CheckpointMismatch(format!("predictor file has {} parameters, expected {}", store.len(), pred.store.len())));
        }
        pred.report = meta.report;
        Ok(pred)
    }
}

impl StructurePredictor for AdjacencyPredictor {
    fn predict(&self, records: &[&ShapeRecord]) -> Result<Vec<(Vec<bool>, Vec<bool>)>> {
        if records.is_empty() {
            return Ok(Vec::new());
        }
        let feats = encode(&self.sgn, &self.store, records)?;
        Ok(self.decode_all(&self.logits(&feats)))
    }
}
