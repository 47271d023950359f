//! Training loop, generator checkpoints and structure-conditioned sampling.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{save_dataset, Dataset, DatasetManifest, ShapeRecord, Split};
use crate::diff::{adam_step_where, gaussian, load_checkpoint, save_checkpoint, seeded_rng, AdamConfig, AdamState, Mat, ParamStore, Tape, CLIP_GRAD_NORM};
use crate::diffusion::reverse_diffusion;
use crate::error::{Error, Result};
use crate::flow::condition_rows;
use crate::io::write_atomic;
use crate::model::{total_loss, LossNoise, LossValues, Model, ModelConfig};
use crate::par::par_map;
use crate::ply::write_ply;
use crate::shape::PointCloud;
use crate::structure::{default_segmentation_indices, StructureGraph};
use crate::synth::{catalog_entry, code_for};

pub const CHECKPOINT_FILE: &str = "last.sgck";
pub const RUN_MANIFEST_FILE: &str = "run.json";
const GENERATOR_KIND: &str = "generator";

/// Which records of a dataset the trainer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainSplit {
    Train,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the prior term.
    pub lambda: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Write `last.sgck` every this many steps; 0 writes only at the end.
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Two phases instead of one joint objective: encoder and denoiser on
    /// the diffusion loss, then the flow alone on the prior loss.
    pub staged: bool,
    /// Points per shape entering the diffusion loss; `None` uses all.
    pub train_points: Option<usize>,
    pub split: TrainSplit,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1e-3,
            batch_size: 16,
            lr: 1e-3,
            iterations: 5000,
            seed: 0,
            checkpoint_every: 500,
            log_every: 10,
            staged: false,
            train_points: Some(256),
            split: TrainSplit::Train,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Larger batches and many more steps.
    pub fn paper_scale() -> Self {
        TrainConfig { batch_size: 128, iterations: 100_000, checkpoint_every: 5000, train_points: None, model: ModelConfig::full(), ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig("lambda must be positive".into()));
        }
        if self.batch_size == 0 || self.iterations == 0 || self.log_every == 0 {
            return Err(Error::InvalidConfig("batch_size, iterations and log_every must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        if self.train_points == Some(0) {
            return Err(Error::InvalidConfig("train_points must be positive".into()));
        }
        self.model.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub dataset_hash: String,
    pub checkpoint: Option<PathBuf>,
    pub steps: Vec<usize>,
    pub loss_prior: Vec<f64>,
    pub loss_diff: Vec<f64>,
    pub loss_total: Vec<f64>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    fn log(&mut self, step: usize, v: LossValues) {
        self.steps.push(step);
        self.loss_prior.push(v.prior);
        self.loss_diff.push(v.diffusion);
        self.loss_total.push(v.total);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GeneratorMeta {
    kind: String,
    model: ModelConfig,
    train: Option<TrainConfig>,
}

pub fn save_generator(path: &Path, model: &Model, store: &ParamStore<f32>, train: Option<&TrainConfig>) -> Result<()> {
    let meta = GeneratorMeta { kind: GENERATOR_KIND.into(), model: model.config.clone(), train: train.cloned() };
    save_checkpoint(path, store, &serde_json::to_value(meta)?)
}

/// Rebuilds the model from the config stored in the checkpoint.
pub fn load_generator(path: &Path) -> Result<(Model, ParamStore<f32>)> {
    let (saved, meta) = load_checkpoint(path)?;
    let meta: GeneratorMeta = serde_json::from_value(meta).map_err(|e| Error::CheckpointMismatch(format!("not a generator checkpoint: {e}")))?;
    if meta.kind != GENERATOR_KIND {
        return Err(Error::CheckpointMismatch(format!("expected a generator checkpoint, found `{}`", meta.kind)));
    }
    let (model, mut store) = Model::new::<f32>(&meta.model, 0)?;
    let copied = store.load_from(&saved)?;
    if copied != store.len() || saved.len() != store.len() {
        return Err(Error::CheckpointMismatch(format!("checkpoint has {} parameters, model expects {}", saved.len(), store.len())));
    }
    store.set_step(saved.step());
    Ok((model, store))
}

pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub manifest: RunManifest,
}

fn select_records(dataset: &Dataset, split: TrainSplit) -> Result<Vec<&ShapeRecord>> {
    let recs: Vec<&ShapeRecord> = match split {
        TrainSplit::All => dataset.records.iter().collect(),
        TrainSplit::Train => dataset.split(Split::Train),
    };
    if recs.is_empty() {
        return Err(Error::DatasetInvalid(format!("no records for the `{}` split", if split == TrainSplit::All { "all" } else { "train" })));
    }
    for r in &recs {
        r.validate().map_err(|e| Error::DatasetInvalid(format!("{}: {e}", r.shape_id)))?;
        if r.graph.m() != dataset.manifest.m {
            return Err(Error::DatasetInvalid(format!("{}: part count differs from the manifest", r.shape_id)));
        }
    }
    Ok(recs)
}

/// Runs the optimizer. With `out`, checkpoints and the run manifest are
/// written there. `on_log(step, losses)` sees every logged step.
pub fn train(config: &TrainConfig, dataset: &Dataset, out: Option<&Path>, mut on_log: impl FnMut(usize, LossValues)) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.manifest.m != config.model.m {
        return Err(Error::DatasetInvalid(format!("dataset has m={} but the model expects {}", dataset.manifest.m, config.model.m)));
    }
    let records = select_records(dataset, config.split)?;
    let started = Instant::now();
    let (model, mut store) = Model::new::<f32>(&config.model, config.seed)?;
    let mut adam = AdamState::new(&store, AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let mut rng = seeded_rng(config.seed ^ 0x7261_696E);
    let batch = config.batch_size.min(records.len());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let ckpt = out.map(|d| d.join(CHECKPOINT_FILE));
    let mut manifest = RunManifest {
        config_hash: config.hash(),
        dataset_hash: dataset.content_hash(),
        checkpoint: ckpt.clone(),
        steps: Vec::new(),
        loss_prior: Vec::new(),
        loss_diff: Vec::new(),
        loss_total: Vec::new(),
        wall_clock_secs: 0.0,
    };
    let phase_switch = if config.staged { config.iterations / 2 } else { usize::MAX };
    for step in 1..=config.iterations {
        let mut pick = Vec::with_capacity(batch);
        while pick.len() < batch {
            if cursor == order.len() {
                order = (0..records.len()).collect();
                rng.shuffle(&mut order);
                cursor = 0;
            }
            pick.push(records[order[cursor]]);
            cursor += 1;
        }
        let noise = LossNoise::<f32>::draw(&model, &pick, config.train_points, &mut rng.fork());
        let second_phase = step > phase_switch;
        let trainable = |n: &str| match (config.staged, second_phase) {
            (false, _) => true,
            (true, false) => !n.starts_with("ccnf/"),
            (true, true) => n.starts_with("ccnf/"),
        };
        let mut t = Tape::new();
        let p = store.bind_where(&mut t, trainable);
        let lv = total_loss(&model, &mut t, &p, &pick, &noise, config.lambda)?;
        let values = lv.values(&t);
        if !values.total.is_finite() {
            return Err(Error::NonfiniteLoss { step });
        }
        let target = match (config.staged, second_phase) {
            (false, _) => lv.total,
            (true, false) => lv.diffusion,
            (true, true) => lv.prior,
        };
        let mut grads = t.backward(target);
        store.accumulate(&p, &mut grads);
        if !store.clip_grad_norm(CLIP_GRAD_NORM).is_finite() {
            return Err(Error::NonfiniteLoss { step });
        }
        adam_step_where(&mut store, &mut adam, trainable)?;
        if step == 1 || step % config.log_every == 0 || step == config.iterations {
            manifest.log(step, values);
            on_log(step, values);
        }
        if let (Some(path), true) = (&ckpt, config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
            save_generator(path, &model, &store, Some(config))?;
        }
    }
    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    if let (Some(dir), Some(path)) = (out, &ckpt) {
        save_generator(path, &model, &store, Some(config))?;
        manifest.save(&dir.join(RUN_MANIFEST_FILE))?;
    }
    Ok(TrainOutcome { model, store, manifest })
}

/// Requested structure for sampling, with optional per-point part indices.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureSpec {
    pub existence: Vec<bool>,
    pub adjacency: Vec<bool>,
    pub labels: Option<Vec<usize>>,
}

impl StructureSpec {
    pub fn from_code(code: &str) -> Result<Self> {
        let e = catalog_entry(code)?;
        Ok(StructureSpec { existence: e.existence, adjacency: e.adjacency, labels: None })
    }

    pub fn from_graph(graph: &StructureGraph) -> Self {
        StructureSpec { existence: graph.existence().to_vec(), adjacency: graph.adjacency().to_vec(), labels: Some(graph.label_indices()) }
    }

    /// Catalog code when the graph is in the catalog, else `custom`.
    pub fn code(&self) -> String {
        code_for(&self.existence, &self.adjacency).unwrap_or("custom").to_string()
    }

    /// The full graph for `n` points, applying the default segmentation
    /// when no labels were given.
    pub fn graph(&self, n: usize) -> Result<StructureGraph> {
        let labels = match &self.labels {
            Some(l) => l.clone(),
            None => default_segmentation_indices(n, &self.existence)?,
        };
        if !self.existence.iter().any(|&v| v) {
            return Err(Error::NoExistingPart);
        }
        let g = StructureGraph::from_indices(&labels, self.existence.clone(), self.adjacency.clone())?;
        crate::structure::validate_structuregraph(&g, n)?;
        Ok(g)
    }
}

/// Independent seed for item `i` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, i: u64) -> u64 {
    let mut x = seed ^ i.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Latents for every part: `w ~ N(0, I)` pushed back through each part's flow.
pub fn sample_latents(model: &Model, store: &ParamStore<f32>, graph: &StructureGraph, rng: &mut crate::diff::SeededRng) -> Result<Mat<f32>> {
    let (m, d) = (model.m(), model.latent_dim());
    let w = gaussian::<f32>(rng, m, d);
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let mut rows = Vec::with_capacity(m);
    for j in 0..m {
        let wj = t.constant(Mat::from_vec(1, d, w.row(j).to_vec()));
        let cond = t.constant(condition_rows::<f32>(graph.existence(), graph.adjacency(), m, j));
        rows.push(model.flow.inverse_vars(&mut t, &p, j, wj, cond));
    }
    let z = t.concat_rows(&rows);
    let z = t.value(z).clone();
    if !z.is_finite() {
        return Err(Error::NonfiniteState("latent sampling left the finite range".into()));
    }
    Ok(z)
}

/// One shape: latents from the prior, then the reverse diffusion chain.
pub fn sample_cloud(model: &Model, store: &ParamStore<f32>, graph: &StructureGraph, seed: u64) -> Result<PointCloud> {
    if graph.m() != model.m() {
        return Err(Error::CheckpointMismatch(format!("structure has {} parts, model has {}", graph.m(), model.m())));
    }
    if !graph.existence().iter().any(|&v| v) {
        return Err(Error::NoExistingPart);
    }
    let mut rng = seeded_rng(seed);
    let z = sample_latents(model, store, graph, &mut rng)?;
    let n = graph.n();
    let labels = graph.label_indices();
    let group = vec![0usize; n];
    let x_t = gaussian::<f32>(&mut rng, n, 3);
    let mut noise_rng = rng.fork();
    let x0 = reverse_diffusion(
        x_t,
        &model.schedule,
        |x, step| {
            let mut t = Tape::new();
            let p = store.bind_frozen(&mut t);
            let zv = t.constant(z.clone());
            let ctx = model.denoiser.context(&mut t, zv, &[step], graph.existence(), graph.adjacency());
            let xv = t.constant(x.clone());
            let f = model.denoiser.forward(&mut t, &p, xv, &labels, &group, ctx);
            Ok(t.value(f).clone())
        },
        |_| gaussian::<f32>(&mut noise_rng, n, 3),
    )?;
    PointCloud::new(x0.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// `count` shapes for one structure. Shape `i` uses `derive_seed(seed, i)`,
/// so results do not depend on `workers`.
pub fn sample_shapes(model: &Model, store: &ParamStore<f32>, spec: &StructureSpec, count: usize, n: usize, seed: u64, workers: usize) -> Result<Vec<ShapeRecord>> {
    if spec.existence.len() != model.m() || spec.adjacency.len() != model.m() * model.m() {
        return Err(Error::CheckpointMismatch(format!("structure is sized for {} parts, model has {}", spec.existence.len(), model.m())));
    }
    let n = spec.labels.as_ref().map_or(n, Vec::len);
    let graph = spec.graph(n)?;
    let code = spec.code();
    par_map(count, workers, |i| {
        let cloud = sample_cloud(model, store, &graph, derive_seed(seed, i as u64))?;
        Ok(ShapeRecord { shape_id: format!("{code}-gen-{i:04}"), structure_code: code.clone(), cloud, graph: graph.clone() })
    })
    .into_iter()
    .collect()
}

/// Writes generated records as a dataset directory plus `ply/<id>.ply`.
pub fn save_samples(dir: &Path, records: &[ShapeRecord]) -> Result<()> {
    let m = records.first().map(|r| r.graph.m()).ok_or(Error::EmptySet)?;
    let mut manifest = DatasetManifest::new("generated", m);
    for r in records {
        manifest.push(r, Split::Test);
        write_ply(&dir.join("ply").join(format!("{}.ply", r.shape_id)), r)?;
    }
    save_dataset(dir, &manifest, records)
}
