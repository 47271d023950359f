//! The full generator: encoder, per-part flow prior and denoiser sharing one
//! parameter store, plus the joint training objective.

use serde::{Deserialize, Serialize};

use crate::dataset::ShapeRecord;
use crate::diff::{gaussian, seeded_rng, Bound, Mat, ParamStore, Scalar, SeededRng, Tape, Var};
use crate::diffusion::{matched_schedule, Denoiser, DenoiserConfig, DenoiserInput, NoiseSchedule};
use crate::error::{Error, Result};
use crate::flow::{Flow, FlowConfig};
use crate::sgn::{GraphBatch, Sgn, SgnConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub m: usize,
    pub latent_dim: usize,
    pub sgn: SgnConfig,
    pub flow: FlowConfig,
    pub denoiser: DenoiserConfig,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// The schedule is rescaled so its final `alpha_bar` equals that of
    /// `(beta_start, beta_end)` over this many steps.
    pub schedule_reference_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Sizes that train in minutes on one CPU core.
    pub fn desk() -> Self {
        ModelConfig {
            m: 4,
            latent_dim: 16,
            sgn: SgnConfig { point_hidden: 64, point_width: 64, gat_layers: 2, heads: 4, gat_hidden: 64, ..SgnConfig::default() },
            flow: FlowConfig { hidden: 64, hidden_layers: 3, steps: 16, ..FlowConfig::default() },
            denoiser: DenoiserConfig { layers: 3, width: 128, heads: 4, time_dim: 64, ffn: 256, ..DenoiserConfig::default() },
            diffusion_steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            schedule_reference_steps: 1000,
        }
        .resolved()
    }

    /// The larger reference sizes.
    pub fn full() -> Self {
        ModelConfig {
            latent_dim: 32,
            sgn: SgnConfig::default(),
            flow: FlowConfig::default(),
            denoiser: DenoiserConfig::default(),
            ..ModelConfig::desk()
        }
        .resolved()
    }

    /// Copies the shared `m` and `latent_dim` into the sub-configurations.
    pub fn resolved(mut self) -> Self {
        self.sgn.m = self.m;
        self.flow.m = self.m;
        self.denoiser.m = self.m;
        self.sgn.latent_dim = self.latent_dim;
        self.flow.latent_dim = self.latent_dim;
        self.denoiser.latent_dim = self.latent_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.clone().resolved();
        if c != *self {
            return Err(Error::InvalidConfig("sub-configurations disagree with the shared m / latent_dim".into()));
        }
        c.sgn.validate()?;
        c.flow.validate()?;
        c.denoiser.validate()?;
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        matched_schedule(self.diffusion_steps, self.beta_start, self.beta_end, self.schedule_reference_steps)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub sgn: Sgn,
    pub flow: Flow,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

impl Model {
    /// Registers every parameter in a fresh store. Registration order is fixed,
    /// so equal configs and seeds give equal stores.
    pub fn new<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<T>)> {
        let config = config.clone().resolved();
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let sgn = Sgn::new(&mut store, &config.sgn, &mut rng.fork())?;
        let flow = Flow::new(&mut store, &config.flow, &mut rng.fork())?;
        let denoiser = Denoiser::new(&mut store, &config.denoiser, &mut rng.fork())?;
        let schedule = config.schedule()?;
        Ok((Model { config, sgn, flow, denoiser, schedule }, store))
    }

    pub fn m(&self) -> usize {
        self.config.m
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }
}

/// All randomness of one loss evaluation, drawn up front so the loss is a
/// deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct LossNoise<T: Scalar> {
    /// `(b*m) x d` reparameterization noise.
    pub posterior: Mat<T>,
    /// Diffusion step per shape.
    pub t: Vec<usize>,
    /// Selected point indices per shape for the diffusion term.
    pub points: Vec<Vec<usize>>,
    /// `P x 3` diffusion noise for the selected points.
    pub eps: Mat<T>,
}

impl<T: Scalar> LossNoise<T> {
    /// `train_points = None` keeps every point.
    pub fn draw(model: &Model, records: &[&ShapeRecord], train_points: Option<usize>, rng: &mut SeededRng) -> Self {
        let posterior = gaussian(rng, records.len() * model.m(), model.latent_dim());
        let t: Vec<usize> = records.iter().map(|_| 1 + rng.below(model.schedule.steps())).collect();
        let points: Vec<Vec<usize>> = records
            .iter()
            .map(|r| {
                let n = r.cloud.len();
                match train_points {
                    Some(k) if k < n => {
                        let mut idx: Vec<usize> = (0..n).collect();
                        for i in 0..k {
                            let j = i + rng.below(n - i);
                            idx.swap(i, j);
                        }
                        let mut sel = idx[..k].to_vec();
                        sel.sort_unstable();
                        sel
                    }
                    _ => (0..n).collect(),
                }
            })
            .collect();
        let total: usize = points.iter().map(Vec::len).sum();
        let eps = gaussian(rng, total, 3);
        LossNoise { posterior, t, points, eps }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub prior: Var,
    pub diffusion: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub prior: f64,
    pub diffusion: f64,
}

impl LossVars {
    pub fn values<T: Scalar>(&self, t: &Tape<T>) -> LossValues {
        LossValues { total: t.value(self.total).item().as_f64(), prior: t.value(self.prior).item().as_f64(), diffusion: t.value(self.diffusion).item().as_f64() }
    }
}

/// `lambda * L_prior + L_diff` on one batch, with both components.
pub fn total_loss<T: Scalar>(model: &Model, t: &mut Tape<T>, p: &Bound, records: &[&ShapeRecord], noise: &LossNoise<T>, lambda: f64) -> Result<LossVars> {
    let items: Vec<_> = records.iter().map(|r| (&r.cloud, &r.graph)).collect();
    let batch = GraphBatch::new(&items)?;
    let post = model.sgn.posterior(t, p, &batch, noise.posterior.clone());
    let prior = model.flow.prior_loss_vars(t, p, post.z, post.log_sigma, &batch.existence, &batch.adjacency).total;
    let input = diffusion_input(records, noise, &batch)?;
    let diffusion = model.denoiser.loss(t, p, &input, post.z, &noise.eps, &model.schedule);
    let scaled = t.scale(prior, T::of(lambda));
    let total = t.add(scaled, diffusion);
    Ok(LossVars { total, prior, diffusion })
}

fn diffusion_input<T: Scalar>(records: &[&ShapeRecord], noise: &LossNoise<T>, batch: &GraphBatch) -> Result<DenoiserInput<T>> {
    let total: usize = noise.points.iter().map(Vec::len).sum();
    if noise.points.len() != records.len() || noise.eps.rows() != total {
        return Err(Error::SizeMismatch(noise.eps.rows(), total));
    }
    let mut x = Vec::with_capacity(total * 3);
    let mut labels = Vec::with_capacity(total);
    let mut group = Vec::with_capacity(total);
    for (b, (r, sel)) in records.iter().zip(&noise.points).enumerate() {
        let li = r.graph.label_indices();
        for &i in sel {
            x.extend(r.cloud.points()[i].iter().map(|&c| T::of(c as f64)));
            labels.push(li[i]);
            group.push(b);
        }
    }
    Ok(DenoiserInput {
        x: Mat::from_vec(total, 3, x),
        labels,
        group,
        t: noise.t.clone(),
        existence: batch.existence.clone(),
        adjacency: batch.adjacency.clone(),
    })
}
