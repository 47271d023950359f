//! StructureGraphNet: shared per-point MLP, label-mean part pooling, masked
//! graph attention over parts and a reparameterized Gaussian posterior per
//! part.

use serde::{Deserialize, Serialize};

use crate::diff::{Bound, Mat, ParamId, ParamStore, Scalar, SeededRng, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::shape::PointCloud;
use crate::structure::{validate_structuregraph, StructureGraph};

pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;
pub const GAT_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgnConfig {
    pub m: usize,
    pub point_hidden: usize,
    pub point_width: usize,
    pub gat_layers: usize,
    pub heads: usize,
    pub gat_hidden: usize,
    pub latent_dim: usize,
}

impl Default for SgnConfig {
    fn default() -> Self {
        SgnConfig { m: 4, point_hidden: 128, point_width: 128, gat_layers: 2, heads: 4, gat_hidden: 128, latent_dim: 32 }
    }
}

impl SgnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(Error::InvalidConfig(format!("sgn: {s}")));
        if self.m == 0 || self.latent_dim == 0 || self.point_width == 0 || self.point_hidden == 0 {
            return bad("m, latent_dim and widths must be positive");
        }
        if self.heads == 0 || self.gat_hidden % self.heads != 0 {
            return bad("heads must divide gat_hidden");
        }
        Ok(())
    }

    /// Width of the node features entering the first attention layer.
    pub fn node_input_width(&self) -> usize {
        self.point_width + self.m + 1
    }

    /// Width of the node features leaving the attention stack.
    pub fn node_output_width(&self) -> usize {
        if self.gat_layers == 0 {
            self.node_input_width()
        } else {
            self.gat_hidden
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatHead {
    pub w: Linear,
    pub a_src: ParamId,
    pub a_dst: ParamId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatLayer {
    pub heads: Vec<GatHead>,
}

impl GatLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, inp: usize, out: usize, heads: usize, rng: &mut SeededRng) -> Self {
        let dh = out / heads;
        let bound = 1.0 / (dh as f64).sqrt();
        let heads = (0..heads)
            .map(|h| {
                let base = format!("{name}/head{h}");
                let w = Linear::new(store, &base, inp, dh, false, rng);
                let a_src = store.register(format!("{base}/a_src"), Mat::from_fn(1, dh, |_, _| T::of(rng.uniform_in(-bound, bound))));
                let a_dst = store.register(format!("{base}/a_dst"), Mat::from_fn(1, dh, |_, _| T::of(rng.uniform_in(-bound, bound))));
                GatHead { w, a_src, a_dst }
            })
            .collect();
        GatLayer { heads }
    }

    /// Returns the concatenated head outputs after ELU and the per-head
    /// attention matrices. `mask[i*N + j]` allows node `i` to attend to `j`.
    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, h: Var, mask: &[bool]) -> (Var, Vec<Var>) {
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut alphas = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let wh = head.w.forward(t, p, h);
            let dst = t.matmul_nt(wh, p.var(head.a_dst));
            let src = t.matmul_nt(p.var(head.a_src), wh);
            let logits = t.add_outer(dst, src);
            let logits = t.leaky_relu(logits, T::of(GAT_SLOPE));
            let alpha = t.softmax_rows(logits, Some(mask));
            outs.push(t.matmul(alpha, wh));
            alphas.push(alpha);
        }
        let cat = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs) };
        (t.elu(cat), alphas)
    }
}

/// Any number of shapes flattened into one block-diagonal part graph of
/// `batch * m` nodes.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub batch: usize,
    pub m: usize,
    pub points: Vec<[f32; 3]>,
    /// Node index `b*m + label` of every point.
    pub seg: Vec<usize>,
    pub existence: Vec<bool>,
    pub adjacency: Vec<bool>,
}

impl GraphBatch {
    pub fn new(items: &[(&PointCloud, &StructureGraph)]) -> Result<Self> {
        let m = items.first().map(|(_, g)| g.m()).ok_or(Error::EmptySet)?;
        let mut out = GraphBatch { batch: items.len(), m, points: Vec::new(), seg: Vec::new(), existence: Vec::new(), adjacency: Vec::new() };
        for (b, (cloud, graph)) in items.iter().enumerate() {
            if graph.m() != m {
                return Err(Error::InvalidConfig(format!("mixed part counts {m} and {}", graph.m())));
            }
            validate_structuregraph(graph, cloud.len())?;
            out.points.extend_from_slice(cloud.points());
            out.seg.extend(graph.label_indices().into_iter().map(|j| b * m + j));
            out.existence.extend_from_slice(graph.existence());
            out.adjacency.extend_from_slice(graph.adjacency());
        }
        Ok(out)
    }

    pub fn nodes(&self) -> usize {
        self.batch * self.m
    }

    /// `N x N` attention mask: node `i` sees itself and its existing graph
    /// neighbours within the same shape; absent nodes see nothing.
    pub fn attention_mask(&self) -> Vec<bool> {
        let (m, nn) = (self.m, self.nodes());
        let mut mask = vec![false; nn * nn];
        for b in 0..self.batch {
            for j in 0..m {
                let i = b * m + j;
                if !self.existence[i] {
                    continue;
                }
                for k in 0..m {
                    let allowed = j == k || (self.adjacency[b * m * m + j * m + k] && self.existence[b * m + k]);
                    mask[i * nn + b * m + k] = allowed;
                }
            }
        }
        mask
    }

    /// `N x (m+1)` constant block: part-index one-hot followed by `v_j`.
    pub fn identity_features<T: Scalar>(&self) -> Mat<T> {
        let m = self.m;
        Mat::from_fn(self.nodes(), m + 1, |i, c| {
            if c < m {
                T::of(f64::from(u8::from(i % m == c)))
            } else {
                T::of(f64::from(u8::from(self.existence[i])))
            }
        })
    }

    pub fn existence_column<T: Scalar>(&self) -> Mat<T> {
        Mat::from_fn(self.nodes(), 1, |i, _| T::of(f64::from(u8::from(self.existence[i]))))
    }

    pub fn point_matrix<T: Scalar>(&self) -> Mat<T> {
        Mat::from_fn(self.points.len(), 3, |i, k| T::of(self.points[i][k] as f64))
    }
}

/// Tape handles of a batched posterior, each `(batch*m) x d`.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorVars {
    pub mu: Var,
    pub log_sigma: Var,
    pub sigma: Var,
    pub z: Var,
}

/// Per-part posterior of one shape, rows indexed by part.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorOutput {
    pub mu: Mat<f64>,
    pub sigma: Mat<f64>,
    pub z: Mat<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sgn {
    pub config: SgnConfig,
    pub point_in: Linear,
    pub point_out: Linear,
    pub gat: Vec<GatLayer>,
    pub mu_head: Linear,
    pub log_sigma_head: Linear,
}

impl Sgn {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &SgnConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let point_in = Linear::new(store, "sgn/point/0", 3, c.point_hidden, true, rng);
        let point_out = Linear::new(store, "sgn/point/1", c.point_hidden, c.point_width, true, rng);
        let mut width = c.node_input_width();
        let mut gat = Vec::with_capacity(c.gat_layers);
        for l in 0..c.gat_layers {
            gat.push(GatLayer::new(store, &format!("sgn/gat/{l}"), width, c.gat_hidden, c.heads, rng));
            width = c.gat_hidden;
        }
        let mu_head = Linear::new(store, "sgn/mu", width, c.latent_dim, true, rng);
        let log_sigma_head = Linear::new(store, "sgn/log_sigma", width, c.latent_dim, true, rng);
        Ok(Sgn { config: config.clone(), point_in, point_out, gat, mu_head, log_sigma_head })
    }

    /// Shared MLP applied to every point row independently.
    pub fn pointwise<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let h = self.point_in.forward(t, p, x);
        let h = t.silu(h);
        self.point_out.forward(t, p, h)
    }

    /// Node features after pooling and the attention stack, `N x width`.
    pub fn node_features<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, batch: &GraphBatch) -> Var {
        self.node_features_traced(t, p, batch).0
    }

    /// As [`Sgn::node_features`], also returning every layer's per-head
    /// attention matrices.
    pub fn node_features_traced<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, batch: &GraphBatch) -> (Var, Vec<Vec<Var>>) {
        let x = t.constant(batch.point_matrix());
        let f = self.pointwise(t, p, x);
        let pooled = t.segment_mean(f, batch.seg.clone(), batch.nodes());
        let ident = t.constant(batch.identity_features());
        let mut h = t.concat_cols(&[pooled, ident]);
        let mask = batch.attention_mask();
        let mut alphas = Vec::with_capacity(self.gat.len());
        for layer in &self.gat {
            let (next, a) = layer.forward(t, p, h, &mask);
            h = next;
            alphas.push(a);
        }
        (h, alphas)
    }

    /// Posterior heads and `z = mu + sigma * eps`. Absent parts get `mu = 0`
    /// and `sigma = 1`.
    pub fn posterior<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, batch: &GraphBatch, eps: Mat<T>) -> PosteriorVars {
        let h = self.node_features(t, p, batch);
        self.posterior_from_nodes(t, p, batch, h, eps)
    }

    pub fn posterior_from_nodes<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, batch: &GraphBatch, h: Var, eps: Mat<T>) -> PosteriorVars {
        assert_eq!(eps.shape(), (batch.nodes(), self.config.latent_dim));
        let v = t.constant(batch.existence_column());
        let mu = self.mu_head.forward(t, p, h);
        let mu = t.mul_col(mu, v);
        let ls = self.log_sigma_head.forward(t, p, h);
        let ls = t.clamp(ls, T::of(LOG_SIGMA_MIN), T::of(LOG_SIGMA_MAX));
        let log_sigma = t.mul_col(ls, v);
        let sigma = t.exp(log_sigma);
        let e = t.constant(eps);
        let se = t.mul(sigma, e);
        let z = t.add(mu, se);
        PosteriorVars { mu, log_sigma, sigma, z }
    }
}

/// Single-shape forward pass with fixed noise `eps` (`m x d`).
pub fn sgn_forward<T: Scalar>(sgn: &Sgn, store: &ParamStore<T>, cloud: &PointCloud, graph: &StructureGraph, eps: &Mat<T>) -> Result<PosteriorOutput> {
    let batch = GraphBatch::new(&[(cloud, graph)])?;
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let post = sgn.posterior(&mut t, &p, &batch, eps.clone());
    let f = |v: Var| t.value(v).cast::<f64>();
    Ok(PosteriorOutput { mu: f(post.mu), sigma: f(post.sigma), z: f(post.z) })
}
