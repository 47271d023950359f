//! Conditional denoising diffusion: linear noise schedule, forward noising,
//! a cross-attention transformer denoiser over per-part context tokens and
//! ancestral sampling.

use serde::{Deserialize, Serialize};

use crate::diff::{Bound, Mat, ParamStore, Scalar, SeededRng, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `alpha_bar[t]` for `t = 0..=T`, with `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Posterior standard deviation used by the reverse step; zero at `t = 1`.
    pub fn sigma_at(&self, t: usize) -> f64 {
        ((1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]) * self.beta_at(t)).sqrt()
    }
}

/// Linear `beta` from `beta_start` to `beta_end` over `t_steps` steps.
pub fn build_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::InvalidRange(format!("need T >= 2 and 0 < beta_start < beta_end < 1, got T={t_steps}, [{beta_start}, {beta_end}]")));
    }
    let beta: Vec<f64> = (0..t_steps).map(|i| beta_start + i as f64 * (beta_end - beta_start) / (t_steps - 1) as f64).collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_steps + 1);
    alpha_bar.push(1.0);
    for a in &alpha {
        alpha_bar.push(alpha_bar.last().expect("non-empty") * a);
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

/// Linear schedule over `t_steps` whose endpoints are `(beta_start, beta_end)`
/// multiplied by one factor chosen so that the final `alpha_bar` equals that
/// of the same endpoints over `reference_steps`.
pub fn matched_schedule(t_steps: usize, beta_start: f64, beta_end: f64, reference_steps: usize) -> Result<NoiseSchedule> {
    let target = *build_schedule(reference_steps, beta_start, beta_end)?.alpha_bar.last().expect("non-empty");
    if t_steps == reference_steps {
        return build_schedule(t_steps, beta_start, beta_end);
    }
    let end_of = |s: f64| build_schedule(t_steps, beta_start * s, beta_end * s).map(|sc| *sc.alpha_bar.last().expect("non-empty"));
    let (mut lo, mut hi) = (1e-3, (1.0 - 1e-9) / beta_end);
    if end_of(hi)? > target || end_of(lo)? < target {
        return Err(Error::InvalidRange(format!("cannot match the {reference_steps}-step endpoint with {t_steps} steps")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if end_of(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    build_schedule(t_steps, beta_start * lo, beta_end * lo)
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample<T: Scalar>(x0: &Mat<T>, t: usize, eps: &Mat<T>, schedule: &NoiseSchedule) -> Mat<T> {
    assert!(t >= 1 && t <= schedule.steps(), "t={t} outside 1..={}", schedule.steps());
    let ab = schedule.alpha_bar[t];
    let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Interleaved `(sin, cos)` pairs with frequencies `10000^(-2i/dim)`.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let arg = t / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out.push(arg.sin());
        out.push(arg.cos());
    }
    if dim % 2 == 1 {
        out.push(0.0);
    }
    out
}

/// One reverse step given the predicted noise `f` and fresh noise `z`.
pub fn p_sample_step<T: Scalar>(x_t: &Mat<T>, t: usize, f: &Mat<T>, z: &Mat<T>, schedule: &NoiseSchedule) -> Mat<T> {
    let a = schedule.alpha_at(t);
    let c = (1.0 - a) / (1.0 - schedule.alpha_bar[t]).sqrt();
    let s = schedule.sigma_at(t);
    let inv = 1.0 / a.sqrt();
    let mut out = x_t.zip_map(f, |x, e| T::of(inv) * (x - T::of(c) * e));
    if s > 0.0 {
        out = out.zip_map(z, |x, n| x + T::of(s) * n);
    }
    out
}

/// Full reverse chain from `x_T`, calling `predict(x_t, t)` for the noise
/// estimate and `noise(t)` for each step's fresh noise.
pub fn reverse_diffusion<T: Scalar>(
    x_t: Mat<T>,
    schedule: &NoiseSchedule,
    mut predict: impl FnMut(&Mat<T>, usize) -> Result<Mat<T>>,
    mut noise: impl FnMut(usize) -> Mat<T>,
) -> Result<Mat<T>> {
    let mut x = x_t;
    for t in (1..=schedule.steps()).rev() {
        let f = predict(&x, t)?;
        let z = noise(t);
        x = p_sample_step(&x, t, &f, &z, schedule);
        if !x.is_finite() || x.max_abs().as_f64() > 1e6 {
            return Err(Error::NonfiniteState(format!("reverse diffusion diverged at t={t}")));
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub m: usize,
    pub latent_dim: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub ffn: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { m: 4, latent_dim: 32, layers: 4, width: 256, heads: 8, time_dim: 64, ffn: 512 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::InvalidConfig("denoiser heads must divide the width".into()));
        }
        if self.m == 0 || self.width == 0 || self.ffn == 0 || self.time_dim < 2 {
            return Err(Error::InvalidConfig("denoiser sizes must be positive and time_dim >= 2".into()));
        }
        Ok(())
    }

    pub fn context_dim(&self) -> usize {
        self.latent_dim + 1 + self.m + self.time_dim
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserBlock {
    pub ln_attn: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub embed: Linear,
    pub blocks: Vec<DenoiserBlock>,
    pub ln_out: LayerNorm,
    pub head: Linear,
}

/// Points of several shapes and their per-shape context, ready for the denoiser.
#[derive(Debug, Clone)]
pub struct DenoiserInput<T: Scalar> {
    /// `P x 3` coordinates at the current step.
    pub x: Mat<T>,
    /// Part index of every point.
    pub labels: Vec<usize>,
    /// Shape index of every point.
    pub group: Vec<usize>,
    /// Step of each shape.
    pub t: Vec<usize>,
    /// `(b*m)` existence flags and `(b*m*m)` adjacency entries.
    pub existence: Vec<bool>,
    pub adjacency: Vec<bool>,
}

impl Denoiser {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &DenoiserConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let embed = Linear::new(store, "ddpm/embed", 3 + c.m, c.width, true, rng);
        let blocks = (0..c.layers)
            .map(|l| {
                let n = |s: &str| format!("ddpm/block{l}/{s}");
                DenoiserBlock {
                    ln_attn: LayerNorm::new(store, &n("ln_attn"), c.width),
                    q: Linear::new(store, &n("q"), c.width, c.width, false, rng),
                    k: Linear::new(store, &n("k"), c.context_dim(), c.width, false, rng),
                    v: Linear::new(store, &n("v"), c.context_dim(), c.width, false, rng),
                    o: Linear::new(store, &n("o"), c.width, c.width, true, rng),
                    ln_ffn: LayerNorm::new(store, &n("ln_ffn"), c.width),
                    ffn_in: Linear::new(store, &n("ffn_in"), c.width, c.ffn, true, rng),
                    ffn_out: Linear::new(store, &n("ffn_out"), c.ffn, c.width, true, rng),
                }
            })
            .collect();
        let ln_out = LayerNorm::new(store, "ddpm/ln_out", c.width);
        let head = Linear::new(store, "ddpm/head", c.width, 3, true, rng);
        Ok(Denoiser { config: config.clone(), embed, blocks, ln_out, head })
    }

    /// `(b*m) x context_dim` tokens `(z_j, v_j, e_j·, Emb(t))` from latents `z`
    /// (`(b*m) x d`).
    pub fn context<T: Scalar>(&self, t: &mut Tape<T>, z: Var, steps: &[usize], existence: &[bool], adjacency: &[bool]) -> Var {
        let c = &self.config;
        let m = c.m;
        let b = steps.len();
        let bit = |x: bool| T::of(f64::from(u8::from(x)));
        let embs: Vec<Vec<f64>> = steps.iter().map(|&s| time_embedding(s as f64, c.time_dim)).collect();
        let rest = Mat::from_fn(b * m, 1 + m + c.time_dim, |r, col| {
            let (s, j) = (r / m, r % m);
            if col == 0 {
                bit(existence[r])
            } else if col <= m {
                bit(adjacency[s * m * m + j * m + col - 1])
            } else {
                T::of(embs[s][col - 1 - m])
            }
        });
        let rest = t.constant(rest);
        t.concat_cols(&[z, rest])
    }

    /// Predicted noise, `P x 3`.
    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, x: Var, labels: &[usize], group: &[usize], ctx: Var) -> Var {
        self.forward_traced(t, p, x, labels, group, ctx).0
    }

    /// As [`Denoiser::forward`], also returning each block's attention node.
    pub fn forward_traced<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, x: Var, labels: &[usize], group: &[usize], ctx: Var) -> (Var, Vec<Var>) {
        let c = &self.config;
        let n = t.shape(x).0;
        let onehot = t.constant(Mat::from_fn(n, c.m, |i, j| T::of(f64::from(u8::from(labels[i] == j)))));
        let inp = t.concat_cols(&[x, onehot]);
        let mut h = self.embed.forward(t, p, inp);
        let mut attn = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let a_in = blk.ln_attn.forward(t, p, h);
            let q = blk.q.forward(t, p, a_in);
            let k = blk.k.forward(t, p, ctx);
            let v = blk.v.forward(t, p, ctx);
            let a = t.cross_attention(q, k, v, c.heads, c.m, group.to_vec());
            attn.push(a);
            let o = blk.o.forward(t, p, a);
            h = t.add(h, o);
            let f_in = blk.ln_ffn.forward(t, p, h);
            let f = blk.ffn_in.forward(t, p, f_in);
            let f = t.silu(f);
            let f = blk.ffn_out.forward(t, p, f);
            h = t.add(h, f);
        }
        let out = self.ln_out.forward(t, p, h);
        (self.head.forward(t, p, out), attn)
    }

    /// Per-shape mean over points of `|eps - F|^2`, averaged over shapes.
    /// `x0` and `eps` are `P x 3`; the noised input is formed here.
    pub fn loss<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, input: &DenoiserInput<T>, z: Var, eps: &Mat<T>, schedule: &NoiseSchedule) -> Var {
        let b = input.t.len();
        let mut counts = vec![0usize; b];
        for &g in &input.group {
            counts[g] += 1;
        }
        let xt = Mat::from_fn(input.x.rows(), 3, |i, k| {
            let ab = schedule.alpha_bar[input.t[input.group[i]]];
            T::of(ab.sqrt()) * input.x.get(i, k) + T::of((1.0 - ab).sqrt()) * eps.get(i, k)
        });
        let xv = t.constant(xt);
        let ctx = self.context(t, z, &input.t, &input.existence, &input.adjacency);
        let pred = self.forward(t, p, xv, &input.labels, &input.group, ctx);
        let target = t.constant(eps.clone());
        let diff = t.sub(target, pred);
        let sq = t.square(diff);
        let per_point = t.sum_cols(sq);
        let w = t.constant(Mat::from_fn(input.x.rows(), 1, |i, _| T::of(1.0 / (b * counts[input.group[i]]) as f64)));
        let weighted = t.mul(per_point, w);
        t.sum_all(weighted)
    }
}
