//! Per-part conditional continuous normalizing flow.
//!
//! Each part `j` owns a tanh MLP `f_j(z, t, cond)` with `cond = (v_j, e_j0..e_jm)`.
//! The forward map integrates `dz/dt = f_j` from `t = 0` to `1` with fixed-step
//! RK4 and accumulates `delta_logdet = -∫ tr(∂f/∂z) dt`. The trace is exact:
//! `d` tangent directions are pushed through the network on the same tape, so
//! parameter gradients flow through it.

use serde::{Deserialize, Serialize};

use crate::diff::{Bound, Mat, ParamStore, Scalar, SeededRng, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub m: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { m: 4, latent_dim: 32, hidden: 128, hidden_layers: 3, steps: 64 }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 8 {
            return Err(Error::InvalidConfig(format!("flow steps must be at least 8, got {}", self.steps)));
        }
        if self.m == 0 || self.latent_dim == 0 || self.hidden == 0 || self.hidden_layers == 0 {
            return Err(Error::InvalidConfig("flow widths and part count must be positive".into()));
        }
        Ok(())
    }

    pub fn cond_dim(&self) -> usize {
        1 + self.m
    }
}

/// Dynamics network of one part.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartDynamics {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Flow {
    pub config: FlowConfig,
    pub parts: Vec<PartDynamics>,
}

/// Forward-integration outputs on the tape: `w` is `b x d`, `delta_logdet` is `b x 1`.
#[derive(Debug, Clone, Copy)]
pub struct FlowVars {
    pub w: Var,
    pub delta_logdet: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    pub w: Vec<f64>,
    pub delta_logdet: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PriorLossVars {
    pub total: Var,
    /// Batch mean of `Σ_j -log P(z_j)`.
    pub cross_entropy: Var,
    /// Batch mean of `Σ_j H_j`.
    pub entropy: Var,
}

/// Per-part breakdown for a single shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorLossReport {
    pub cross_entropy: Vec<f64>,
    pub entropy: Vec<f64>,
    pub total: f64,
}

/// Condition rows `(v_j, e_j·)` for part `j` of each shape in a batch laid out
/// as `batch*m` existence flags and `batch*m*m` adjacency entries.
pub fn condition_rows<T: Scalar>(existence: &[bool], adjacency: &[bool], m: usize, j: usize) -> Mat<T> {
    let b = existence.len() / m;
    let bit = |x: bool| T::of(f64::from(u8::from(x)));
    Mat::from_fn(b, 1 + m, |s, c| if c == 0 { bit(existence[s * m + j]) } else { bit(adjacency[s * m * m + j * m + c - 1]) })
}

impl Flow {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &FlowConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let parts = (0..c.m)
            .map(|j| {
                let mut layers = Vec::with_capacity(c.hidden_layers + 1);
                let mut inp = c.latent_dim + 1 + c.cond_dim();
                for l in 0..c.hidden_layers {
                    layers.push(Linear::new(store, &format!("ccnf/part{j}/l{l}"), inp, c.hidden, true, rng));
                    inp = c.hidden;
                }
                let out = Linear::new(store, &format!("ccnf/part{j}/out"), inp, c.latent_dim, true, rng);
                // start close to the identity map
                store.get_mut(out.w).scale_assign(T::of(0.1));
                store.get_mut(out.b.expect("bias")).scale_assign(T::of(0.1));
                layers.push(out);
                PartDynamics { layers }
            })
            .collect();
        Ok(Flow { config: config.clone(), parts })
    }

    /// `f_j(z, t, cond)` and, when requested, `tr(∂f/∂z)` per row.
    pub fn dynamics<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, j: usize, z: Var, time: f64, cond: Var, with_trace: bool) -> (Var, Option<Var>) {
        let (b, d) = t.shape(z);
        let tcol = t.constant(Mat::filled(b, 1, T::of(time)));
        let mut h = t.concat_cols(&[z, tcol, cond]);
        let layers = &self.parts[j].layers;
        let mut tangent = None;
        let (dir_rows, per_sample): (Vec<usize>, Vec<usize>) = if with_trace {
            ((0..b).flat_map(|_| 0..d).collect(), (0..b).flat_map(|s| std::iter::repeat_n(s, d)).collect())
        } else {
            (Vec::new(), Vec::new())
        };
        for (l, layer) in layers.iter().enumerate() {
            let pre = layer.forward(t, p, h);
            if with_trace {
                tangent = Some(match tangent {
                    None => {
                        // directional derivative along e_k picks column k of W
                        let wz = t.slice_cols(p.var(layer.w), 0, d);
                        let eye = t.constant(Mat::identity(d));
                        let cols = t.matmul_t(eye, false, wz, true);
                        t.gather_rows(cols, dir_rows.clone())
                    }
                    Some(tg) => t.matmul_nt(tg, p.var(layer.w)),
                });
            }
            if l + 1 == layers.len() {
                h = pre;
                break;
            }
            h = t.tanh(pre);
            if let Some(tg) = tangent {
                let sq = t.square(h);
                let neg = t.neg(sq);
                let deriv = t.offset(neg, T::one());
                let rep = t.gather_rows(deriv, per_sample.clone());
                tangent = Some(t.mul(tg, rep));
            }
        }
        let trace = tangent.map(|tg| t.block_trace(tg, d));
        (h, trace)
    }

    /// RK4 from `t = 0` to `1` for part `j` on a batch of latents.
    pub fn forward_vars<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, j: usize, z: Var, cond: Var) -> FlowVars {
        integrate_forward(t, &PartNet { flow: self, p, j }, z, cond, self.config.steps)
    }

    /// Integrates the same dynamics from `t = 1` back to `0` without the trace.
    pub fn inverse_vars<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, j: usize, w: Var, cond: Var) -> Var {
        integrate_inverse(t, &PartNet { flow: self, p, j }, w, cond, self.config.steps)
    }

    /// `log N(w; 0, I) - delta_logdet` per row, `b x 1`.
    pub fn log_prob_vars<T: Scalar>(&self, t: &mut Tape<T>, fv: FlowVars) -> Var {
        let d = t.shape(fv.w).1;
        let sq = t.square(fv.w);
        let ss = t.sum_cols(sq);
        let gauss = t.scale(ss, T::of(-0.5));
        let gauss = t.offset(gauss, T::of(-0.5 * d as f64 * LOG_2PI));
        t.sub(gauss, fv.delta_logdet)
    }

    /// Single-sample prior loss `Σ_j [-log P(z_j) - H_j]`, averaged over the
    /// batch. `z`, `log_sigma` are `(b*m) x d` in shape-major order.
    pub fn prior_loss_vars<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, z: Var, log_sigma: Var, existence: &[bool], adjacency: &[bool]) -> PriorLossVars {
        let m = self.config.m;
        let (rows, d) = t.shape(z);
        let b = rows / m;
        let mut ce_parts = Vec::with_capacity(m);
        for j in 0..m {
            let zj = t.gather_rows(z, (0..b).map(|s| s * m + j).collect());
            let cond = t.constant(condition_rows(existence, adjacency, m, j));
            let fv = self.forward_vars(t, p, j, zj, cond);
            let lp = self.log_prob_vars(t, fv);
            ce_parts.push(t.sum_all(lp));
        }
        let mut ce = ce_parts[0];
        for &c in &ce_parts[1..] {
            ce = t.add(ce, c);
        }
        let ce = t.scale(ce, T::of(-1.0 / b as f64));
        let ls = t.sum_all(log_sigma);
        let ent = t.offset(ls, T::of(rows as f64 * d as f64 * 0.5 * (LOG_2PI + 1.0)));
        let ent = t.scale(ent, T::of(1.0 / b as f64));
        let total = t.sub(ce, ent);
        PriorLossVars { total, cross_entropy: ce, entropy: ent }
    }

    fn cond_var<T: Scalar>(&self, t: &mut Tape<T>, v_j: bool, e_row: &[bool]) -> Result<Var> {
        if e_row.len() != self.config.m {
            return Err(Error::SizeMismatch(e_row.len(), self.config.m));
        }
        let mut row = vec![T::of(f64::from(u8::from(v_j)))];
        row.extend(e_row.iter().map(|&e| T::of(f64::from(u8::from(e)))));
        Ok(t.constant(Mat::from_vec(1, row.len(), row)))
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.config.latent_dim {
            return Err(Error::SizeMismatch(v.len(), self.config.latent_dim));
        }
        Ok(())
    }
}

/// A vector field `f(z, t, cond)` with optional per-row trace of `∂f/∂z`.
pub trait Dynamics<T: Scalar> {
    fn eval(&self, t: &mut Tape<T>, z: Var, time: f64, cond: Var, with_trace: bool) -> (Var, Option<Var>);
}

/// The learned network of one part, bound to a parameter snapshot.
pub struct PartNet<'a> {
    pub flow: &'a Flow,
    pub p: &'a Bound,
    pub j: usize,
}

impl<T: Scalar> Dynamics<T> for PartNet<'_> {
    fn eval(&self, t: &mut Tape<T>, z: Var, time: f64, cond: Var, with_trace: bool) -> (Var, Option<Var>) {
        self.flow.dynamics(t, self.p, self.j, z, time, cond, with_trace)
    }
}

/// `f(z) = a z`, whose flow has the closed form `w = e^a z`.
pub struct LinearDynamics {
    pub a: f64,
}

impl<T: Scalar> Dynamics<T> for LinearDynamics {
    fn eval(&self, t: &mut Tape<T>, z: Var, _time: f64, _cond: Var, with_trace: bool) -> (Var, Option<Var>) {
        let (b, d) = t.shape(z);
        let f = t.scale(z, T::of(self.a));
        let tr = with_trace.then(|| t.constant(Mat::filled(b, 1, T::of(self.a * d as f64))));
        (f, tr)
    }
}

/// Fixed-step RK4 of the state and of `-tr` from `t = 0` to `1`.
pub fn integrate_forward<T: Scalar, D: Dynamics<T>>(t: &mut Tape<T>, f: &D, z: Var, cond: Var, steps: usize) -> FlowVars {
    let h = 1.0 / steps as f64;
    let b = t.shape(z).0;
    let mut state = z;
    let mut logdet = t.constant(Mat::zeros(b, 1));
    for step in 0..steps {
        let t0 = step as f64 * h;
        let (k1, r1) = f.eval(t, state, t0, cond, true);
        let s2 = axpy(t, state, k1, 0.5 * h);
        let (k2, r2) = f.eval(t, s2, t0 + 0.5 * h, cond, true);
        let s3 = axpy(t, state, k2, 0.5 * h);
        let (k3, r3) = f.eval(t, s3, t0 + 0.5 * h, cond, true);
        let s4 = axpy(t, state, k3, h);
        let (k4, r4) = f.eval(t, s4, t0 + h, cond, true);
        state = rk4_combine(t, state, [k1, k2, k3, k4], h);
        let r = [r1, r2, r3, r4].map(|r| r.expect("trace requested"));
        logdet = rk4_combine(t, logdet, r, -h);
    }
    FlowVars { w: state, delta_logdet: logdet }
}

/// Fixed-step RK4 of the state from `t = 1` back to `0`.
pub fn integrate_inverse<T: Scalar, D: Dynamics<T>>(t: &mut Tape<T>, f: &D, w: Var, cond: Var, steps: usize) -> Var {
    let h = -1.0 / steps as f64;
    let mut state = w;
    for step in 0..steps {
        let t0 = 1.0 + step as f64 * h;
        let (k1, _) = f.eval(t, state, t0, cond, false);
        let s2 = axpy(t, state, k1, 0.5 * h);
        let (k2, _) = f.eval(t, s2, t0 + 0.5 * h, cond, false);
        let s3 = axpy(t, state, k2, 0.5 * h);
        let (k3, _) = f.eval(t, s3, t0 + 0.5 * h, cond, false);
        let s4 = axpy(t, state, k3, h);
        let (k4, _) = f.eval(t, s4, t0 + h, cond, false);
        state = rk4_combine(t, state, [k1, k2, k3, k4], h);
    }
    state
}

fn axpy<T: Scalar>(t: &mut Tape<T>, x: Var, k: Var, h: f64) -> Var {
    let s = t.scale(k, T::of(h));
    t.add(x, s)
}

fn rk4_combine<T: Scalar>(t: &mut Tape<T>, x: Var, k: [Var; 4], h: f64) -> Var {
    let a = t.add(k[1], k[2]);
    let a = t.scale(a, T::of(2.0));
    let b = t.add(k[0], k[3]);
    let s = t.add(a, b);
    axpy(t, x, s, h / 6.0)
}

fn finite_row(m: &Mat<f64>) -> Result<Vec<f64>> {
    if !m.is_finite() {
        return Err(Error::NonfiniteState("flow trajectory left the finite range".into()));
    }
    Ok(m.data().to_vec())
}

pub fn flow_forward<T: Scalar>(flow: &Flow, store: &ParamStore<T>, z: &[f64], v_j: bool, e_row: &[bool], j: usize) -> Result<FlowResult> {
    flow.check_len(z)?;
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let zv = t.constant(Mat::from_fn(1, z.len(), |_, k| T::of(z[k])));
    let cond = flow.cond_var(&mut t, v_j, e_row)?;
    let fv = flow.forward_vars(&mut t, &p, j, zv, cond);
    let w = finite_row(&t.value(fv.w).cast())?;
    let delta_logdet = t.value(fv.delta_logdet).item().as_f64();
    if !delta_logdet.is_finite() {
        return Err(Error::NonfiniteState("log-determinant is not finite".into()));
    }
    Ok(FlowResult { w, delta_logdet })
}

pub fn flow_inverse<T: Scalar>(flow: &Flow, store: &ParamStore<T>, w: &[f64], v_j: bool, e_row: &[bool], j: usize) -> Result<Vec<f64>> {
    flow.check_len(w)?;
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let wv = t.constant(Mat::from_fn(1, w.len(), |_, k| T::of(w[k])));
    let cond = flow.cond_var(&mut t, v_j, e_row)?;
    let z = flow.inverse_vars(&mut t, &p, j, wv, cond);
    finite_row(&t.value(z).cast())
}

pub fn log_prob<T: Scalar>(flow: &Flow, store: &ParamStore<T>, z: &[f64], v_j: bool, e_row: &[bool], j: usize) -> Result<f64> {
    let r = flow_forward(flow, store, z, v_j, e_row, j)?;
    let sq: f64 = r.w.iter().map(|x| x * x).sum();
    Ok(-0.5 * sq - 0.5 * z.len() as f64 * LOG_2PI - r.delta_logdet)
}

/// Gaussian entropy `Σ (0.5 log(2πe) + log σ)`.
pub fn gaussian_entropy(sigma: &[f64]) -> f64 {
    sigma.iter().map(|s| 0.5 * (LOG_2PI + 1.0) + s.ln()).sum()
}

/// Prior loss of one shape's posterior sample, with per-part terms.
pub fn prior_loss<T: Scalar>(flow: &Flow, store: &ParamStore<T>, z: &Mat<f64>, sigma: &Mat<f64>, existence: &[bool], adjacency: &[bool]) -> Result<PriorLossReport> {
    let m = flow.config.m;
    let mut cross_entropy = Vec::with_capacity(m);
    let mut entropy = Vec::with_capacity(m);
    for j in 0..m {
        cross_entropy.push(-log_prob(flow, store, z.row(j), existence[j], &adjacency[j * m..(j + 1) * m], j)?);
        entropy.push(gaussian_entropy(sigma.row(j)));
    }
    let total = cross_entropy.iter().sum::<f64>() - entropy.iter().sum::<f64>();
    Ok(PriorLossReport { cross_entropy, entropy, total })
}
