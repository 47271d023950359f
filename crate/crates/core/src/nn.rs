//! Small layer helpers shared by the encoder, flow and denoiser.

use crate::diff::{Bound, Mat, ParamId, ParamStore, Scalar, SeededRng, Tape, Var};

/// Affine map `x W^T + b` with `W` stored as `out x in`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(in)` init for weights and bias.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, inp: usize, out: usize, bias: bool, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (inp.max(1) as f64).sqrt();
        let w = store.register(format!("{name}/w"), Mat::from_fn(out, inp, |_, _| T::of(rng.uniform_in(-bound, bound))));
        let b = bias.then(|| store.register(format!("{name}/b"), Mat::from_fn(1, out, |_, _| T::of(rng.uniform_in(-bound, bound)))));
        Linear { w, b, inp, out }
    }

    /// All-zero weights and bias.
    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, inp: usize, out: usize, bias: bool) -> Self {
        let w = store.register(format!("{name}/w"), Mat::zeros(out, inp));
        let b = bias.then(|| store.register(format!("{name}/b"), Mat::zeros(1, out)));
        Linear { w, b, inp, out }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let y = t.matmul_nt(x, p.var(self.w));
        match self.b {
            Some(b) => t.add_row(y, p.var(b)),
            None => y,
        }
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.register(format!("{name}/gain"), Mat::filled(1, width, T::one())),
            bias: store.register(format!("{name}/bias"), Mat::zeros(1, width)),
        }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let n = t.layer_norm(x, T::of(1e-5));
        let g = t.mul_row(n, p.var(self.gain));
        t.add_row(g, p.var(self.bias))
    }
}
