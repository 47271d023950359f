use super::params::{ParamId, ParamStore};
use super::rng::seeded_rng;
use super::tensor::Mat;
use crate::error::{Error, Result};

/// Relative error threshold for a passing check at 64-bit precision.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error per probed parameter, in store order.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Loss value plus, when requested, one gradient per parameter in store order.
pub type LossEval = (f64, Option<Vec<Mat<f64>>>);

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences on randomly
/// chosen scalar entries (up to `probes` per parameter).
///
/// `loss(store, want_grad)` must be a pure function of `store`.
pub fn grad_check<F>(mut loss: F, store: &ParamStore<f64>, probes: usize, h: f64, seed: u64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, bool) -> Result<LossEval>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::InvalidRange(format!("finite-difference step {h} outside [1e-6, 1e-4]")));
    }
    let (first, grads) = loss(store, true)?;
    let (second, _) = loss(store, false)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NondeterministicLoss { first, second });
    }
    let grads = grads.ok_or_else(|| Error::MissingGradient("loss returned no gradients".into()))?;
    let mut rng = seeded_rng(seed);
    let mut probe_store = store.clone();
    let mut per_param = Vec::with_capacity(store.len());
    let mut max_rel_error: f64 = 0.0;
    for id in store.ids() {
        let n = store.get(id).len();
        let mut entries: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut entries);
        entries.truncate(probes.min(n));
        let mut worst: f64 = 0.0;
        for &k in &entries {
            let numeric = central_difference(&mut loss, &mut probe_store, id, k, h)?;
            let analytic = grads[id.0].data()[k];
            worst = worst.max(rel_error(analytic, numeric));
        }
        max_rel_error = max_rel_error.max(worst);
        per_param.push((store.name(id).to_string(), worst));
    }
    Ok(GradCheckReport { per_param, max_rel_error, pass: max_rel_error < GRAD_CHECK_TOLERANCE })
}

fn central_difference<F>(loss: &mut F, store: &mut ParamStore<f64>, id: ParamId, k: usize, h: f64) -> Result<f64>
where
    F: FnMut(&ParamStore<f64>, bool) -> Result<LossEval>,
{
    let orig = store.get(id).data()[k];
    store.get_mut(id).data_mut()[k] = orig + h;
    let (plus, _) = loss(store, false)?;
    store.get_mut(id).data_mut()[k] = orig - h;
    let (minus, _) = loss(store, false)?;
    store.get_mut(id).data_mut()[k] = orig;
    Ok((plus - minus) / (2.0 * h))
}
