use super::params::ParamStore;
use super::tensor::{Mat, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    m: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.ids().map(|id| Mat::zeros(store.get(id).rows(), store.get(id).cols())).collect();
        AdamState { config, m: zeros(), v: zeros(), t: 0 }
    }
}

/// One bias-corrected Adam update over every parameter. Increments the
/// store's step counter and clears its gradients.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    adam_step_where(store, state, |_| true)
}

/// Adam update restricted to parameters whose name passes `trainable`; the
/// others keep their values and moments and need no gradient. Bias
/// correction counts the updates made through `state`.
pub fn adam_step_where<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>, trainable: impl Fn(&str) -> bool) -> Result<()> {
    for id in store.ids() {
        if trainable(store.name(id)) && store.grad(id).is_none() {
            return Err(Error::MissingGradient(store.name(id).to_string()));
        }
    }
    state.t += 1;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(state.t as i32);
    let bc2 = 1.0 - c.beta2.powi(state.t as i32);
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
    let step_size = T::of(c.lr / bc1);
    let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
    let eps = T::of(c.eps);
    for id in store.ids() {
        if !trainable(store.name(id)) {
            continue;
        }
        let g = store.grad(id).cloned().expect("checked above");
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        let p = store.get_mut(id);
        for (((pi, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            *pi -= step_size * *mi / ((*vi).sqrt() * inv_sqrt_bc2 + eps);
        }
    }
    store.set_step(store.step() + 1);
    store.clear_grads();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::params::ParamId;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("theta", Mat::scalar(0.0));
        let mut state = AdamState::new(&store, AdamConfig::default());
        store.set_grad(id, Mat::scalar(1.0));
        adam_step(&mut store, &mut state).unwrap();
        // m_hat = v_hat = 1, so the step is lr * 1 / (1 + eps).
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((store.get(id).item() - expected).abs() < 1e-15);
        assert_eq!(store.step(), 1);
        assert!(store.grad(id).is_none());
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", Mat::from_vec(1, 3, vec![0.5, -1.0, 2.0]));
        let mut state = AdamState::new(&store, AdamConfig::default());
        for _ in 0..5 {
            store.set_grad(id, Mat::zeros(1, 3));
            adam_step(&mut store, &mut state).unwrap();
        }
        assert_eq!(store.get(id).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn identical_parameters_move_identically() {
        let mut store = ParamStore::<f64>::new();
        let a = store.register("a", Mat::scalar(0.3));
        let b = store.register("b", Mat::scalar(0.3));
        let mut state = AdamState::new(&store, AdamConfig::default());
        for k in 0..4 {
            let g = 0.1 * k as f64 - 0.2;
            store.set_grad(a, Mat::scalar(g));
            store.set_grad(b, Mat::scalar(g));
            adam_step(&mut store, &mut state).unwrap();
        }
        assert_eq!(store.get(a), store.get(b));
    }

    #[test]
    fn missing_gradient_is_reported() {
        let mut store = ParamStore::<f32>::new();
        let a = store.register("a", Mat::scalar(0.0));
        store.register("b", Mat::scalar(0.0));
        let mut state = AdamState::new(&store, AdamConfig::default());
        store.set_grad(a, Mat::scalar(1.0));
        match adam_step(&mut store, &mut state) {
            Err(Error::MissingGradient(name)) => assert_eq!(name, "b"),
            other => panic!("expected MissingGradient, got {other:?}"),
        }
    }

    #[test]
    fn registration_order_does_not_change_updates() {
        let grads = [vec![0.4, -0.1], vec![1.5]];
        let run = |order: [usize; 2]| {
            let mut store = ParamStore::<f64>::new();
            let shapes = [2usize, 1];
            let mut ids = [ParamId(0); 2];
            for &k in &order {
                ids[k] = store.register(format!("p{k}"), Mat::filled(1, shapes[k], 0.25));
            }
            let mut state = AdamState::new(&store, AdamConfig { lr: 0.01, ..AdamConfig::default() });
            for _ in 0..3 {
                for k in 0..2 {
                    store.set_grad(ids[k], Mat::from_vec(1, shapes[k], grads[k].clone()));
                }
                adam_step(&mut store, &mut state).unwrap();
            }
            [store.get(ids[0]).clone(), store.get(ids[1]).clone()]
        };
        assert_eq!(run([0, 1]), run([1, 0]));
    }

}
