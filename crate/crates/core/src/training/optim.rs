use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use indexmap::IndexMap;

/// SGD with momentum, weight decay, and a poly learning-rate schedule.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub buffers: IndexMap<String, Tensor>,
    pub lr0: f64,
    pub momentum: f32,
    pub weight_decay: f32,
    pub max_iter: usize,
    pub poly_power: f64,
}

impl OptimState {
    pub fn new(lr0: f64, momentum: f32, weight_decay: f32, max_iter: usize, poly_power: f64) -> Self {
        OptimState {
            buffers: IndexMap::new(),
            lr0,
            momentum,
            weight_decay,
            max_iter,
            poly_power,
        }
    }
}

/// `lr0·(1 − iter/max_iter)^power`.
pub fn poly_lr(iter: usize, state: &OptimState) -> Result<f64> {
    if iter > state.max_iter || state.max_iter == 0 {
        return Err(Error::invalid(format!(
            "iteration {iter} outside [0, {}]",
            state.max_iter
        )));
    }
    Ok(state.lr0 * (1.0 - iter as f64 / state.max_iter as f64).powf(state.poly_power))
}

/// `buf ← momentum·buf + grad + wd·param; param ← param − lr·buf`.
/// Weight decay applies only to parameters flagged for it.
pub fn sgd_step(params: &mut ParamStore, state: &mut OptimState, lr: f64) {
    let lr = lr as f32;
    for (name, p) in params.params_mut() {
        let buf = state
            .buffers
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.value.shape()));
        let wd = if p.decay { state.weight_decay } else { 0.0 };
        let (value, grad) = (p.value.data_mut(), p.grad.data());
        for ((b, v), g) in buf.data_mut().iter_mut().zip(value.iter_mut()).zip(grad) {
            *b = state.momentum * *b + g + wd * *v;
            *v -= lr * *b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f32, g: f32, decay: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("w", Tensor::full(&[1], v), decay).unwrap();
        s.get_mut("w").unwrap().grad = Tensor::full(&[1], g);
        s
    }

    #[test]
    fn poly_schedule_endpoints() {
        let st = OptimState::new(0.01, 0.9, 5e-4, 1000, 0.9);
        assert_eq!(poly_lr(0, &st).unwrap(), 0.01);
        assert_eq!(poly_lr(1000, &st).unwrap(), 0.0);
        assert!((poly_lr(500, &st).unwrap() - 0.005359).abs() < 1e-6);
        assert!(poly_lr(1001, &st).is_err());
    }

    #[test]
    fn plain_gradient_descent() {
        let mut s = store(1.0, 0.5, true);
        let mut st = OptimState::new(0.1, 0.0, 0.0, 10, 0.9);
        sgd_step(&mut s, &mut st, 0.1);
        assert!((s.get("w").unwrap().value.item() - 0.95).abs() < 1e-7);
    }

    #[test]
    fn two_momentum_steps() {
        // w=1, g=0.5 (held fixed), m=0.9, wd=0.1 on a decayed parameter, lr=0.1
        // step 1: buf = 0.5 + 0.1·1 = 0.6, w = 1 - 0.06 = 0.94
        // step 2: buf = 0.9·0.6 + 0.5 + 0.1·0.94 = 1.134, w = 0.94 - 0.1134 = 0.8266
        let mut s = store(1.0, 0.5, true);
        let mut st = OptimState::new(0.1, 0.9, 0.1, 10, 0.9);
        sgd_step(&mut s, &mut st, 0.1);
        assert!((s.get("w").unwrap().value.item() - 0.94).abs() < 1e-6);
        sgd_step(&mut s, &mut st, 0.1);
        assert!((s.get("w").unwrap().value.item() - 0.8266).abs() < 1e-6);
        assert!((st.buffers["w"].item() - 1.134).abs() < 1e-6);
    }

    #[test]
    fn no_decay_on_excluded_params() {
        let mut s = store(2.0, 0.0, false);
        let mut st = OptimState::new(0.1, 0.9, 0.5, 10, 0.9);
        sgd_step(&mut s, &mut st, 0.1);
        assert_eq!(s.get("w").unwrap().value.item(), 2.0);
    }
}
