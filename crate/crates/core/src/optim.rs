//! SGD with (Nesterov) momentum and L2 on weights.

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdSettings {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub l2: f64,
}

/// One optimizer step from the accumulated gradients.
///
/// With `g = grad + l2·w` (L2 only on parameters flagged for decay) and
/// buffer `v ← µ·v + g`, the update is `w ← w − lr·(g + µ·v)` for Nesterov
/// and `w ← w − lr·v` otherwise. Gradients are zeroed afterwards.
pub fn sgd_step(store: &mut ParamStore, s: SgdSettings) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.get(id);
        if p.grad.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NanGradient {
                param: p.name.clone(),
            });
        }
    }
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.get_mut(id);
        if p.frozen {
            continue;
        }
        let lr = s.lr * p.lr_scale;
        let l2 = if p.decay { s.l2 } else { 0.0 };
        let crate::params::Param {
            value,
            grad,
            momentum,
            ..
        } = p;
        for ((w, g), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(momentum.data_mut())
        {
            let g = g + l2 * *w;
            *v = s.momentum * *v + g;
            let step = if s.nesterov { g + s.momentum * *v } else { *v };
            *w -= lr * step;
        }
    }
    store.zero_grad();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn setup(w: f64, g: f64) -> (ParamStore, crate::params::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(w), true);
        store.accumulate(id, &Tensor::scalar(g)).unwrap();
        (store, id)
    }

    #[test]
    fn plain_sgd_when_no_momentum() {
        let (mut store, id) = setup(1.0, 0.5);
        let s = SgdSettings { lr: 0.1, momentum: 0.0, nesterov: true, l2: 0.0 };
        sgd_step(&mut store, s).unwrap();
        assert!((store.value(id).item() - 0.95).abs() < 1e-15);
        assert_eq!(store.grad(id).item(), 0.0);
    }

    #[test]
    fn two_nesterov_steps_match_recursion() {
        // constant g: step 1 moves lr·(1+µ)·g, step 2 lr·(1+µ+µ²)·g
        let (lr, mu, g) = (0.1, 0.9, 2.0);
        let (mut store, id) = setup(0.0, g);
        let s = SgdSettings { lr, momentum: mu, nesterov: true, l2: 0.0 };
        sgd_step(&mut store, s).unwrap();
        store.accumulate(id, &Tensor::scalar(g)).unwrap();
        sgd_step(&mut store, s).unwrap();
        let expected = -lr * g * ((1.0 + mu) + (1.0 + mu + mu * mu));
        assert!((store.value(id).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn l2_shrinks_geometrically() {
        let (mut store, id) = setup(1.0, 0.0);
        let s = SgdSettings { lr: 0.1, momentum: 0.0, nesterov: false, l2: 0.5 };
        for _ in 0..3 {
            sgd_step(&mut store, s).unwrap();
        }
        assert!((store.value(id).item() - 0.95f64.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_aborts() {
        let (mut store, _) = setup(1.0, f64::NAN);
        let s = SgdSettings { lr: 0.1, momentum: 0.0, nesterov: false, l2: 0.0 };
        assert!(matches!(sgd_step(&mut store, s), Err(Error::NanGradient { .. })));
    }
}
