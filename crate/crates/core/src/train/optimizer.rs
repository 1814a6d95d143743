use serde::{Deserialize, Serialize};

use crate::error::{GtiError, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NadamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for NadamConfig {
    fn default() -> Self {
        NadamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every trainable parameter, indexed like the
/// store. Non-trainable slots stay `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Option<Tensor>> = store
            .iter()
            .map(|(_, p)| p.trainable().then(|| Tensor::zeros(p.value.shape())))
            .collect();
        OptimizerState {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Nadam step over every trainable parameter. A parameter without a
/// gradient is treated as having a zero gradient. Nothing is written if any
/// gradient is non-finite.
pub fn nadam_update(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &NadamConfig,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(GtiError::ConfigMismatch(format!(
            "optimizer tracks {} parameters, model has {}",
            state.m.len(),
            store.len()
        )));
    }
    for (id, g) in grads.iter() {
        if store.get(id).trainable() && g.data().iter().any(|v| !v.is_finite()) {
            return Err(GtiError::NonFinite(store.get(id).name.clone()));
        }
    }

    state.t += 1;
    let t = state.t as f64;
    let NadamConfig {
        beta1: b1,
        beta2: b2,
        eps,
    } = *cfg;
    let bc1_next = 1.0 - b1.powf(t + 1.0);
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let (Some(m), Some(v)) = (state.m[id.index()].as_mut(), state.v[id.index()].as_mut()) else {
            continue;
        };
        if !store.get(id).trainable() {
            continue;
        }
        let g = grads.get(id);
        let theta = store.value_mut(id);
        for i in 0..theta.numel() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_bar = b1 * mi / bc1_next + (1.0 - b1) * gi / bc1;
            theta.data_mut()[i] -= lr * m_bar / ((vi / bc2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;

    fn scalar_store() -> (ParamStore, ParamId) {
        let mut s = ParamStore::new(0);
        let id = s.register("theta", Tensor::vector(vec![0.0])).unwrap();
        (s, id)
    }

    fn grad(id: ParamId, g: f64) -> Gradients {
        let mut gr = Gradients::new(1);
        gr.accumulate(id, &Tensor::vector(vec![g]));
        gr
    }

    #[test]
    fn hand_computed_steps() {
        // 50-digit decimal evaluation of the update rule
        let (mut s, id) = scalar_store();
        let mut st = OptimizerState::new(&s);
        let cfg = NadamConfig::default();
        nadam_update(&mut s, &grad(id, 1.0), &mut st, 1e-3, &cfg).unwrap();
        let got = s.value(id).data()[0];
        let want = -0.0014736841957894738;
        assert!((got - want).abs() < 1e-18, "{got:e}");
        nadam_update(&mut s, &grad(id, -0.5), &mut st, 1e-3, &cfg).unwrap();
        let got = s.value(id).data()[0];
        assert!((got - -0.0013088205875318714).abs() < 1e-17, "{got:e}");
        assert_eq!(st.t, 2);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let (mut s, id) = scalar_store();
        s.value_mut(id).data_mut()[0] = 0.7;
        let mut st = OptimizerState::new(&s);
        for _ in 0..5 {
            nadam_update(&mut s, &Gradients::new(1), &mut st, 1e-3, &NadamConfig::default()).unwrap();
        }
        assert_eq!(s.value(id).data()[0], 0.7);
        assert_eq!(st.m[0].as_ref().unwrap().data()[0], 0.0);
        assert_eq!(st.v[0].as_ref().unwrap().data()[0], 0.0);
    }

    #[test]
    fn frozen_rows_never_move() {
        let mut s = ParamStore::new(0);
        let table = s
            .register("table", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let live = s
            .register("live", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        s.set_frozen(table, true);
        let mut st = OptimizerState::new(&s);
        assert!(st.m[0].is_none());
        let mut g = Gradients::new(2);
        g.accumulate(table, &Tensor::filled(&[2, 2], 1.0));
        g.accumulate(live, &Tensor::filled(&[2, 2], 1.0));
        for _ in 0..3 {
            nadam_update(&mut s, &g, &mut st, 1e-2, &NadamConfig::default()).unwrap();
        }
        assert_eq!(s.value(table).data(), &[1.0, 2.0, 3.0, 4.0]);
        // positive gradient moves a trainable row down
        assert!(s
            .value(live)
            .data()
            .iter()
            .zip([1.0, 2.0, 3.0, 4.0])
            .all(|(a, b)| *a < b));
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let (mut s, id) = scalar_store();
        let mut st = OptimizerState::new(&s);
        let err = nadam_update(&mut s, &grad(id, f64::NAN), &mut st, 1e-3, &NadamConfig::default()).unwrap_err();
        assert!(matches!(&err, GtiError::NonFinite(n) if n == "theta"));
        assert_eq!(st.t, 0);
        assert_eq!(s.value(id).data()[0], 0.0);
    }
}
