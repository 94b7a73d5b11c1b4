//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use ndarray::Zip;

use crate::graph::Array;

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: Array,
    pub v: Array,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// One update of `param` in place.
    pub fn step(&mut self, name: &str, param: &mut Array, grad: &Array, lr: f64) {
        assert_eq!(param.shape(), grad.shape(), "gradient shape for {name}");
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            step: 0,
            m: Array::zeros(param.raw_dim()),
            v: Array::zeros(param.raw_dim()),
        });
        st.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(st.step as i32);
        let bc2 = 1.0 - b2.powi(st.step as i32);
        let decay = 1.0 - lr * self.weight_decay;
        let eps = self.eps;
        Zip::from(param)
            .and(&mut st.m)
            .and(&mut st.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
}
