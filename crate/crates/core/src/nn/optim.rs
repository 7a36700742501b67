//! Decoupled-weight-decay Adam.

use std::collections::HashMap;

use ndarray::ArrayD;

use super::layers::{Param, Session};
use crate::scalar::Scalar;

pub struct AdamState<T: Scalar> {
    pub m: ArrayD<T>,
    pub v: ArrayD<T>,
}

pub struct AdamW<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: usize,
    pub state: HashMap<String, AdamState<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            state: HashMap::new(),
        }
    }

    /// Applies one update using the gradients accumulated in `sess`.
    /// Parameters that received no gradient this step are left untouched.
    pub fn step(&mut self, params: &[(String, Param<T>)], sess: &Session<T>) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let lr = T::from_f64(self.lr);
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let eps = T::from_f64(self.eps);
        let wd = T::from_f64(self.weight_decay);
        let ibc1 = T::from_f64(1.0 / bc1);
        let ibc2 = T::from_f64(1.0 / bc2);

        for (name, p) in params {
            let Some(g) = sess.grad_of(p) else { continue };
            let st = self.state.entry(name.clone()).or_insert_with(|| AdamState {
                m: ArrayD::zeros(g.raw_dim()),
                v: ArrayD::zeros(g.raw_dim()),
            });
            ndarray::Zip::from(&mut st.m)
                .and(&g)
                .for_each(|m, &gv| *m = *m * b1 + gv * (T::one() - b1));
            ndarray::Zip::from(&mut st.v)
                .and(&g)
                .for_each(|v, &gv| *v = *v * b2 + gv * gv * (T::one() - b2));
            p.update(|data| {
                ndarray::Zip::from(data)
                    .and(&st.m)
                    .and(&st.v)
                    .for_each(|w, &m, &v| {
                        let mhat = m * ibc1;
                        let vhat = v * ibc2;
                        *w = *w - lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
                    });
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn adamw_descends_quadratic() {
        // minimize (w - 3)^2
        let p = Param::new(ArrayD::from_elem(IxDyn(&[1]), 0.0f64));
        let params = vec![("w".to_string(), p.clone())];
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..300 {
            let sess = Session::train();
            let w = sess.bind(&p);
            let target = crate::nn::Tensor::constant(ArrayD::from_elem(IxDyn(&[1]), 3.0));
            let diff = w.sub(&target);
            let loss = diff.mul(&diff).sum_all();
            loss.backward();
            opt.step(&params, &sess);
        }
        assert!((p.value()[[0]] - 3.0).abs() < 1e-2);
    }
}
