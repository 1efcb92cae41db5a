//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::network::NetworkParams;
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates for a list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(shapes: impl IntoIterator<Item = Vec<usize>>) -> Self {
        let m: Vec<Tensor<T>> = shapes.into_iter().map(|s| Tensor::zeros(&s)).collect();
        AdamState { v: m.clone(), m, t: 0, beta1: BETA1, beta2: BETA2, eps: ADAM_EPS }
    }

    pub fn for_params(params: &NetworkParams<T>) -> Self {
        Self::new(params.tensors().iter().map(|t| t.shape().to_vec()))
    }

    /// One update of every tensor whose `trainable` flag is set. Gradients
    /// are checked for finiteness before anything is modified.
    pub fn step(
        &mut self,
        tensors: &mut [Tensor<T>],
        grads: &[Tensor<T>],
        trainable: &[bool],
        names: &[&str],
        lr: f64,
    ) -> Result<()> {
        let n = tensors.len();
        if grads.len() != n || trainable.len() != n || self.m.len() != n {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {n} parameters and {} gradients",
                self.m.len(),
                grads.len()
            )));
        }
        for i in 0..n {
            if grads[i].shape() != tensors[i].shape() || self.m[i].shape() != tensors[i].shape() {
                return Err(Error::TensorShape {
                    name: names.get(i).unwrap_or(&"?").to_string(),
                    expected: tensors[i].shape().to_vec(),
                    actual: grads[i].shape().to_vec(),
                });
            }
            if trainable[i] && !grads[i].is_finite() {
                return Err(Error::NonFiniteGradient(names.get(i).unwrap_or(&"?").to_string()));
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
        let step = T::from_f64(lr / c1);
        let inv_sqrt_c2 = T::from_f64(1.0 / c2.sqrt());
        let eps = T::from_f64(self.eps);
        for i in (0..n).filter(|&i| trainable[i]) {
            let p = tensors[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads[i].data()) {
                *m = b1t * *m + one_b1 * g;
                *v = b2t * *v + one_b2 * g * g;
                *p = *p - step * *m / (v.sqrt() * inv_sqrt_c2 + eps);
            }
        }
        Ok(())
    }

    /// [`Self::step`] over every trainable network tensor.
    pub fn step_params(&mut self, params: &mut NetworkParams<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        let trainable: Vec<bool> = params.specs().iter().map(|s| s.kind.trainable()).collect();
        let names: Vec<String> = params.names().map(str::to_string).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        self.step(params.tensors_mut(), grads, &trainable, &names, lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02, 250.0] {
            let mut p = vec![scalar(1.0)];
            let mut st = AdamState::<f64>::new([vec![1]]);
            st.step(&mut p, &[scalar(g)], &[true], &["w"], 1e-3).unwrap();
            let update = p[0].data()[0] - 1.0;
            assert!((update + 1e-3 * g.signum()).abs() < 1e-6, "{update}");
            assert_eq!(st.t, 1);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![scalar(0.7), scalar(-2.0)];
        let mut st = AdamState::<f64>::new([vec![1], vec![1]]);
        st.step(&mut p, &[scalar(0.0), scalar(0.0)], &[true, true], &["a", "b"], 1e-3).unwrap();
        assert_eq!(p[0].data()[0], 0.7);
        assert_eq!(p[1].data()[0], -2.0);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn matches_textbook_recursion() {
        let grads = [0.5, -1.0, 2.0, 0.1];
        let mut p = vec![scalar(0.0)];
        let mut st = AdamState::<f64>::new([vec![1]]);
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            st.step(&mut p, &[scalar(*g)], &[true], &["w"], 0.01).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            w -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((p[0].data()[0] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_named() {
        let mut p = vec![scalar(1.0), scalar(1.0)];
        let mut st = AdamState::<f64>::new([vec![1], vec![1]]);
        let err = st.step(&mut p, &[scalar(1.0), scalar(f64::NAN)], &[true, true], &["ok", "bad"], 1e-3).unwrap_err();
        assert_eq!(err.to_string(), "non-finite gradient in tensor 'bad'");
        assert_eq!(p[0].data()[0], 1.0);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn frozen_tensors_untouched() {
        let mut p = vec![scalar(1.0)];
        let mut st = AdamState::<f64>::new([vec![1]]);
        st.step(&mut p, &[scalar(5.0)], &[false], &["mean"], 1e-3).unwrap();
        assert_eq!(p[0].data()[0], 1.0);
    }
}
