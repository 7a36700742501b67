//! Parameters, the per-forward binding session, and standard layers.
//!
//! A [`Session`] is created per forward pass. Binding a [`Param`] yields a
//! leaf tensor (shared across repeated binds, so gradients of re-used
//! parameters accumulate on a single node); in eval mode binds return
//! constants and no graph is retained.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ops::conv2d;
use super::tensor::Tensor;
use crate::scalar::Scalar;

/// Trainable parameter: shared storage updated in place by the optimizer.
#[derive(Clone)]
pub struct Param<T: Scalar> {
    inner: Rc<RefCell<ArrayD<T>>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(data: ArrayD<T>) -> Self {
        Param {
            inner: Rc::new(RefCell::new(data)),
        }
    }

    pub fn value(&self) -> ArrayD<T> {
        self.inner.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape().to_vec()
    }

    pub fn set(&self, data: ArrayD<T>) {
        assert_eq!(data.shape(), self.inner.borrow().shape());
        *self.inner.borrow_mut() = data;
    }

    pub fn update<F: FnOnce(&mut ArrayD<T>)>(&self, f: F) {
        f(&mut self.inner.borrow_mut());
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }
}

/// One forward pass worth of parameter bindings.
pub struct Session<T: Scalar> {
    train: bool,
    bindings: RefCell<HashMap<usize, Tensor<T>>>,
}

impl<T: Scalar> Session<T> {
    pub fn train() -> Self {
        Session {
            train: true,
            bindings: RefCell::new(HashMap::new()),
        }
    }

    pub fn eval() -> Self {
        Session {
            train: false,
            bindings: RefCell::new(HashMap::new()),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn bind(&self, p: &Param<T>) -> Tensor<T> {
        if !self.train {
            return Tensor::constant(p.value());
        }
        let mut map = self.bindings.borrow_mut();
        map.entry(p.key())
            .or_insert_with(|| Tensor::leaf(p.value()))
            .clone()
    }

    /// Gradient accumulated on a parameter's leaf during this session.
    pub fn grad_of(&self, p: &Param<T>) -> Option<ArrayD<T>> {
        self.bindings.borrow().get(&p.key()).and_then(|t| t.grad())
    }
}

/// Named parameter listing used by the optimizer and checkpoints. Buffers
/// are non-trainable state (batch-norm running statistics).
pub struct ParamSet<T: Scalar> {
    pub params: Vec<(String, Param<T>)>,
    pub buffers: Vec<(String, Param<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn param(&mut self, name: impl Into<String>, p: &Param<T>) {
        self.params.push((name.into(), p.clone()));
    }

    pub fn buffer(&mut self, name: impl Into<String>, p: &Param<T>) {
        self.buffers.push((name.into(), p.clone()));
    }

    pub fn num_scalars(&self) -> usize {
        self.params
            .iter()
            .map(|(_, p)| p.shape().iter().product::<usize>())
            .sum()
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Anything that exposes named parameters.
pub trait Module<T: Scalar> {
    fn collect(&self, prefix: &str, out: &mut ParamSet<T>);
}

fn he_normal<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64(z * std)
    })
}

fn xavier_uniform<T: Scalar, R: Rng>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> ArrayD<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        T::from_f64(rng.random_range(-bound..bound))
    })
}

/// 3x3 or 1x1 convolution with optional bias.
pub struct Conv2d<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
    out_channels: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = Param::new(he_normal(&[cout, cin, k, k], cin * k * k, rng));
        let bias = bias.then(|| Param::new(ArrayD::zeros(IxDyn(&[cout]))));
        Conv2d {
            weight,
            bias,
            stride,
            pad: k / 2,
            out_channels: cout,
        }
    }

    pub fn forward(&self, sess: &Session<T>, x: &Tensor<T>) -> Tensor<T> {
        let mut y = conv2d(x, &sess.bind(&self.weight), self.stride, self.pad);
        if let Some(b) = &self.bias {
            let bt = sess.bind(b).reshape(&[1, self.out_channels, 1, 1]);
            y = y.add(&bt);
        }
        y
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn collect(&self, prefix: &str, out: &mut ParamSet<T>) {
        out.param(format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            out.param(format!("{prefix}.bias"), b);
        }
    }
}

/// Batch normalization over `[B,C,H,W]`, biased variance throughout.
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
    channels: usize,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(ArrayD::from_elem(IxDyn(&[channels]), T::one())),
            beta: Param::new(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: Param::new(ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::new(ArrayD::from_elem(IxDyn(&[channels]), T::one())),
            momentum: 0.1,
            eps: 1e-5,
            channels,
        }
    }

    pub fn forward(&self, sess: &Session<T>, x: &Tensor<T>) -> Tensor<T> {
        let c = self.channels;
        let eps = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, c, 1, 1]), T::from_f64(self.eps)));
        let (mean, var) = if sess.is_train() {
            let mean = x.mean_axis_keep(0).mean_axis_keep(2).mean_axis_keep(3);
            let centered = x.sub(&mean);
            let var = centered
                .mul(&centered)
                .mean_axis_keep(0)
                .mean_axis_keep(2)
                .mean_axis_keep(3);
            // update running statistics from the detached batch values
            let m = T::from_f64(self.momentum);
            let mean_c = mean.data().clone().into_shape_with_order(IxDyn(&[c])).unwrap();
            let var_c = var.data().clone().into_shape_with_order(IxDyn(&[c])).unwrap();
            self.running_mean.update(|rm| {
                *rm = rm.mapv(|v| v * (T::one() - m)) + &mean_c.mapv(|v| v * m);
            });
            self.running_var.update(|rv| {
                *rv = rv.mapv(|v| v * (T::one() - m)) + &var_c.mapv(|v| v * m);
            });
            (mean, var)
        } else {
            (
                Tensor::constant(
                    self.running_mean
                        .value()
                        .into_shape_with_order(IxDyn(&[1, c, 1, 1]))
                        .unwrap(),
                ),
                Tensor::constant(
                    self.running_var
                        .value()
                        .into_shape_with_order(IxDyn(&[1, c, 1, 1]))
                        .unwrap(),
                ),
            )
        };
        let gamma = sess.bind(&self.gamma).reshape(&[1, c, 1, 1]);
        let beta = sess.bind(&self.beta).reshape(&[1, c, 1, 1]);
        x.sub(&mean)
            .div(&var.add(&eps).sqrt_t())
            .mul(&gamma)
            .add(&beta)
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn collect(&self, prefix: &str, out: &mut ParamSet<T>) {
        out.param(format!("{prefix}.gamma"), &self.gamma);
        out.param(format!("{prefix}.beta"), &self.beta);
        out.buffer(format!("{prefix}.running_mean"), &self.running_mean);
        out.buffer(format!("{prefix}.running_var"), &self.running_var);
    }
}

/// Fully connected layer, input shape `[N, in]`.
pub struct Linear<T: Scalar> {
    pub weight: Param<T>, // [in, out]
    pub bias: Param<T>,   // [out]
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(inp: usize, out: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::new(xavier_uniform(&[inp, out], inp, out, rng)),
            bias: Param::new(ArrayD::zeros(IxDyn(&[out]))),
        }
    }

    /// Zero-initialized variant (used where a neutral start matters, e.g.
    /// the grid-size head starts at sigmoid(0) = 0.5).
    pub fn zeros(inp: usize, out: usize) -> Self {
        Linear {
            weight: Param::new(ArrayD::zeros(IxDyn(&[inp, out]))),
            bias: Param::new(ArrayD::zeros(IxDyn(&[out]))),
        }
    }

    pub fn forward(&self, sess: &Session<T>, x: &Tensor<T>) -> Tensor<T> {
        x.matmul(&sess.bind(&self.weight))
            .add(&sess.bind(&self.bias))
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn collect(&self, prefix: &str, out: &mut ParamSet<T>) {
        out.param(format!("{prefix}.weight"), &self.weight);
        out.param(format!("{prefix}.bias"), &self.bias);
    }
}

/// Layer normalization over the last axis.
pub struct LayerNorm<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
    dim: usize,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(ArrayD::from_elem(IxDyn(&[dim]), T::one())),
            beta: Param::new(ArrayD::zeros(IxDyn(&[dim]))),
            eps: 1e-5,
            dim,
        }
    }

    pub fn forward(&self, sess: &Session<T>, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(*x.shape().last().unwrap(), self.dim);
        let last = x.shape().len() - 1;
        let mean = x.mean_axis_keep(last);
        let centered = x.sub(&mean);
        let var = centered.mul(&centered).mean_axis_keep(last);
        let eps = Tensor::constant(ArrayD::from_elem(
            IxDyn(&vec![1; x.shape().len()]),
            T::from_f64(self.eps),
        ));
        centered
            .div(&var.add(&eps).sqrt_t())
            .mul(&sess.bind(&self.gamma))
            .add(&sess.bind(&self.beta))
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn collect(&self, prefix: &str, out: &mut ParamSet<T>) {
        out.param(format!("{prefix}.gamma"), &self.gamma);
        out.param(format!("{prefix}.beta"), &self.beta);
    }
}

/// Token embedding table.
pub struct Embedding<T: Scalar> {
    pub table: Param<T>, // [vocab, dim]
}

impl<T: Scalar> Embedding<T> {
    pub fn new<R: Rng>(vocab: usize, dim: usize, rng: &mut R) -> Self {
        let table = ArrayD::from_shape_simple_fn(IxDyn(&[vocab, dim]), || {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z * 0.02)
        });
        Embedding {
            table: Param::new(table),
        }
    }

    pub fn forward(&self, sess: &Session<T>, ids: &[usize]) -> Tensor<T> {
        Tensor::embedding(&sess.bind(&self.table), ids)
    }
}

impl<T: Scalar> Module<T> for Embedding<T> {
    fn collect(&self, prefix: &str, out: &mut ParamSet<T>) {
        out.param(format!("{prefix}.table"), &self.table);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn session_bind_is_shared() {
        let p = Param::new(ArrayD::from_elem(IxDyn(&[2]), 1.0f64));
        let sess = Session::train();
        let a = sess.bind(&p);
        let b = sess.bind(&p);
        let loss = a.add(&b).sum_all();
        loss.backward();
        // both uses accumulate on the same leaf
        assert_eq!(sess.grad_of(&p).unwrap().as_slice().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn batchnorm_normalizes_in_train_mode() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let bn = BatchNorm2d::<f64>::new(3);
        let x = Tensor::constant(ArrayD::from_shape_simple_fn(IxDyn(&[2, 3, 4, 4]), || {
            rng.random_range(-5.0..5.0)
        }));
        let sess = Session::train();
        let y = bn.forward(&sess, &x);
        // per-channel mean ~0, var ~1
        for c in 0..3 {
            let ch = y.data().index_axis(ndarray::Axis(1), c).to_owned();
            let mean: f64 = ch.iter().sum::<f64>() / ch.len() as f64;
            let var: f64 = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / ch.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn layernorm_output_stats() {
        let ln = LayerNorm::<f64>::new(8);
        let x = Tensor::constant(ArrayD::from_shape_simple_fn(IxDyn(&[3, 8]), {
            let mut v = 0.0;
            move || {
                v += 1.37;
                (v * 7.3) % 5.0 - 2.0
            }
        }));
        let sess = Session::eval();
        let y = ln.forward(&sess, &x);
        for r in 0..3 {
            let row = y.data().index_axis(ndarray::Axis(0), r).to_owned();
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10);
        }
    }
}
