//! Reverse-mode autodiff tensor on top of `ndarray`.
//!
//! Graphs are built eagerly: every op returns a new `Tensor` holding its
//! value, its parents and a backward closure. `backward()` walks the graph
//! in reverse topological order and accumulates gradients into every node
//! that requires them. Ops only record a closure when some parent requires
//! gradients, so inference builds no graph at all.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{concatenate, ArrayD, ArrayViewD, Axis, IxDyn, Slice};

use crate::scalar::Scalar;

pub(crate) type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>, &[Tensor<T>])>;

struct Node<T: Scalar> {
    data: ArrayD<T>,
    grad: RefCell<Option<ArrayD<T>>>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Shared handle to a node in the computation graph.
#[derive(Clone)]
pub struct Tensor<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Tensor<T> {
    /// Constant tensor: carries no gradient.
    pub fn constant(data: ArrayD<T>) -> Self {
        Tensor(Rc::new(Node {
            data,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        }))
    }

    /// Leaf tensor that accumulates a gradient (parameters).
    pub fn leaf(data: ArrayD<T>) -> Self {
        Tensor(Rc::new(Node {
            data,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        }))
    }

    pub(crate) fn from_op(
        data: ArrayD<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Tensor(Rc::new(Node {
                data,
                grad: RefCell::new(None),
                parents,
                backward: Some(backward),
                requires_grad: true,
            }))
        } else {
            Tensor::constant(data)
        }
    }

    pub fn data(&self) -> &ArrayD<T> {
        &self.0.data
    }

    pub fn shape(&self) -> &[usize] {
        self.0.data.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Accumulated gradient, if any. Cloned out for inspection.
    pub fn grad(&self) -> Option<ArrayD<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Detached view of this value: same data, no graph edge.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::constant(self.0.data.clone())
    }

    pub fn scalar_value(&self) -> T {
        assert_eq!(self.0.data.len(), 1, "scalar_value on non-scalar tensor");
        *self.0.data.iter().next().unwrap()
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    pub(crate) fn accumulate(&self, g: &ArrayD<T>) {
        if !self.0.requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.0.data.shape(), "gradient shape mismatch");
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += g,
            None => *slot = Some(g.as_standard_layout().to_owned()),
        }
    }

    /// Reverse-mode sweep from this (scalar) tensor.
    pub fn backward(&self) {
        assert_eq!(self.0.data.len(), 1, "backward() requires a scalar loss");
        let order = self.topo_order();
        self.accumulate(&ArrayD::from_elem(self.0.data.raw_dim(), T::one()));
        for node in order.iter().rev() {
            let Some(f) = &node.0.backward else { continue };
            let grad = node.0.grad.borrow().clone();
            if let Some(g) = grad {
                f(&g, &node.0.parents);
            }
        }
    }

    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut state: HashMap<usize, bool> = HashMap::new(); // false=open, true=done
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        while let Some((node, child)) = stack.pop() {
            if child == 0 {
                match state.get(&node.id()) {
                    Some(_) => continue,
                    None => {
                        state.insert(node.id(), false);
                    }
                }
            }
            if child < node.0.parents.len() {
                let next = node.0.parents[child].clone();
                stack.push((node.clone(), child + 1));
                if next.requires_grad() && !state.contains_key(&next.id()) {
                    stack.push((next, 0));
                }
            } else {
                state.insert(node.id(), true);
                order.push(node);
            }
        }
        order
    }
}

/// Sums `g` down to `shape` by reducing axes that were broadcast.
fn reduce_to_shape<T: Scalar>(g: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, (&have, &want)) in out.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if have != want {
            debug_assert_eq!(want, 1, "invalid broadcast reduction");
            out = out
                .sum_axis(Axis(ax))
                .insert_axis(Axis(ax))
                .into_dimensionality()
                .unwrap();
        }
    }
    out
}

fn binary<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    value: ArrayD<T>,
    grad_a: impl Fn(&ArrayD<T>, &Tensor<T>, &Tensor<T>) -> ArrayD<T> + 'static,
    grad_b: impl Fn(&ArrayD<T>, &Tensor<T>, &Tensor<T>) -> ArrayD<T> + 'static,
) -> Tensor<T> {
    Tensor::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            if a.requires_grad() {
                a.accumulate(&reduce_to_shape(&grad_a(g, a, b), a.shape()));
            }
            if b.requires_grad() {
                b.accumulate(&reduce_to_shape(&grad_b(g, a, b), b.shape()));
            }
        }),
    )
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        binary(
            self,
            other,
            self.data() + other.data(),
            |g, _, _| g.clone(),
            |g, _, _| g.clone(),
        )
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        binary(
            self,
            other,
            self.data() - other.data(),
            |g, _, _| g.clone(),
            |g, _, _| g.mapv(|v| -v),
        )
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        binary(
            self,
            other,
            self.data() * other.data(),
            |g, _, b| g * b.data(),
            |g, a, _| g * a.data(),
        )
    }

    pub fn div(&self, other: &Tensor<T>) -> Tensor<T> {
        binary(
            self,
            other,
            self.data() / other.data(),
            |g, _, b| g / b.data(),
            |g, a, b| {
                let b2 = b.data() * b.data();
                -(g * a.data()) / &b2
            },
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    /// Elementwise affine `x * mul + add` with scalar constants.
    pub fn affine(&self, mul: T, add: T) -> Tensor<T> {
        Tensor::from_op(
            self.data().mapv(|v| v * mul + add),
            vec![self.clone()],
            Box::new(move |g, parents| parents[0].accumulate(&g.mapv(|v| v * mul))),
        )
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        self.affine(c, T::zero())
    }

    pub fn relu(&self) -> Tensor<T> {
        let value = self.data().mapv(|v| v.max(T::zero()));
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let x = parents[0].data();
                let gx = ndarray::Zip::from(g)
                    .and(x)
                    .map_collect(|&gv, &xv| if xv > T::zero() { gv } else { T::zero() });
                parents[0].accumulate(&gx);
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let value = self.data().mapv(|v| T::one() / (T::one() + (-v).exp()));
        let cached = value.clone();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let gx = ndarray::Zip::from(g)
                    .and(&cached)
                    .map_collect(|&gv, &s| gv * s * (T::one() - s));
                parents[0].accumulate(&gx);
            }),
        )
    }

    pub fn tanh_t(&self) -> Tensor<T> {
        let value = self.data().mapv(|v| v.tanh());
        let cached = value.clone();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let gx = ndarray::Zip::from(g)
                    .and(&cached)
                    .map_collect(|&gv, &t| gv * (T::one() - t * t));
                parents[0].accumulate(&gx);
            }),
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        let value = self.data().mapv(|v| v.exp());
        let cached = value.clone();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| parents[0].accumulate(&(g * &cached))),
        )
    }

    pub fn ln(&self) -> Tensor<T> {
        Tensor::from_op(
            self.data().mapv(|v| v.ln()),
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accumulate(&(g / parents[0].data()));
            }),
        )
    }

    pub fn sqrt_t(&self) -> Tensor<T> {
        let value = self.data().mapv(|v| v.sqrt());
        let cached = value.clone();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let half = T::from_f64(0.5);
                let gx = ndarray::Zip::from(g)
                    .and(&cached)
                    .map_collect(|&gv, &s| gv * half / s);
                parents[0].accumulate(&gx);
            }),
        )
    }

    /// Clamp to [0, 1]; gradient passes through strictly inside the range.
    pub fn clamp01(&self) -> Tensor<T> {
        let value = self.data().mapv(|v| v.max(T::zero()).min(T::one()));
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let x = parents[0].data();
                let gx = ndarray::Zip::from(g).and(x).map_collect(|&gv, &xv| {
                    if xv > T::zero() && xv < T::one() {
                        gv
                    } else {
                        T::zero()
                    }
                });
                parents[0].accumulate(&gx);
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data().len(), "reshape size mismatch");
        let in_shape = self.shape().to_vec();
        let value = self
            .data()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let gx = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&in_shape))
                    .unwrap();
                parents[0].accumulate(&gx);
            }),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor<T> {
        let axes_v = axes.to_vec();
        let value = self
            .data()
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut inverse = vec![0usize; axes_v.len()];
                for (i, &a) in axes_v.iter().enumerate() {
                    inverse[a] = i;
                }
                let gx = g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                parents[0].accumulate(&gx);
            }),
        )
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<T> {
        let value = self
            .data()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let full = self.shape().to_vec();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut gx = ArrayD::<T>::zeros(IxDyn(&full));
                gx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                parents[0].accumulate(&gx);
            }),
        )
    }

    pub fn concat(axis: usize, parts: &[Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty());
        let views: Vec<ArrayViewD<T>> = parts.iter().map(|p| p.data().view()).collect();
        let value = concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Tensor::from_op(
            value,
            parts.to_vec(),
            Box::new(move |g, parents| {
                let mut at = 0;
                for (p, &sz) in parents.iter().zip(sizes.iter()) {
                    let gp = g
                        .slice_axis(Axis(axis), Slice::from(at..at + sz))
                        .to_owned();
                    p.accumulate(&gp);
                    at += sz;
                }
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let total: T = self.data().iter().copied().sum();
        let in_shape = self.shape().to_vec();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[]), total),
            vec![self.clone()],
            Box::new(move |g, parents| {
                let gv = *g.iter().next().unwrap();
                parents[0].accumulate(&ArrayD::from_elem(IxDyn(&in_shape), gv));
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::from_usize(self.data().len());
        self.sum_all().scale(T::one() / n)
    }

    /// Sum over `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis_keep(&self, axis: usize) -> Tensor<T> {
        let value = self
            .data()
            .sum_axis(Axis(axis))
            .insert_axis(Axis(axis))
            .into_dimensionality()
            .unwrap();
        let in_shape = self.shape().to_vec();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let gx = g
                    .broadcast(IxDyn(&in_shape))
                    .expect("sum_axis backward broadcast")
                    .to_owned();
                parents[0].accumulate(&gx);
            }),
        )
    }

    /// Mean over `axis`, keeping it as a length-1 dimension.
    pub fn mean_axis_keep(&self, axis: usize) -> Tensor<T> {
        let n = T::from_usize(self.shape()[axis]);
        self.sum_axis_keep(axis).scale(T::one() / n)
    }

    /// 2D matrix product.
    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape().len(), 2);
        assert_eq!(other.shape().len(), 2);
        let a = self
            .data()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let b = other
            .data()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let value = a.dot(&b).into_dyn();
        binary(
            self,
            other,
            value,
            |g, _, b| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let b2 = b
                    .data()
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                g2.dot(&b2.t()).into_dyn()
            },
            |g, a, _| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let a2 = a
                    .data()
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                a2.t().dot(&g2).into_dyn()
            },
        )
    }

    /// Batched matrix product `[B,M,K] x [B,K,N] -> [B,M,N]`.
    pub fn bmm(&self, other: &Tensor<T>) -> Tensor<T> {
        let (sa, sb) = (self.shape(), other.shape());
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[0], sb[0]);
        assert_eq!(sa[2], sb[1]);
        let batch = sa[0];
        let mut value = ArrayD::<T>::zeros(IxDyn(&[batch, sa[1], sb[2]]));
        for i in 0..batch {
            let a = self
                .data()
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let b = other
                .data()
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            value
                .index_axis_mut(Axis(0), i)
                .assign(&a.to_owned().dot(&b.to_owned()));
        }
        binary(
            self,
            other,
            value,
            move |g, _, b| {
                let mut ga = ArrayD::<T>::zeros(IxDyn(&[batch, g.shape()[1], b.shape()[2]]));
                for i in 0..batch {
                    let gi = g
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap()
                        .to_owned();
                    let bi = b
                        .data()
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap()
                        .to_owned();
                    ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                }
                ga
            },
            move |g, a, _| {
                let mut gb = ArrayD::<T>::zeros(IxDyn(&[batch, a.shape()[2], g.shape()[2]]));
                for i in 0..batch {
                    let gi = g
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap()
                        .to_owned();
                    let ai = a
                        .data()
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap()
                        .to_owned();
                    gb.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                }
                gb
            },
        )
    }

    /// Row lookup `table[ids]`; backward scatter-adds into the table.
    pub fn embedding(table: &Tensor<T>, ids: &[usize]) -> Tensor<T> {
        assert_eq!(table.shape().len(), 2);
        let dim = table.shape()[1];
        let mut value = ArrayD::<T>::zeros(IxDyn(&[ids.len(), dim]));
        for (row, &id) in ids.iter().enumerate() {
            value
                .index_axis_mut(Axis(0), row)
                .assign(&table.data().index_axis(Axis(0), id));
        }
        let ids = ids.to_vec();
        Tensor::from_op(
            value,
            vec![table.clone()],
            Box::new(move |g, parents| {
                let mut gt = ArrayD::<T>::zeros(IxDyn(parents[0].shape()));
                for (row, &id) in ids.iter().enumerate() {
                    let mut dst = gt.index_axis_mut(Axis(0), id);
                    dst += &g.index_axis(Axis(0), row);
                }
                parents[0].accumulate(&gt);
            }),
        )
    }

    /// Numerically stable softmax over the last axis (composite op).
    pub fn softmax_last(&self) -> Tensor<T> {
        let last = self.shape().len() - 1;
        let maxes = self
            .data()
            .map_axis(Axis(last), |row| {
                row.iter().copied().fold(T::neg_infinity(), T::max)
            })
            .insert_axis(Axis(last));
        let shifted = self.sub(&Tensor::constant(maxes.into_dyn()));
        let e = shifted.exp();
        let denom = e.sum_axis_keep(last);
        e.div(&denom)
    }

    /// Nearest-neighbor 2x upsample of `[B,C,H,W]`.
    pub fn upsample2x(&self) -> Tensor<T> {
        let s = self.shape().to_vec();
        assert_eq!(s.len(), 4);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut value = ArrayD::<T>::zeros(IxDyn(&[b, c, h * 2, w * 2]));
        {
            let x = self.data();
            for bi in 0..b {
                for ci in 0..c {
                    for y in 0..h * 2 {
                        for xq in 0..w * 2 {
                            value[[bi, ci, y, xq]] = x[[bi, ci, y / 2, xq / 2]];
                        }
                    }
                }
            }
        }
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut gx = ArrayD::<T>::zeros(IxDyn(&[b, c, h, w]));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h * 2 {
                            for xq in 0..w * 2 {
                                gx[[bi, ci, y / 2, xq / 2]] += g[[bi, ci, y, xq]];
                            }
                        }
                    }
                }
                parents[0].accumulate(&gx);
            }),
        )
    }
}
