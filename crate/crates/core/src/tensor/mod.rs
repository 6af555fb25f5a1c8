//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Every operation that participates in training records its parents and a
//! backward closure. Calling [`Tensor::backward`] on a scalar walks the
//! recorded graph once, in reverse topological order, accumulating gradients
//! into each node's `grad` buffer.

pub mod conv;
pub mod loss;
pub mod norm;
pub mod pool;

pub use conv::{conv2d, depthwise_conv2d, linear, Padding};
pub use loss::{cross_entropy, pair_softmax, softmax_rows};
pub use norm::{batch_norm, dropout, Mode, RunningStats};
pub use pool::{adaptive_avg_pool, global_avg_pool, upsample_nearest};

use crate::error::{Error, Result};
use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

pub(crate) struct Lineage {
    pub parents: Vec<Tensor>,
    /// Receives the output gradient and the parents; accumulates into the
    /// parents' gradient buffers.
    pub backward: Box<dyn Fn(&[f64], &[Tensor])>,
}

pub(crate) struct Inner {
    pub id: usize,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub lineage: Option<Lineage>,
}

/// A dense row-major double-precision tensor, cheaply clonable (shared
/// storage). Mutation happens only through parameter updates and the
/// backward pass; both must be externally serialized per graph.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<RefCell<Inner>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Geometry(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self::raw(shape.to_vec(), data, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::raw(shape.to_vec(), vec![0.0; shape.iter().product()], None)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::raw(shape.to_vec(), vec![value; shape.iter().product()], None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(vec![1], vec![value], None)
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>, lineage: Option<Lineage>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: None,
                lineage,
            })),
        }
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64], &[Tensor]) + 'static,
    ) -> Self {
        Self::raw(
            shape,
            data,
            Some(Lineage {
                parents,
                backward: Box::new(backward),
            }),
        )
    }

    pub fn id(&self) -> usize {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Borrow the raw values.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn data_clone(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Gradient buffer contents, if a backward pass has reached this node.
    pub fn grad_clone(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    /// Overwrite the values in place, keeping shape. Used by optimizers and
    /// checkpoint loading.
    pub fn set_data(&self, data: &[f64]) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(Error::Geometry(format!(
                "set_data: expected {} values, got {}",
                inner.data.len(),
                data.len()
            )));
        }
        inner.data.copy_from_slice(data);
        Ok(())
    }

    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        match inner.grad {
            Some(ref mut g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => {
                let n = inner.data.len();
                inner.grad = Some(vec![0.0; n]);
            }
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    /// Run reverse-mode accumulation from this scalar. Every node reachable
    /// through the lineage graph receives a gradient buffer; buffers of
    /// pre-existing nodes (parameters) are accumulated into, so callers zero
    /// them between steps.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() requires a scalar output");
        let order = self.topo_order();
        for t in &order {
            let mut inner = t.inner.borrow_mut();
            if inner.grad.is_none() {
                let n = inner.data.len();
                inner.grad = Some(vec![0.0; n]);
            }
        }
        {
            let mut inner = self.inner.borrow_mut();
            inner.grad.as_mut().unwrap()[0] += 1.0;
        }
        for t in order.iter().rev() {
            // Clone the output gradient so no borrow is held while the
            // backward closure mutates the parents.
            let grad = {
                let inner = t.inner.borrow();
                if inner.lineage.is_none() {
                    continue;
                }
                inner.grad.clone().unwrap()
            };
            let inner = t.inner.borrow();
            let lineage = inner.lineage.as_ref().unwrap();
            (lineage.backward)(&grad, &lineage.parents);
        }
    }

    /// Post-order over the lineage DAG; each node appears exactly once.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        // Iterative DFS; stack entries are (node, child cursor).
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.id());
        while let Some((node, cursor)) = stack.pop() {
            let next_child = {
                let inner = node.inner.borrow();
                inner
                    .lineage
                    .as_ref()
                    .and_then(|l| l.parents.get(cursor).cloned())
            };
            match next_child {
                Some(child) => {
                    stack.push((node, cursor + 1));
                    if seen.insert(child.id()) {
                        stack.push((child, 0));
                    }
                }
                None => order.push(node),
            }
        }
        order
    }

    pub fn accumulate_grad(&self, delta: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    // ---- elementwise ops -------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Geometry(format!(
                "add: shape {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data: Vec<f64> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        Ok(Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone(), other.clone()],
            |g, parents| {
                parents[0].accumulate_grad(g);
                parents[1].accumulate_grad(g);
            },
        ))
    }

    /// Elementwise Hadamard product of same-shape tensors.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Geometry(format!(
                "mul: shape {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data: Vec<f64> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        Ok(Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone(), other.clone()],
            |g, parents| {
                let a = parents[0].data_clone();
                let b = parents[1].data_clone();
                let da: Vec<f64> = g.iter().zip(&b).map(|(gi, bi)| gi * bi).collect();
                let db: Vec<f64> = g.iter().zip(&a).map(|(gi, ai)| gi * ai).collect();
                parents[0].accumulate_grad(&da);
                parents[1].accumulate_grad(&db);
            },
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x * factor).collect();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            move |g, parents| {
                let d: Vec<f64> = g.iter().map(|gi| gi * factor).collect();
                parents[0].accumulate_grad(&d);
            },
        )
    }

    /// 1 - x, elementwise. Complements a pairwise-softmax weight.
    pub fn one_minus(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| 1.0 - x).collect();
        Tensor::from_op(self.shape(), data, vec![self.clone()], |g, parents| {
            let d: Vec<f64> = g.iter().map(|gi| -gi).collect();
            parents[0].accumulate_grad(&d);
        })
    }

    pub fn relu(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x.max(0.0)).collect();
        Tensor::from_op(self.shape(), data, vec![self.clone()], |g, parents| {
            let x = parents[0].data_clone();
            let d: Vec<f64> = g
                .iter()
                .zip(&x)
                .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                .collect();
            parents[0].accumulate_grad(&d);
        })
    }

    /// ELU(x) = x for x > 0, alpha*(e^x - 1) otherwise.
    pub fn elu(&self, alpha: f64) -> Tensor {
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { alpha * (x.exp() - 1.0) })
            .collect();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            move |g, parents| {
                let x = parents[0].data_clone();
                let d: Vec<f64> = g
                    .iter()
                    .zip(&x)
                    .map(|(gi, &xi)| {
                        if xi > 0.0 {
                            *gi
                        } else {
                            gi * alpha * xi.exp()
                        }
                    })
                    .collect();
                parents[0].accumulate_grad(&d);
            },
        )
    }

    /// Reinterpret with a new shape of the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::Geometry(format!(
                "reshape: {:?} -> {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data_clone(),
            vec![self.clone()],
            |g, parents| parents[0].accumulate_grad(g),
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![total], vec![self.clone()], |g, parents| {
            let d = vec![g[0]; parents[0].len()];
            parents[0].accumulate_grad(&d);
        })
    }

    /// Dot product against fixed coefficients, as a scalar node. Handy for
    /// collapsing an operation's output to a scalar in gradient checks.
    pub fn dot_const(&self, coeffs: &[f64]) -> Result<Tensor> {
        if coeffs.len() != self.len() {
            return Err(Error::Geometry(format!(
                "dot_const: {} coeffs for {} elements",
                coeffs.len(),
                self.len()
            )));
        }
        let total: f64 = self.data().iter().zip(coeffs).map(|(x, c)| x * c).sum();
        let coeffs = coeffs.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            move |g, parents| {
                let d: Vec<f64> = coeffs.iter().map(|c| c * g[0]).collect();
                parents[0].accumulate_grad(&d);
            },
        ))
    }

    /// Select one element as a scalar node (gradient routes to that slot).
    pub fn index_scalar(&self, idx: usize) -> Result<Tensor> {
        if idx >= self.len() {
            return Err(Error::InvalidInput(format!(
                "index {} out of {} elements",
                idx,
                self.len()
            )));
        }
        let v = self.data()[idx];
        Ok(Tensor::from_op(
            vec![1],
            vec![v],
            vec![self.clone()],
            move |g, parents| {
                let mut d = vec![0.0; parents[0].len()];
                d[idx] = g[0];
                parents[0].accumulate_grad(&d);
            },
        ))
    }
}

/// Concatenate along the channel axis (axis 1 of a 4-D tensor). All other
/// extents must agree; gradient splits back to the inputs.
pub fn concat_channels(inputs: &[Tensor]) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput("concat_channels: empty input list".into()));
    }
    if inputs.len() == 1 {
        // Still a node, so gradient routing stays uniform.
        return inputs[0].reshape(&inputs[0].shape());
    }
    let first = inputs[0].shape();
    if first.len() != 4 {
        return Err(Error::Geometry(format!(
            "concat_channels: expected 4-D tensors, got {:?}",
            first
        )));
    }
    let (b, h, w) = (first[0], first[2], first[3]);
    let mut channels = 0usize;
    for t in inputs {
        let s = t.shape();
        if s.len() != 4 || s[0] != b || s[2] != h || s[3] != w {
            return Err(Error::Geometry(format!(
                "concat_channels: {:?} incompatible with {:?}",
                s, first
            )));
        }
        channels += s[1];
    }
    let plane = h * w;
    let mut data = vec![0.0; b * channels * plane];
    for bi in 0..b {
        let mut co = 0usize;
        for t in inputs {
            let s = t.shape();
            let tc = s[1];
            let src = t.data();
            let src_off = bi * tc * plane;
            let dst_off = (bi * channels + co) * plane;
            data[dst_off..dst_off + tc * plane]
                .copy_from_slice(&src[src_off..src_off + tc * plane]);
            co += tc;
        }
    }
    let parents: Vec<Tensor> = inputs.to_vec();
    Ok(Tensor::from_op(
        vec![b, channels, h, w],
        data,
        parents,
        move |g, parents| {
            for bi in 0..b {
                let mut co = 0usize;
                for p in parents {
                    let tc = p.shape()[1];
                    let src_off = (bi * channels + co) * plane;
                    let mut d = vec![0.0; p.len()];
                    let dst_off = bi * tc * plane;
                    d[dst_off..dst_off + tc * plane]
                        .copy_from_slice(&g[src_off..src_off + tc * plane]);
                    p.accumulate_grad(&d);
                    co += tc;
                }
            }
        },
    ))
}

/// Slice a contiguous channel range out of a 4-D tensor.
pub fn slice_channels(input: &Tensor, start: usize, count: usize) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::Geometry(format!(
            "slice_channels: expected 4-D tensor, got {:?}",
            s
        )));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if start + count > c {
        return Err(Error::Geometry(format!(
            "slice_channels: range {}..{} out of {} channels",
            start,
            start + count,
            c
        )));
    }
    let plane = h * w;
    let mut data = vec![0.0; b * count * plane];
    {
        let src = input.data();
        for bi in 0..b {
            let src_off = (bi * c + start) * plane;
            let dst_off = bi * count * plane;
            data[dst_off..dst_off + count * plane]
                .copy_from_slice(&src[src_off..src_off + count * plane]);
        }
    }
    Ok(Tensor::from_op(
        vec![b, count, h, w],
        data,
        vec![input.clone()],
        move |g, parents| {
            let mut d = vec![0.0; parents[0].len()];
            for bi in 0..b {
                let dst_off = (bi * c + start) * plane;
                let src_off = bi * count * plane;
                d[dst_off..dst_off + count * plane]
                    .copy_from_slice(&g[src_off..src_off + count * plane]);
            }
            parents[0].accumulate_grad(&d);
        },
    ))
}
