//! Dense tensors with reverse-mode gradients.
//!
//! A [`Tensor`] is an immutable value plus a gradient slot. Operations record
//! the graph as they run: each result keeps handles to its inputs and a
//! closure that turns the upstream gradient into per-input gradients.
//! [`Tensor::backward`] walks the recorded graph from a scalar loss in reverse
//! creation order and accumulates into the grad slot of every reachable
//! tensor that requires a gradient. Results whose inputs carry no gradient
//! requirement drop the recording entirely, so inference passes build no
//! graph.
//!
//! Values are stored as `f64`, row-major.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Context handed to a backward closure.
pub struct BackCtx<'a> {
    /// Forward value of the node being differentiated.
    pub out_data: &'a [f64],
    /// Upstream gradient, same length as `out_data`.
    pub out_grad: &'a [f64],
    /// The node's inputs, in the order they were passed to the op.
    pub parents: &'a [Tensor],
}

/// Maps the upstream gradient to one gradient per parent (`None` skips a parent).
pub type BackwardFn = Box<dyn Fn(&BackCtx) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Shared handle to an immutable tensor value.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_finite(op: &'static str, data: &[f64]) {
    debug_assert!(
        data.iter().all(|v| v.is_finite()),
        "{op} produced a non-finite value"
    );
}

impl Tensor {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                parents,
                backward,
            }),
        }
    }

    /// Constant leaf; no gradient is ever accumulated into it.
    pub fn leaf(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new_inner(shape, data, false, Vec::new(), None)
    }

    /// Learnable leaf; `backward` accumulates into its grad slot.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new_inner(shape, data, true, Vec::new(), None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(vec![1], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::leaf(shape, vec![0.0; n])
    }

    /// Result of an operation. The recording is kept only when some parent
    /// requires a gradient; otherwise parents and closure are dropped.
    pub fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        check_finite(op, &data);
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Tensor::new_inner(shape, data, true, parents, Some(backward))
        } else {
            Tensor::new_inner(shape, data, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    /// Detached view: same values, no gradient requirement, no history.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.inner.shape.clone(), self.inner.data.clone())
    }

    fn accumulate_grad_slot(&self, g: &[f64]) {
        let mut slot = self.inner.grad.lock().unwrap();
        match slot.as_mut() {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Gradients are added into the grad slot of every reachable tensor with
    /// `requires_grad`, so calling this twice without clearing doubles them.
    pub fn backward(&self) -> Result<()> {
        if !self.is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Reachable sub-graph, then reverse creation order. Creation ids are
        // strictly increasing and every parent predates its consumer, so
        // descending id order is a valid reverse topological order.
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.inner.id) {
                continue;
            }
            for p in &t.inner.parents {
                stack.push(p.clone());
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));

        // Per-call upstream accumulators keep repeated backward() calls
        // independent while the grad slots accumulate across calls.
        let mut upstream: std::collections::HashMap<u64, Vec<f64>> = std::collections::HashMap::new();
        upstream.insert(self.inner.id, vec![1.0]);

        for node in &nodes {
            let g = match upstream.remove(&node.inner.id) {
                Some(g) => g,
                None => continue,
            };
            node.accumulate_grad_slot(&g);
            let backward = match &node.inner.backward {
                Some(b) => b,
                None => continue,
            };
            let ctx = BackCtx {
                out_data: &node.inner.data,
                out_grad: &g,
                parents: &node.inner.parents,
            };
            let parent_grads = backward(&ctx);
            assert_eq!(
                parent_grads.len(),
                node.inner.parents.len(),
                "backward closure returned wrong arity"
            );
            for (parent, pg) in node.inner.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                assert_eq!(pg.len(), parent.numel(), "gradient length mismatch");
                match upstream.get_mut(&parent.inner.id) {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&pg) {
                            *a += v;
                        }
                    }
                    None => {
                        upstream.insert(parent.inner.id, pg);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn sum_backward_is_ones() {
        let x = Tensor::param(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0]);
        let loss = ops::sum_all(&x);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn half_square_sum_backward_is_input() {
        let data = vec![1.0, -2.0, 3.0, 0.25];
        let x = Tensor::param(vec![4], data.clone());
        let sq = ops::mul(&x, &x).unwrap();
        let loss = ops::affine(&ops::sum_all(&sq), 0.5, 0.0);
        loss.backward().unwrap();
        let g = x.grad().unwrap();
        for (gi, xi) in g.iter().zip(&data) {
            assert!((gi - xi).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::param(vec![2], vec![1.0, 2.0]);
        assert!(x.backward().is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(vec![2], vec![1.0, 2.0]);
        let loss = ops::sum_all(&x);
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn no_graph_without_requires_grad() {
        let x = Tensor::leaf(vec![2], vec![1.0, 2.0]);
        let y = ops::sum_all(&x);
        assert!(!y.requires_grad());
        assert!(y.inner.parents.is_empty());
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let x = Tensor::param(vec![1], vec![3.0]);
        let sq = ops::mul(&x, &x).unwrap();
        let y = ops::add(&sq, &x).unwrap();
        ops::sum_all(&y).backward().unwrap();
        assert!((x.grad().unwrap()[0] - 7.0).abs() < 1e-12);
    }
}
