use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{DiffError, Result};
use crate::real::Real;

pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &mut GradSink<'_, T>)>;

struct Node<T: Real> {
    len: usize,
    /// `None` marks a leaf.
    backward: Option<BackwardFn<T>>,
}

pub(crate) struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    leaf_grads: RefCell<Vec<Option<Vec<T>>>>,
}

/// Gradient buffers handed to backward closures.
pub(crate) struct GradSink<'a, T: Real> {
    bufs: &'a mut [Option<Vec<T>>],
    lens: &'a [usize],
}

impl<T: Real> GradSink<'_, T> {
    /// Mutable gradient buffer of node `id`, allocated as zeros on first use.
    pub(crate) fn slot(&mut self, id: Option<usize>) -> Option<&mut [T]> {
        let id = id?;
        let len = self.lens[id];
        Some(self.bufs[id].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
    }
}

/// A recording tape. Cloning yields another handle to the same tape.
#[derive(Clone)]
pub struct Graph<T: Real> {
    tape: Rc<Tape<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            tape: Rc::new(Tape {
                nodes: RefCell::new(Vec::new()),
                leaf_grads: RefCell::new(Vec::new()),
            }),
        }
    }

    /// Creates a trainable leaf tensor on this graph.
    pub fn leaf(&self, shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        self.leaf_shared(shape, Arc::new(data))
    }

    pub fn leaf_shared(&self, shape: &[usize], data: Arc<Vec<T>>) -> Result<Tensor<T>> {
        check_len("leaf", shape, data.len())?;
        let id = self.tape.push(data.len(), None);
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            node: Some(NodeRef {
                tape: self.tape.clone(),
                id,
            }),
        })
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.tape.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for g in self.tape.leaf_grads.borrow_mut().iter_mut() {
            *g = None;
        }
    }

    /// Back-propagates from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(DiffError::NonScalarLoss(loss.shape.clone()));
        }
        let Some(node) = &loss.node else {
            // constant loss: nothing reachable
            return Ok(());
        };
        if !Rc::ptr_eq(&node.tape, &self.tape) {
            return Err(DiffError::MixedGraphs);
        }
        let nodes = self.tape.nodes.borrow();
        let lens: Vec<usize> = nodes.iter().map(|n| n.len).collect();
        let mut bufs: Vec<Option<Vec<T>>> = (0..=node.id).map(|_| None).collect();
        bufs[node.id] = Some(vec![T::one()]);
        let mut leaf_grads = self.tape.leaf_grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize_with(nodes.len(), || None);
        }
        for id in (0..=node.id).rev() {
            let Some(g) = bufs[id].take() else { continue };
            match &nodes[id].backward {
                None => match &mut leaf_grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                },
                Some(bw) => {
                    let mut sink = GradSink {
                        bufs: &mut bufs[..id],
                        lens: &lens,
                    };
                    bw(&g, &mut sink);
                }
            }
        }
        Ok(())
    }

    pub(crate) fn ptr_eq(&self, tape: &Rc<Tape<T>>) -> bool {
        Rc::ptr_eq(&self.tape, tape)
    }
}

impl<T: Real> Tape<T> {
    fn push(&self, len: usize, backward: Option<BackwardFn<T>>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { len, backward });
        nodes.len() - 1
    }
}

#[derive(Clone)]
pub(crate) struct NodeRef<T: Real> {
    pub(crate) tape: Rc<Tape<T>>,
    pub(crate) id: usize,
}

/// A dense row-major array, optionally attached to a [`Graph`].
#[derive(Clone)]
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    node: Option<NodeRef<T>>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

pub(crate) fn check_len(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != len {
        return Err(DiffError::arg(
            op,
            format!("shape {shape:?} needs {n} values, got {len}"),
        ));
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    /// Untracked tensor.
    pub fn constant(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_len("constant", shape, data.len())?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn constant_shared(shape: &[usize], data: Arc<Vec<T>>) -> Result<Self> {
        check_len("constant", shape, data.len())?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            node: None,
        })
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![v]),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::zero(); n]),
            node: None,
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::constant(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn values(&self) -> &[T] {
        &self.data
    }

    pub fn shared_values(&self) -> Arc<Vec<T>> {
        self.data.clone()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, detached from any graph.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self) -> Option<Vec<T>> {
        let node = self.node.as_ref()?;
        node.tape.leaf_grads.borrow().get(node.id).cloned().flatten()
    }

    /// Whether this tensor was recorded on `graph`.
    pub fn belongs_to(&self, graph: &Graph<T>) -> bool {
        self.node.as_ref().is_some_and(|n| graph.ptr_eq(&n.tape))
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    pub(crate) fn data_arc(&self) -> &Arc<Vec<T>> {
        &self.data
    }

    /// Builds the result of an operation, recording `backward` when any
    /// parent is tracked.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: &[&Tensor<T>],
        backward: impl Fn(&[T], &mut GradSink<'_, T>) + 'static,
    ) -> Result<Self> {
        Self::from_op_shared(shape, Arc::new(data), parents, backward)
    }

    pub(crate) fn from_op_shared(
        shape: Vec<usize>,
        data: Arc<Vec<T>>,
        parents: &[&Tensor<T>],
        backward: impl Fn(&[T], &mut GradSink<'_, T>) + 'static,
    ) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut tape: Option<&Rc<Tape<T>>> = None;
        for p in parents {
            if let Some(n) = &p.node {
                match tape {
                    None => tape = Some(&n.tape),
                    Some(t) if Rc::ptr_eq(t, &n.tape) => {}
                    Some(_) => return Err(DiffError::MixedGraphs),
                }
            }
        }
        let node = match tape {
            None => None,
            Some(t) => {
                let id = t.push(data.len(), Some(Box::new(backward)));
                Some(NodeRef {
                    tape: t.clone(),
                    id,
                })
            }
        };
        Ok(Tensor { shape, data, node })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_are_untracked() {
        let c = Tensor::<f64>::constant(&[2], vec![1.0, 2.0]).unwrap();
        assert!(!c.is_tracked());
        assert!(c.grad().is_none());
        assert!(Tensor::<f64>::constant(&[3], vec![1.0]).is_err());
    }

    #[test]
    fn square_gradient() {
        let g = Graph::<f64>::new();
        let x = g.leaf(&[], vec![3.0]).unwrap();
        let loss = x.mul(&x).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let g = Graph::<f64>::new();
        let x = g.leaf(&[], vec![3.0]).unwrap();
        let loss = x.mul(&x).unwrap();
        g.backward(&loss).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        g.zero_grad();
        assert!(x.grad().is_none());
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::<f64>::new();
        let x = g.leaf(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(g.backward(&x), Err(DiffError::NonScalarLoss(_))));
    }

    #[test]
    fn mixed_graphs_rejected() {
        let g1 = Graph::<f64>::new();
        let g2 = Graph::<f64>::new();
        let a = g1.leaf(&[1], vec![1.0]).unwrap();
        let b = g2.leaf(&[1], vec![1.0]).unwrap();
        assert!(matches!(a.add(&b), Err(DiffError::MixedGraphs)));
    }
}
