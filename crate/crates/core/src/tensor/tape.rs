use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{Result, Tensor, TensorError};

pub type NodeId = usize;

type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink)>;

struct Node {
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Records the forward computation. Nodes are appended in evaluation order,
/// so every node's inputs precede it and a reverse sweep is topological.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, backward: Option<BackwardFn>) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value: Rc::new(value),
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf holding a copy of `t`; tracks gradients iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), None)
    }

    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, None)
    }

    pub fn constant(&self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var<'_>> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(TensorError::Shape {
                op: "constant",
                lhs: shape,
                rhs: vec![value.len()],
            });
        }
        Ok(self.push(shape, value, false, None))
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push(vec![1], vec![v], false, None)
    }

    /// Records a custom op. `backward` receives the output gradient and must
    /// add input gradients through the sink; it only runs when at least one
    /// input tracks gradients.
    pub fn custom<F>(&self, inputs: &[Var<'_>], shape: Vec<usize>, value: Vec<f64>, backward: F) -> Var<'_>
    where
        F: Fn(&[f64], &mut GradSink) + 'static,
    {
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        self.push(shape, value, requires_grad, Some(Box::new(backward)))
    }

    pub(crate) fn node_value(&self, id: NodeId) -> Rc<Vec<f64>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn node_shape(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    pub(crate) fn node_requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let shape = loss.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let nodes = self.nodes.borrow();
        let mut sink = GradSink {
            grads: vec![None; nodes.len()],
            lens: nodes.iter().map(|n| n.value.len()).collect(),
        };
        sink.grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Some(f) = &node.backward {
                if let Some(g) = sink.grads[id].take() {
                    f(&g, &mut sink);
                    sink.grads[id] = Some(g);
                }
            }
        }
        Ok(Gradients { grads: sink.grads })
    }
}

/// Destination for input gradients during a backward sweep.
pub struct GradSink {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl GradSink {
    /// Zero-initialized accumulation buffer for node `id`.
    pub fn slot(&mut self, id: NodeId) -> &mut [f64] {
        let len = self.lens[id];
        self.grads[id].get_or_insert_with(|| vec![0.0; len])
    }

    pub fn add(&mut self, id: NodeId, g: &[f64]) {
        let slot = self.slot(id);
        slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; v.numel()], <[f64]>::to_vec)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node_shape(self.id)
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn value(&self) -> Rc<Vec<f64>> {
        self.tape.node_value(self.id)
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        self.value()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.node_requires_grad(self.id)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape(), self.value().to_vec()).expect("tape holds valid shapes")
    }
}
