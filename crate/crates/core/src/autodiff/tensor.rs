use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::{Element, Result, TensorError};

thread_local! {
    static CHECKED: Cell<bool> = const { Cell::new(false) };
}

/// Enables NaN/Inf detection on every forward output and every gradient
/// produced during backward, for the current thread.
pub fn set_checked_mode(on: bool) {
    CHECKED.with(|c| c.set(on));
}

pub fn checked_mode() -> bool {
    CHECKED.with(|c| c.get())
}

pub(crate) fn check_finite<T: Element>(op: &'static str, values: &[T]) -> Result<()> {
    if checked_mode() && values.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op });
    }
    Ok(())
}

/// Gradient rule of a recorded operation.
pub trait Backward<T: Element> {
    fn name(&self) -> &'static str;

    /// Given the gradient of the loss with respect to this operation's
    /// output, returns one entry per parent: the gradient with respect to
    /// that parent, or `None` when the parent does not require one.
    fn backward(&self, parents: &[Tensor<T>], output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Element> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    op: Option<Box<dyn Backward<T>>>,
}

/// A reference-counted node of the computation graph. Cloning is cheap and
/// shares the node.
pub struct Tensor<T: Element>(Rc<Node<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.as_ref().map(|o| o.name()))
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    fn leaf(data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(TensorError::DataLength { len: data.len(), shape: shape.to_vec() });
        }
        Ok(Tensor(Rc::new(Node {
            shape: shape.to_vec(),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            op: None,
        })))
    }

    /// A constant leaf.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// A trainable leaf whose gradient is accumulated by [`Tensor::backward`].
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(vec![T::zero(); shape.iter().product()], shape, false).expect("length matches")
    }

    pub fn scalar(v: T) -> Self {
        Self::leaf(vec![v], &[], false).expect("length matches")
    }

    /// Records the output of an operation. When no parent requires a
    /// gradient the result is a plain constant and nothing is recorded.
    pub fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        op: impl Backward<T> + 'static,
    ) -> Result<Self> {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        check_finite(op.name(), &data)?;
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let op = requires_grad.then(|| Box::new(op) as Box<dyn Backward<T>>);
        let parents = if requires_grad { parents } else { Vec::new() };
        Ok(Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            op,
        })))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    /// Batch, channels, height, width of a rank-4 tensor.
    pub fn nchw(&self) -> Option<(usize, usize, usize, usize)> {
        match self.0.shape.as_slice() {
            &[n, c, h, w] => Some((n, c, h, w)),
            _ => None,
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values, for optimizers and loaders. Mutating a
    /// tensor that already feeds a recorded graph invalidates that graph.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// A constant copy cut off from the graph.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::new(self.to_vec(), self.shape()).expect("same length")
    }

    pub fn same_node(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> *const Node<T> {
        Rc::as_ptr(&self.0)
    }

    /// Back-propagates from this scalar, adding into the `grad` of every
    /// leaf that requires one. Repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        let mut pending: HashMap<*const Node<T>, Vec<T>> = HashMap::new();
        pending.insert(self.key(), vec![T::one()]);
        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.key()) else { continue };
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a = *a + *g),
                        None => *slot = Some(grad),
                    }
                }
                Some(op) => {
                    let data = node.0.data.borrow();
                    let grads = op.backward(&node.0.parents, &data, &grad);
                    debug_assert_eq!(grads.len(), node.0.parents.len());
                    for (parent, g) in node.0.parents.iter().zip(grads) {
                        let Some(g) = g else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.len(), parent.numel(), "{}", op.name());
                        check_finite(op.name(), &g)?;
                        match pending.get_mut(&parent.key()) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                            None => {
                                pending.insert(parent.key(), g);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable through gradient-requiring edges, parents first.
    fn topological_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // iterative post-order DFS: (node, next parent index)
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.key());
        while let Some((node, idx)) = stack.pop() {
            if idx < node.0.parents.len() {
                let parent = node.0.parents[idx].clone();
                stack.push((node, idx + 1));
                if parent.requires_grad() && visited.insert(parent.key()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}
