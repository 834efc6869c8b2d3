use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic and batch-statistic layers run in training or inference form.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Arguments handed to a backward rule.
pub struct BackwardArgs<'a, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a [T],
    pub output: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    /// `needs[i]` is true when input `i` participates in differentiation.
    pub needs: Vec<bool>,
}

/// Maps the output gradient to one optional gradient per input, each with the
/// input's element count.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    grad: Option<Vec<T>>,
}

/// Records a single forward pass. Node indices are assigned in creation order,
/// so every operation's inputs precede it and reverse index order is a valid
/// reverse topological order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Leaves with `requires_grad` receive a gradient from `backward`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            backward: None,
            grad: None,
        })
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records an operation. The backward rule is dropped when no input
    /// requires a gradient, making the output a constant.
    pub fn record(&mut self, value: Tensor<T>, inputs: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Node {
            value,
            requires_grad,
            inputs: if requires_grad { inputs.to_vec() } else { Vec::new() },
            backward: requires_grad.then_some(backward),
            grad: None,
        })
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by [`Tape::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    /// Propagates d(loss)/d(node) to every node reachable from `loss`.
    ///
    /// May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if self.backward_done {
            return Err(TensorError::Contract("backward already ran on this tape".into()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            let input_grads = {
                let node = &self.nodes[idx];
                match &node.backward {
                    None => None,
                    Some(rule) => {
                        let args = BackwardArgs {
                            grad: &grad,
                            output: &node.value,
                            inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                            needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
                        };
                        Some(rule(&args))
                    }
                }
            };
            if let Some(input_grads) = input_grads {
                let inputs = self.nodes[idx].inputs.clone();
                debug_assert_eq!(inputs.len(), input_grads.len());
                for (v, g) in inputs.into_iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    let target = &mut self.nodes[v.0];
                    if !target.requires_grad {
                        continue;
                    }
                    debug_assert_eq!(g.len(), target.value.numel(), "gradient length");
                    match &mut target.grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        None => target.grad = Some(g),
                    }
                }
            }
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }
}
