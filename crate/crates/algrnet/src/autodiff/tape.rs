use std::cell::RefCell;
use std::rc::Rc;

use ndarray::ArrayD;

/// Handle into a [`Tape`]. Cheap to copy; only valid for the tape that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct BackOp {
    parents: Vec<usize>,
    func: BackFn,
}

struct Node {
    value: Rc<ArrayD<f64>>,
    back: Option<BackOp>,
}

/// Reverse-mode tape. One tape lives per forward/backward pass; ops append
/// nodes, `backward` walks them in reverse accumulating grads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
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

    /// Insert a leaf (input, parameter or constant). Leaves have no backward
    /// op; gradients accumulate on them and can be read after `backward`.
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, Vec::new(), None)
    }

    pub fn value(&self, v: Var) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<f64>,
        parents: Vec<usize>,
        func: Option<BackFn>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            back: func.map(|f| BackOp { parents, func: f }),
        });
        Var(id)
    }

    pub(crate) fn op(
        &self,
        value: ArrayD<f64>,
        parents: &[Var],
        func: impl Fn(&ArrayD<f64>) -> Vec<ArrayD<f64>> + 'static,
    ) -> Var {
        self.push(
            value,
            parents.iter().map(|p| p.0).collect(),
            Some(Box::new(func)),
        )
    }

    /// Backpropagate from `root` (seeded with ones) and return all gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(ArrayD::ones(nodes[root.0].value.raw_dim()));

        for id in (0..=root.0).rev() {
            let Some(op) = nodes[id].back.as_ref() else {
                continue;
            };
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let pgrads = (op.func)(&gout);
            debug_assert_eq!(pgrads.len(), op.parents.len());
            for (pid, pg) in op.parents.iter().zip(pgrads) {
                match &mut grads[*pid] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Result of a backward pass. Gradients for interior nodes that were consumed
/// during the walk are gone; leaf gradients remain.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
