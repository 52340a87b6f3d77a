//! Reverse-mode engine: graph nodes and the backward sweep.

use super::param::ParamInner;
use super::Shape;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

pub(crate) enum NodeKind<T: Scalar> {
    /// Graph entry point. When `sink` is set, gradients reaching the leaf
    /// accumulate on that parameter.
    Leaf { sink: Option<Arc<ParamInner<T>>> },
    /// Interior op. `parents` pairs each differentiable input's original
    /// argument position with its node; `backward` returns gradients indexed
    /// by argument position.
    Op {
        parents: Vec<(usize, Arc<Node<T>>)>,
        backward: BackwardFn<T>,
    },
}

pub(crate) struct Node<T: Scalar> {
    shape: Shape,
    grad: Mutex<Option<Vec<T>>>,
    consumed: AtomicBool,
    kind: NodeKind<T>,
}

impl<T: Scalar> Node<T> {
    pub(crate) fn leaf(shape: Shape, sink: Option<Arc<ParamInner<T>>>) -> Arc<Self> {
        Arc::new(Node {
            shape,
            grad: Mutex::new(None),
            consumed: AtomicBool::new(false),
            kind: NodeKind::Leaf { sink },
        })
    }

    pub(crate) fn op(
        shape: Shape,
        parents: Vec<(usize, Arc<Node<T>>)>,
        backward: BackwardFn<T>,
    ) -> Arc<Self> {
        Arc::new(Node {
            shape,
            grad: Mutex::new(None),
            consumed: AtomicBool::new(false),
            kind: NodeKind::Op { parents, backward },
        })
    }

    pub(crate) fn grad(&self) -> Option<Vec<T>> {
        self.grad.lock().unwrap().clone()
    }

    fn accumulate(&self, contribution: &[T]) {
        let mut slot = self.grad.lock().unwrap();
        match slot.as_mut() {
            Some(g) => {
                for (dst, &src) in g.iter_mut().zip(contribution) {
                    *dst += src;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }
}

/// Depth-first post-order from the root; reversed it is a topological order
/// in which every node appears before the nodes it consumes.
fn topo_order<T: Scalar>(root: &Arc<Node<T>>) -> Vec<Arc<Node<T>>> {
    let mut order = Vec::new();
    let mut seen: HashSet<*const Node<T>> = HashSet::new();
    // (node, parents_pushed)
    let mut stack: Vec<(Arc<Node<T>>, bool)> = vec![(Arc::clone(root), false)];
    while let Some((node, expanded)) = stack.pop() {
        let key = Arc::as_ptr(&node);
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(key) {
            continue;
        }
        stack.push((Arc::clone(&node), true));
        if let NodeKind::Op { parents, .. } = &node.kind {
            for (_, p) in parents {
                if !seen.contains(&Arc::as_ptr(p)) {
                    stack.push((Arc::clone(p), false));
                }
            }
        }
    }
    order.reverse();
    order
}

pub(crate) fn run_backward<T: Scalar>(root: &Arc<Node<T>>) -> Result<()> {
    if root.consumed.swap(true, Ordering::SeqCst) {
        return Err(Error::BackwardConsumed);
    }
    root.accumulate(&vec![T::one(); root.shape.numel()]);

    for node in topo_order(root) {
        let upstream = match node.grad() {
            Some(g) => g,
            None => continue,
        };
        match &node.kind {
            NodeKind::Leaf { sink } => {
                if let Some(param) = sink {
                    param.accumulate_grad(&upstream);
                }
            }
            NodeKind::Op { parents, backward } => {
                let mut grads = backward(&upstream);
                for (arg_idx, parent) in parents {
                    if let Some(g) = grads.get_mut(*arg_idx).and_then(Option::take) {
                        debug_assert_eq!(g.len(), parent.shape.numel());
                        parent.accumulate(&g);
                    }
                }
            }
        }
    }
    Ok(())
}
