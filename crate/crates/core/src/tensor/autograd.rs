//! Backward-rule records and the tape that replays them.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};

use super::{Element, Result, Tensor, TensorError};

/// Per-op context handed to a backward rule.
pub(crate) struct BackwardContext<'a, T: Element> {
    /// Gradient of the loss w.r.t. this op's output.
    pub grad_output: &'a [T],
    /// The op's forward output values.
    pub output: &'a [T],
    pub inputs: &'a [Tensor<T>],
}

type BackwardFn<T> = Box<dyn Fn(&BackwardContext<'_, T>) -> Vec<Option<Vec<T>>>>;

/// How a non-leaf tensor was produced: its inputs plus a closure mapping the
/// output gradient to per-input gradients (`None` for untracked inputs).
pub(crate) struct BackwardRule<T: Element> {
    pub inputs: Vec<Tensor<T>>,
    pub backward: BackwardFn<T>,
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled on this thread. Forward passes
/// inside build no tape and retain no intermediate buffers.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    GRAD_ENABLED.with(|flag| {
        let prev = flag.get();
        flag.set(false);
        let out = f();
        flag.set(prev);
        out
    })
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|flag| flag.get())
}

/// The ordered record of executed operations reachable from one root: every
/// operation appears after the producers of its inputs, so a single reverse
/// sweep propagates all gradients.
pub struct Tape<T: Element> {
    /// Topological order, root last. Only tensors with backward rules appear.
    nodes: Vec<Tensor<T>>,
}

impl<T: Element> Tape<T> {
    /// Collects the graph below `root` in topological order (iterative DFS).
    pub fn trace(root: &Tensor<T>) -> Tape<T> {
        let mut nodes = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // (tensor, expanded) stack entries: first visit pushes children,
        // second visit appends the node itself.
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                nodes.push(t);
                continue;
            }
            if t.rule().is_none() || visited.contains(&t.id()) {
                continue;
            }
            visited.insert(t.id());
            stack.push((t.clone(), true));
            if let Some(rule) = t.rule() {
                for input in &rule.inputs {
                    if input.rule().is_some() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// One reverse traversal: seeds the root with 1, walks ops in reverse
    /// topological order, and deposits gradients into `requires_grad` leaves.
    pub(crate) fn backprop(&self, root: &Tensor<T>) -> Result<()> {
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(root.id(), vec![T::one(); root.numel()]);
        if root.requires_grad() {
            root.accumulate_grad(&[T::one()]);
        }

        for node in self.nodes.iter().rev() {
            let grad_out = match grads.remove(&node.id()) {
                Some(g) => g,
                None => continue, // not on a path to the root
            };
            let rule = node.rule().expect("tape nodes carry rules");
            let input_grads = {
                let out_data = node.data();
                let ctx = BackwardContext {
                    grad_output: &grad_out,
                    output: &out_data,
                    inputs: &rule.inputs,
                };
                (rule.backward)(&ctx)
            };
            debug_assert_eq!(input_grads.len(), rule.inputs.len());
            for (input, grad) in rule.inputs.iter().zip(input_grads) {
                let Some(grad) = grad else { continue };
                debug_assert_eq!(grad.len(), input.numel());
                if input.requires_grad() {
                    input.accumulate_grad(&grad);
                }
                if input.rule().is_some() {
                    match grads.get_mut(&input.id()) {
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&grad) {
                                *a += *g;
                            }
                        }
                        None => {
                            grads.insert(input.id(), grad);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Builds an op result: attaches a backward rule when recording is enabled and
/// any input is tracked, and enforces the finite-output invariant in checked
/// mode.
pub(crate) fn make_result<T: Element>(
    op: &'static str,
    shape: Vec<usize>,
    data: Vec<T>,
    inputs: Vec<Tensor<T>>,
    backward: impl Fn(&BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
) -> Result<Tensor<T>> {
    if super::checked_mode() && data.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op });
    }
    let rule = if grad_enabled() && inputs.iter().any(Tensor::tracked) {
        Some(BackwardRule {
            inputs,
            backward: Box::new(backward),
        })
    } else {
        None
    };
    Ok(Tensor::from_rule(shape, data, rule))
}
