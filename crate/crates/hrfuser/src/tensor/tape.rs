use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_UID: AtomicU64 = AtomicU64::new(1);

/// Closure that maps the output gradient to per-input gradients.
///
/// `sink(i, g)` hands the gradient `g` for input `i`; inputs that receive no
/// gradient (integer indices, saved constants) are simply never sunk.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &mut dyn FnMut(usize, Vec<f64>))>;

struct Node {
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

/// Records operations eagerly as they execute, in topological order.
///
/// One tape per forward pass. [`Tape::backward`] may be called exactly once;
/// build a fresh tape for the next step. A tape constructed with
/// [`Tape::inference`] skips recording entirely (but still counts flops),
/// which is what evaluation and profiling use.
pub struct Tape {
    uid: u64,
    recording: bool,
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    flops: Cell<u64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// Forward-only tape: no nodes are recorded, backward is unavailable.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Tape {
            uid: NEXT_TAPE_UID.fetch_add(1, Ordering::Relaxed),
            recording,
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            flops: Cell::new(0),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Multiply-accumulate-based flop tally of every op run against this tape.
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    pub fn add_flops(&self, n: u64) {
        self.flops.set(self.flops.get() + n);
    }

    /// Record `out = op(inputs)` with its backward rule. No-op on inference
    /// tapes or when no input can route a gradient anywhere.
    pub(crate) fn record(&self, out: &Tensor, inputs: &[&Tensor], backward: BackwardFn) {
        if !self.recording {
            return;
        }
        let relevant = inputs
            .iter()
            .any(|t| t.requires_grad() || matches!(t.node(), Some((uid, _)) if uid == self.uid));
        if !relevant {
            return;
        }
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(Node {
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward,
        });
        out.set_node(self.uid, idx);
    }

    /// Reverse sweep from a scalar loss: populates `grad` on every
    /// `requires_grad` leaf reachable from it.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if self.consumed.get() {
            return Err(Error::Autodiff(
                "backward already ran on this tape; build a fresh tape per step".into(),
            ));
        }
        let loss_idx = match loss.node() {
            Some((uid, idx)) if uid == self.uid => idx as usize,
            _ => {
                return Err(Error::Autodiff(
                    "loss is not attached to this tape (detached graph)".into(),
                ))
            }
        };
        self.consumed.set(true);

        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss_idx] = Some(vec![1.0]);

        for idx in (0..=loss_idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let mut sink = |input_idx: usize, ig: Vec<f64>| {
                let input = &node.inputs[input_idx];
                match input.node() {
                    Some((uid, j)) if uid == self.uid => {
                        let slot = &mut grads[j as usize];
                        match slot.as_mut() {
                            Some(acc) => {
                                debug_assert_eq!(acc.len(), ig.len());
                                for (a, v) in acc.iter_mut().zip(&ig) {
                                    *a += v;
                                }
                            }
                            None => *slot = Some(ig),
                        }
                    }
                    _ => {
                        if input.requires_grad() {
                            input.accumulate_leaf_grad(&ig);
                        }
                    }
                }
            };
            (node.backward)(&g, &mut sink);
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn backward_twice_is_an_error() {
        let tape = Tape::new();
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let s = ops::sum_all(&tape, &x);
        tape.backward(&s).unwrap();
        assert!(matches!(tape.backward(&s), Err(Error::Autodiff(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = ops::relu(&tape, &x);
        assert!(matches!(tape.backward(&y), Err(Error::Autodiff(_))));
    }

    #[test]
    fn detached_loss_rejected() {
        let tape = Tape::new();
        let x = Tensor::scalar(3.0);
        assert!(matches!(tape.backward(&x), Err(Error::Autodiff(_))));
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference();
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = ops::relu(&tape, &x);
        assert!(y.node().is_none());
        assert_eq!(tape.num_nodes(), 0);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let tape = Tape::new();
        let x = Tensor::param(vec![0.5, -1.0, 2.0, 3.0, -0.25, 4.0], &[2, 3]).unwrap();
        let s = ops::sum_all(&tape, &x);
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn elementwise_square_gradient() {
        let tape = Tape::new();
        let x = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let y = ops::mul(&tape, &x, &x).unwrap();
        let s = ops::sum_all(&tape, &y);
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
    }
}
