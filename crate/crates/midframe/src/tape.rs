//! Reverse-mode autodiff on a flat tape.
//!
//! Values are `(C, H, W)` (or scalar `[1]`) dynamic-dim arrays. Each op pushes
//! one node whose backward closure returns `(parent_id, gradient)` pairs; the
//! tape is append-only, so reverse id order is a valid topological order.
//! Single-threaded by design: training walks one tape per sample.

use ndarray::ArrayD;
use std::cell::RefCell;
use std::rc::Rc;

pub trait Element:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + rustfft::FftNum
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn cast(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).unwrap()
    }
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
}
impl Element for f64 {
    fn as_f64(self) -> f64 {
        self
    }
}

pub type BackFn<E> = Box<dyn FnOnce(&ArrayD<E>) -> Vec<(usize, ArrayD<E>)>>;

struct Node<E> {
    value: Rc<ArrayD<E>>,
    back: Option<BackFn<E>>,
}

pub struct Tape<E: Element> {
    nodes: RefCell<Vec<Node<E>>>,
}

/// Handle to a tape node. Cheap to copy; tied to the tape's lifetime.
#[derive(Clone, Copy)]
pub struct Tx<'t, E: Element> {
    pub(crate) tape: &'t Tape<E>,
    pub(crate) id: usize,
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&self, value: ArrayD<E>, back: Option<BackFn<E>>) -> Tx<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), back });
        Tx { tape: self, id: nodes.len() - 1 }
    }

    /// Input node; receives gradients but has no parents.
    pub fn leaf(&self, value: ArrayD<E>) -> Tx<'_, E> {
        self.push(value, None)
    }

    /// Accumulate gradients of `root` (summed to a scalar seed of ones)
    /// with respect to every node.
    pub fn backward(&self, root: Tx<'_, E>) -> Grads<E> {
        let n = self.len();
        let mut grads: Vec<Option<ArrayD<E>>> = (0..n).map(|_| None).collect();
        let seed_shape = self.nodes.borrow()[root.id].value.shape().to_vec();
        grads[root.id] = Some(ArrayD::ones(seed_shape));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let back = self.nodes.borrow_mut()[id].back.take();
            if let Some(back) = back {
                for (pid, pg) in back(&g) {
                    debug_assert!(pid < id, "backward edge must point to an earlier node");
                    match &mut grads[pid] {
                        Some(acc) => acc.zip_mut_with(&pg, |a, &b| *a = *a + b),
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Grads { grads }
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Grads<E> {
    grads: Vec<Option<ArrayD<E>>>,
}

impl<E: Element> Grads<E> {
    pub fn get(&self, t: Tx<'_, E>) -> Option<&ArrayD<E>> {
        self.grads[t.id].as_ref()
    }

    pub fn take(&mut self, t: Tx<'_, E>) -> Option<ArrayD<E>> {
        self.grads[t.id].take()
    }

    pub fn get_id(&self, id: usize) -> Option<&ArrayD<E>> {
        self.grads[id].as_ref()
    }

    pub fn take_id(&mut self, id: usize) -> Option<ArrayD<E>> {
        self.grads[id].take()
    }
}

impl<'t, E: Element> Tx<'t, E> {
    pub fn value(&self) -> Rc<ArrayD<E>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use ndarray::arr1;

    #[test]
    fn backward_accumulates_over_fanout() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(arr1(&[2.0, -3.0]).into_dyn());
        let a = ops::add(x, x);
        let b = ops::mul(a, x);
        let s = ops::mean(b);
        let g = tape.backward(s);
        // s = mean(2x^2); ds/dx = 2x
        let gx = g.get(x).unwrap();
        assert!((gx[[0]] - 4.0).abs() < 1e-12);
        assert!((gx[[1]] + 6.0).abs() < 1e-12);
    }

    #[test]
    fn unused_nodes_get_no_gradient() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(arr1(&[1.0]).into_dyn());
        let y = tape.leaf(arr1(&[5.0]).into_dyn());
        let s = ops::mean(x);
        let g = tape.backward(s);
        assert!(g.get(y).is_none());
    }
}
