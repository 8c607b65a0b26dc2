//! Finite-difference verification of backward passes.
//!
//! Rebuilds the graph in `f64` and compares analytic gradients against central
//! differences at a deterministic sample of input coordinates. Keep test
//! tensors small: every sampled coordinate costs two forward passes.

use crate::tape::{Element, Tape, Tx};
use ndarray::ArrayD;

pub struct FdReport {
    pub checked: usize,
    /// Worst |analytic − numeric| / max(1, |analytic|, |numeric|).
    pub max_ratio: f64,
}

pub fn fd_check<F>(build: F, inputs: &[ArrayD<f64>], samples_per_input: usize) -> FdReport
where
    F: for<'a> Fn(&'a Tape<f64>, &[Tx<'a, f64>]) -> Tx<'a, f64>,
{
    let tape = Tape::new();
    let leaves: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = build(&tape, &leaves);
    assert_eq!(root.shape(), vec![1], "fd_check: root must be scalar [1]");
    let grads = tape.backward(root);
    let analytic: Vec<ArrayD<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(l, x)| grads.get(*l).cloned().unwrap_or_else(|| ArrayD::zeros(x.raw_dim())))
        .collect();

    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let t = Tape::new();
        let ls: Vec<_> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        build(&t, &ls).value()[[0]]
    };

    let mut checked = 0usize;
    let mut max_ratio = 0.0f64;
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let n = x.len();
        let mut state = 0x9e3779b97f4a7c15u64 ^ (i as u64);
        for s in 0..samples_per_input.min(n) {
            let idx = if n <= samples_per_input {
                s
            } else {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 17) as usize % n
            };
            let slice = work[i].as_slice_mut().unwrap();
            let x0 = slice[idx];
            let h = 1e-5 * x0.abs().max(1.0);
            slice[idx] = x0 + h;
            let fp = eval(&work);
            work[i].as_slice_mut().unwrap()[idx] = x0 - h;
            let fm = eval(&work);
            work[i].as_slice_mut().unwrap()[idx] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i].as_slice().unwrap()[idx];
            let ratio = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if ratio > max_ratio {
                max_ratio = ratio;
            }
            checked += 1;
        }
    }
    FdReport { checked, max_ratio }
}

/// Deterministic pseudo-random array with entries in `[lo, hi)`.
pub fn test_array<E: Element>(shape: &[usize], seed: u64, lo: f64, hi: f64) -> ArrayD<E> {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(0x2545f4914f6cdd1d);
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        E::cast(lo + (hi - lo) * ((state >> 11) as f64 / (1u64 << 53) as f64))
    })
}

/// Panics if any sampled coordinate disagrees beyond `tol`.
pub fn fd_assert<F>(build: F, inputs: &[ArrayD<f64>], samples_per_input: usize, tol: f64)
where
    F: for<'a> Fn(&'a Tape<f64>, &[Tx<'a, f64>]) -> Tx<'a, f64>,
{
    let r = fd_check(build, inputs, samples_per_input);
    assert!(
        r.max_ratio < tol,
        "gradient mismatch: worst ratio {:.3e} over {} samples (tol {:.1e})",
        r.max_ratio,
        r.checked,
        tol
    );
}
