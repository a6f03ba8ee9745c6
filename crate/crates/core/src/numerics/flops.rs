//! Instrumented floating-point operation counter.
//!
//! Every numeric kernel reports its cost here as it runs, so a debug forward
//! pass wrapped in [`measure`] yields the exact operation count of that pass.
//! The cost model in [`crate::costmodel`] is the analytic counterpart.
//!
//! Conventions: a multiply-accumulate is 2 flops; elementwise activations,
//! bias adds, residual adds and scalings are 1 flop per scalar op, using the
//! per-element constants below.

use std::cell::Cell;

/// Per-element cost of layer normalization: mean accumulate, centering,
/// squared accumulate (2), normalize, affine (2).
pub const LAYERNORM: u64 = 7;
/// Per-element cost of a numerically stable softmax: max, subtract+exp (2),
/// sum, divide.
pub const SOFTMAX: u64 = 5;
/// sigmoid followed by a multiply.
pub const SWISH: u64 = 2;
/// Per gated output: sigmoid of the gate half, then multiply.
pub const GLU: u64 = 2;
pub const SIGMOID: u64 = 1;
pub const RELU: u64 = 1;
/// Any performer kernel function `f` applied elementwise.
pub const KERNEL_FN: u64 = 1;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub fn add(n: u64) {
    COUNTER.with(|c| c.set(c.get().wrapping_add(n)));
}

pub fn read() -> u64 {
    COUNTER.with(|c| c.get())
}

/// Runs `f` and returns its result together with the number of flops it
/// performed on this thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let start = read();
    let out = f();
    (out, read().wrapping_sub(start))
}
