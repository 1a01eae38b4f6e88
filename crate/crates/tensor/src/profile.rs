//! Runtime multiply-accumulate counter for convolutions, linear maps and matmuls.
//!
//! Counts forward-pass MACs only; backward work is not counted.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn record_macs(n: usize) {
    MACS.with(|m| m.set(m.get() + n as u64));
}

/// Runs `f` and returns its result with the MACs executed on this thread meanwhile.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = MACS.with(Cell::get);
    let r = f();
    let after = MACS.with(Cell::get);
    (r, after - before)
}
