//! Thread-local multiply counters.
//!
//! Every kernel in [`crate::tensor`] reports the multiplies it actually
//! executes. Multiply-accumulates inside convolutions and dense products are
//! tallied separately from elementwise multiplies (gating, affine scaling,
//! SGD updates), so the MAC tally can be compared one-to-one with analytic
//! FLOP counts.

use std::cell::Cell;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
    static ELEMENTWISE: Cell<u64> = const { Cell::new(0) };
}

/// Snapshot of the counters on the current thread.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MulCount {
    pub macs: u64,
    pub elementwise: u64,
}

impl MulCount {
    pub fn total(&self) -> u64 {
        self.macs + self.elementwise
    }
}

impl Add for MulCount {
    type Output = MulCount;
    fn add(self, rhs: MulCount) -> MulCount {
        MulCount {
            macs: self.macs + rhs.macs,
            elementwise: self.elementwise + rhs.elementwise,
        }
    }
}

impl Sub for MulCount {
    type Output = MulCount;
    fn sub(self, rhs: MulCount) -> MulCount {
        MulCount {
            macs: self.macs - rhs.macs,
            elementwise: self.elementwise - rhs.elementwise,
        }
    }
}

#[inline]
pub(crate) fn add_macs(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

#[inline]
pub(crate) fn add_elementwise(n: u64) {
    ELEMENTWISE.with(|c| c.set(c.get() + n));
}

pub fn read() -> MulCount {
    MulCount {
        macs: MACS.with(Cell::get),
        elementwise: ELEMENTWISE.with(Cell::get),
    }
}

pub fn reset() {
    MACS.with(|c| c.set(0));
    ELEMENTWISE.with(|c| c.set(0));
}

/// Runs `f` and returns its result together with the multiplies it issued on
/// this thread.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, MulCount) {
    let before = read();
    let out = f();
    (out, read() - before)
}
