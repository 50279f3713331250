//! Per-thread counters for recording tapes and optimizer steps.
//!
//! Assembly is required to be training-free; it snapshots these counters on
//! its own thread before and after the sweep.

use std::cell::Cell;

thread_local! {
    static TAPES: Cell<u64> = const { Cell::new(0) };
    static OPT_STEPS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn count_tape() {
    TAPES.with(|c| c.set(c.get() + 1));
}

pub(crate) fn count_optimizer_step() {
    OPT_STEPS.with(|c| c.set(c.get() + 1));
}

/// Recording tapes created on this thread so far.
pub fn tapes_created() -> u64 {
    TAPES.with(Cell::get)
}

/// Optimizer steps taken on this thread so far.
pub fn optimizer_steps() -> u64 {
    OPT_STEPS.with(Cell::get)
}

/// Counter snapshot; `since` gives the activity in between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub tapes: u64,
    pub optimizer_steps: u64,
}

impl Counters {
    pub fn now() -> Self {
        Self {
            tapes: tapes_created(),
            optimizer_steps: optimizer_steps(),
        }
    }

    pub fn since(self) -> Self {
        let now = Self::now();
        Self {
            tapes: now.tapes - self.tapes,
            optimizer_steps: now.optimizer_steps - self.optimizer_steps,
        }
    }
}
