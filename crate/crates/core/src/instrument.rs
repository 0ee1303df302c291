//! Per-thread call counters, used to show that evaluation never touches the
//! bank or the schedule.

use std::cell::Cell;

thread_local! {
    static BANK_SAMPLES: Cell<u64> = const { Cell::new(0) };
    static SCHEDULE_LOOKUPS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn note_bank_sample() {
    BANK_SAMPLES.with(|c| c.set(c.get() + 1));
}

pub(crate) fn note_schedule_lookup() {
    SCHEDULE_LOOKUPS.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub bank_samples: u64,
    pub schedule_lookups: u64,
}

pub fn snapshot() -> Counters {
    Counters {
        bank_samples: BANK_SAMPLES.with(Cell::get),
        schedule_lookups: SCHEDULE_LOOKUPS.with(Cell::get),
    }
}
