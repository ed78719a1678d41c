//! Thread-local accounting of live tensor-buffer bytes.
//!
//! Tensor constructors report their data-buffer size here and the buffer is
//! subtracted again on drop, so a test or benchmark can measure how much
//! tensor memory an expression materializes without touching the global
//! allocator. Counters are per thread; measurements are only meaningful for
//! work done on the measuring thread.

use std::cell::Cell;

thread_local! {
    static CURRENT: Cell<i64> = Cell::new(0);
    static PEAK: Cell<i64> = Cell::new(0);
}

pub(crate) fn on_alloc(bytes: usize) {
    CURRENT.with(|c| {
        let now = c.get() + bytes as i64;
        c.set(now);
        PEAK.with(|p| {
            if now > p.get() {
                p.set(now);
            }
        });
    });
}

pub(crate) fn on_free(bytes: usize) {
    CURRENT.with(|c| c.set(c.get() - bytes as i64));
}

/// Bytes held by tensors currently alive on this thread.
pub fn current_bytes() -> i64 {
    CURRENT.with(|c| c.get())
}

/// High-water mark since the last [`reset_peak`] on this thread.
pub fn peak_bytes() -> i64 {
    PEAK.with(|p| p.get())
}

/// Reset the high-water mark to the current live level.
pub fn reset_peak() {
    let cur = current_bytes();
    PEAK.with(|p| p.set(cur));
}

/// Run `f` and return its result together with the peak number of tensor
/// bytes allocated on top of what was already live when `f` started.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, i64) {
    let base = current_bytes();
    reset_peak();
    let r = f();
    (r, peak_bytes() - base)
}
