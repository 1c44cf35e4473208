//! Thread-confined accounting of live tensor bytes.
//!
//! Every [`Tensor`](super::Tensor) buffer registers its logical size (4 bytes
//! per element in f32 mode, 8 in f64 mode) on creation and releases it on
//! drop. A search run reads the high-water mark as its memory proxy.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn register(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn release(bytes: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Bytes currently held by tensors created on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Restart peak tracking from the current live total.
pub fn reset_peak() {
    let live = live_bytes();
    PEAK.with(|peak| peak.set(live));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{DType, Tensor};

    #[test]
    fn peak_follows_allocations() {
        reset_peak();
        let base = live_bytes();
        {
            let _a = Tensor::zeros(&[10], DType::F64);
            let _b = Tensor::zeros(&[10], DType::F32);
            assert_eq!(live_bytes(), base + 80 + 40);
        }
        assert_eq!(live_bytes(), base);
        assert_eq!(peak_bytes(), base + 120);
        reset_peak();
        assert_eq!(peak_bytes(), base);
    }
}
