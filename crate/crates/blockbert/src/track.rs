//! Global allocation tracker for the toy runtime.
//!
//! Tensors register their buffers here when tracking is enabled, so a run can
//! report a live-byte high-water mark. Attention code additionally reports
//! every score-matrix buffer it materializes through [`Tracker::record_score_bytes`],
//! which gives an exact, auditable count of the quadratic memory component.
//!
//! The tracker is a single process-wide accumulator with atomic updates;
//! profiled runs must be serialized per process for the high-water mark to be
//! meaningful.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use crate::error::{Error, Result};

/// Panic payload used to simulate an out-of-memory condition when a byte
/// budget is configured. The bench harness catches this and marks the row OOM
/// instead of exhausting real memory.
#[derive(Debug, Clone, Copy)]
pub struct OomSimulated {
    pub live_bytes: usize,
    pub requested: usize,
    pub budget: usize,
}

#[derive(Debug)]
pub struct Tracker {
    enabled: AtomicBool,
    live: AtomicUsize,
    peak: AtomicUsize,
    score: AtomicUsize,
    /// 0 means unlimited.
    budget: AtomicUsize,
}

static TRACKER: Tracker = Tracker {
    enabled: AtomicBool::new(false),
    live: AtomicUsize::new(0),
    peak: AtomicUsize::new(0),
    score: AtomicUsize::new(0),
    budget: AtomicUsize::new(0),
};

pub fn tracker() -> &'static Tracker {
    &TRACKER
}

impl Tracker {
    pub fn enable(&self) {
        self.enabled.store(true, Ordering::SeqCst);
    }

    pub fn disable(&self) {
        self.enabled.store(false, Ordering::SeqCst);
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled.load(Ordering::SeqCst)
    }

    /// Zero all counters. Call between profiled runs, and only while no
    /// tracked tensors are live: dropping a tensor registered before the
    /// reset would drive the live counter below zero.
    pub fn reset(&self) {
        self.live.store(0, Ordering::SeqCst);
        self.peak.store(0, Ordering::SeqCst);
        self.score.store(0, Ordering::SeqCst);
    }

    /// Collapse the high-water mark down to the current live bytes.
    pub fn reset_peak(&self) {
        let live = self.live.load(Ordering::SeqCst);
        self.peak.store(live, Ordering::SeqCst);
    }

    pub fn set_budget(&self, bytes: Option<usize>) {
        self.budget.store(bytes.unwrap_or(0), Ordering::SeqCst);
    }

    pub fn live_bytes(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    /// Cumulative bytes of attention-score buffers materialized so far.
    pub fn score_bytes(&self) -> usize {
        self.score.load(Ordering::SeqCst)
    }

    /// Register an allocation. Returns true when the allocation was tracked
    /// (the caller must later call [`Tracker::release`] with the same size).
    ///
    /// Panics with [`OomSimulated`] when a byte budget is set and would be
    /// exceeded.
    pub fn acquire(&self, bytes: usize) -> bool {
        if !self.is_enabled() {
            return false;
        }
        let live = self.live.fetch_add(bytes, Ordering::SeqCst) + bytes;
        let budget = self.budget.load(Ordering::SeqCst);
        if budget > 0 && live > budget {
            // Undo before unwinding so the counter stays consistent.
            self.live.fetch_sub(bytes, Ordering::SeqCst);
            std::panic::panic_any(OomSimulated {
                live_bytes: live - bytes,
                requested: bytes,
                budget,
            });
        }
        self.peak.fetch_max(live, Ordering::SeqCst);
        true
    }

    pub fn release(&self, bytes: usize) {
        self.live.fetch_sub(bytes, Ordering::SeqCst);
    }

    pub fn record_score_bytes(&self, bytes: usize) {
        if self.is_enabled() {
            self.score.fetch_add(bytes, Ordering::SeqCst);
        }
    }
}

/// Run `f` with the tracker enabled and return `(result, activation_bytes)`,
/// where activation bytes are the high-water mark reached inside `f` minus the
/// bytes that were already live when it started. This mirrors the
/// "max allocated minus static memory" estimate.
pub fn profile_activation<T>(f: impl FnOnce() -> T) -> Result<(T, usize)> {
    let t = tracker();
    if !t.is_enabled() {
        return Err(Error::ProfilingDisabled);
    }
    let baseline = t.live_bytes();
    t.reset_peak();
    let out = f();
    let peak = t.peak_bytes();
    Ok((out, peak.saturating_sub(baseline)))
}

/// Tests that toggle the global tracker serialize behind this lock.
#[cfg(test)]
pub(crate) static TRACK_LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());
