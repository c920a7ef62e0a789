//! Activation-element accounting.
//!
//! A [`MemTrace`] records, for the current thread, how many tensor elements
//! are live at once while it is active. Tensors allocated before the trace
//! started (inputs, weights) are not counted, so the peak reflects activation
//! buffers only. The cost model predicts these peaks analytically and the
//! tests require an exact match.

use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};

thread_local! {
    static ACTIVE: Cell<u64> = const { Cell::new(0) };
    static CURRENT: Cell<u64> = const { Cell::new(0) };
    static PEAK: Cell<u64> = const { Cell::new(0) };
}

// Globally unique so a tensor moved across threads can never match another
// thread's active trace.
static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Live recording of tensor allocations on the current thread.
///
/// Only one trace may be active per thread at a time.
pub struct MemTrace {
    id: u64,
}

impl MemTrace {
    pub fn start() -> MemTrace {
        ACTIVE.with(|a| {
            assert_eq!(a.get(), 0, "a MemTrace is already active on this thread");
            let id = NEXT_ID.fetch_add(1, Ordering::Relaxed);
            a.set(id);
            CURRENT.with(|c| c.set(0));
            PEAK.with(|p| p.set(0));
            MemTrace { id }
        })
    }

    /// Elements live right now.
    pub fn current(&self) -> u64 {
        CURRENT.with(|c| c.get())
    }

    /// Largest number of simultaneously live elements seen so far.
    pub fn peak(&self) -> u64 {
        PEAK.with(|p| p.get())
    }
}

impl Drop for MemTrace {
    fn drop(&mut self) {
        ACTIVE.with(|a| {
            if a.get() == self.id {
                a.set(0);
            }
        });
    }
}

/// Called by `Tensor` on allocation; returns the trace id (0 when inactive).
pub(crate) fn on_alloc(len: usize) -> u64 {
    ACTIVE.with(|a| {
        let id = a.get();
        if id != 0 {
            CURRENT.with(|c| {
                let now = c.get() + len as u64;
                c.set(now);
                PEAK.with(|p| {
                    if now > p.get() {
                        p.set(now);
                    }
                });
            });
        }
        id
    })
}

/// Called by `Tensor` on drop for tensors tagged with a trace id.
pub(crate) fn on_free(id: u64, len: usize) {
    ACTIVE.with(|a| {
        if a.get() == id {
            CURRENT.with(|c| c.set(c.get().saturating_sub(len as u64)));
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn counts_allocations_inside_trace_only() {
        let before = Tensor::zeros(vec![4, 4]).unwrap();
        let trace = MemTrace::start();
        assert_eq!(trace.current(), 0);
        let a = Tensor::zeros(vec![2, 3]).unwrap();
        assert_eq!(trace.current(), 6);
        assert_eq!(trace.peak(), 6);
        let b = Tensor::zeros(vec![5]).unwrap();
        assert_eq!(trace.peak(), 11);
        drop(a);
        assert_eq!(trace.current(), 5);
        let c = Tensor::zeros(vec![2]).unwrap();
        assert_eq!(trace.peak(), 11, "peak must not decrease");
        drop(b);
        drop(c);
        assert_eq!(trace.current(), 0);
        drop(before);
        assert_eq!(trace.current(), 0, "pre-trace tensors are not counted");
    }

    #[test]
    fn stale_tensors_do_not_affect_later_traces() {
        let t1 = MemTrace::start();
        let a = Tensor::zeros(vec![3]).unwrap();
        assert_eq!(t1.peak(), 3);
        drop(t1);
        let t2 = MemTrace::start();
        drop(a); // tagged with the finished trace: ignored
        assert_eq!(t2.current(), 0);
    }
}
