//! Heap high-water mark via a counting global allocator.
//!
//! Binaries opt in with
//! `#[global_allocator] static A: hyperspace::memprobe::CountingAlloc = hyperspace::memprobe::CountingAlloc;`.
//! Without it, [`measure`] falls back to the process resident-set peak.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

pub struct CountingAlloc;

#[inline]
fn grow(n: usize) {
    let now = CURRENT.fetch_add(n, Ordering::Relaxed) + n;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            grow(layout.size());
            if !ACTIVE.load(Ordering::Relaxed) {
                ACTIVE.store(true, Ordering::Relaxed);
            }
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            grow(layout.size());
            ACTIVE.store(true, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            if new_size >= layout.size() {
                grow(new_size - layout.size());
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

/// True once the counting allocator has served an allocation.
pub fn counting_active() -> bool {
    ACTIVE.load(Ordering::Relaxed)
}

pub fn current_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

/// Restarts the high-water mark at the current live size.
pub fn reset_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
}

pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

/// Where a memory figure came from.
pub const SOURCE_HEAP: &str = "host-heap";
pub const SOURCE_RSS: &str = "host-rss";

fn rss_hwm_bytes() -> Option<usize> {
    let s = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = s.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: usize = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

fn reset_rss_hwm() {
    // Writing 5 to clear_refs resets VmHWM on Linux; harmless elsewhere.
    let _ = std::fs::write("/proc/self/clear_refs", "5");
}

/// Runs `f` and reports the extra peak memory it needed, in bytes, above
/// what was live when it started, plus the source tag.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, usize, &'static str) {
    if counting_active() {
        let base = current_bytes();
        reset_peak();
        let r = f();
        (r, peak_bytes().saturating_sub(base), SOURCE_HEAP)
    } else {
        reset_rss_hwm();
        let base = rss_hwm_bytes().unwrap_or(0);
        let r = f();
        let peak = rss_hwm_bytes().unwrap_or(0);
        (r, peak.saturating_sub(base), SOURCE_RSS)
    }
}
