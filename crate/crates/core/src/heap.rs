//! Allocator tuning for the training loop.
//!
//! Every iteration allocates and frees the same set of multi-megabyte
//! activation buffers. glibc hands allocations above its mmap threshold
//! straight back to the kernel, so each iteration would page-fault the whole
//! working set in again.

use std::sync::Once;

static TUNE: Once = Once::new();

/// Keep large freed blocks on the heap for reuse. Idempotent; a no-op off
/// glibc.
pub fn retain_freed_memory() {
    TUNE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator thresholds.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, i32::MAX);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        }
    });
}
