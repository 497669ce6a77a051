pub mod augment;
pub mod checkpoint;
pub mod cli;
mod color;
pub mod envsim;
pub mod evalharness;
pub mod losses;
pub mod models;
pub mod numcore;
pub mod seed;
pub mod trainer;
pub mod verify;

/// Raises glibc's mmap and trim thresholds so large activation buffers are
/// recycled from the heap instead of being mapped and faulted in on every
/// training step. No-op on other allocators.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}
