//! Shared fixtures for the benchmarks.

use prefilter::image::Image;
use prefilter::synth;

/// A deterministic natural-looking test image.
pub fn fixture(size: usize, seed: u64) -> Image {
    synth::corpus(1, size, size, seed).remove(0)
}
