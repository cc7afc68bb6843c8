//! Shared fixtures for the criterion benchmarks.

use xkv_core::{gen_frames, FrameTokens, StreamConfig};

/// Desk-scale stream: 69 tokens per frame, budget of a little over 7 frames.
pub fn desk_config(frames: usize) -> StreamConfig {
    StreamConfig {
        budget: 512,
        frames,
        ..Default::default()
    }
}

pub fn desk_frames(frames: usize) -> (StreamConfig, Vec<FrameTokens>) {
    let config = desk_config(frames);
    let stream = gen_frames(&config);
    (config, stream)
}
