//! Command implementations and video file I/O behind the `patchvid` binary.

pub mod commands;
pub mod videoio;
