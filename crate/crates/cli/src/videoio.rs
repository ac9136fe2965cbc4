//! Video files on disk.
//!
//! Two formats are supported:
//! - a frame directory: `frame_00000.png`, ... (8-bit gray or RGB) plus an optional
//!   `metadata.json` with fps, frame count and channel count;
//! - a raw float container: magic, `[T, H, W, C]` as little-endian `u64`, fps and
//!   a dtype tag, then every value as a little-endian `f64` in `[T, H, W, C]` order.
//!
//! A single PNG file reads as a one-frame video. Pixel values map `[0, 255]` onto `[-1, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use patchvid_core::error::{Error, Result};
use patchvid_core::video::{VideoTensor, DEFAULT_FPS};
use serde::{Deserialize, Serialize};

pub const RAW_MAGIC: &[u8; 8] = b"PVIDRAW1";
pub const RAW_EXTENSION: &str = "pvraw";
const DTYPE_F64: u64 = 0x6634_3600; // "f64\0"
const METADATA: &str = "metadata.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub fps: f64,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

fn data_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {msg}", path.display()))
}

fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Reads a frame directory, a raw container or a single PNG.
pub fn read_video(path: &Path) -> Result<VideoTensor> {
    if path.is_dir() {
        read_frame_dir(path)
    } else if path.extension().is_some_and(|e| e == RAW_EXTENSION) {
        read_raw(path)
    } else if path.is_file() {
        let (dims, data) = read_png(path, None)?;
        VideoTensor::new([1, dims[0], dims[1], dims[2]], data, DEFAULT_FPS).map_err(|e| data_err(path, e))
    } else {
        Err(data_err(path, "no such file or directory"))
    }
}

/// `([H, W, C], values)` of one PNG; `channels` forces gray (1) or RGB (3).
fn read_png(path: &Path, channels: Option<usize>) -> Result<([usize; 3], Vec<f64>)> {
    let img = image::open(path).map_err(|e| data_err(path, format!("cannot decode image: {e}")))?;
    let channels = channels.unwrap_or(if img.color().has_color() { 3 } else { 1 });
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bytes = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => return Err(data_err(path, format!("unsupported channel count {c}"))),
    };
    Ok(([h, w, channels], bytes.into_iter().map(from_byte).collect()))
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn read_frame_dir(dir: &Path) -> Result<VideoTensor> {
    let meta_path = dir.join(METADATA);
    let meta: Option<Metadata> = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| data_err(&meta_path, e))?)
    } else {
        None
    };
    let files = frame_files(dir)?;
    if files.is_empty() {
        return Err(data_err(dir, "no PNG frames found"));
    }
    if let Some(m) = &meta {
        if m.frames != files.len() {
            return Err(data_err(dir, format!("metadata lists {} frames but {} PNG files exist", m.frames, files.len())));
        }
    }
    let mut channels = meta.as_ref().map(|m| m.channels);
    let mut dims = None;
    let mut data = Vec::new();
    for f in &files {
        let (d, values) = read_png(f, channels)?;
        if dims.is_some_and(|prev| prev != d) {
            return Err(data_err(f, format!("frame is {d:?}, earlier frames are {:?}", dims.unwrap())));
        }
        dims = Some(d);
        channels = Some(d[2]);
        data.extend(values);
    }
    let [h, w, c] = dims.expect("at least one frame");
    let fps = meta.map_or(DEFAULT_FPS, |m| m.fps);
    VideoTensor::new([files.len(), h, w, c], data, fps).map_err(|e| data_err(dir, e))
}

/// Writes `video` as PNG frames plus metadata into `dir`, replacing earlier frames.
pub fn write_frame_dir(video: &VideoTensor, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for old in frame_files(dir)? {
        fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
    }
    let [t, h, w, c] = video.dims();
    let frame_len = h * w * c;
    for (i, frame) in video.data().chunks_exact(frame_len).enumerate() {
        let bytes: Vec<u8> = frame.iter().copied().map(to_byte).collect();
        let path = dir.join(format!("frame_{i:05}.png"));
        let saved = match c {
            1 => GrayImage::from_raw(w as u32, h as u32, bytes).expect("frame size").save(&path),
            3 => RgbImage::from_raw(w as u32, h as u32, bytes).expect("frame size").save(&path),
            _ => return Err(Error::Data(format!("cannot write {c}-channel frames"))),
        };
        saved.map_err(|e| data_err(&path, e))?;
    }
    let meta = Metadata { fps: video.fps, frames: t, channels: c, height: h, width: w };
    let meta_path = dir.join(METADATA);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("metadata serializes")).map_err(|e| Error::io(&meta_path, e))
}

pub fn write_raw(video: &VideoTensor, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(56 + video.data().len() * 8);
    out.extend_from_slice(RAW_MAGIC);
    for d in video.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&video.fps.to_le_bytes());
    out.extend_from_slice(&DTYPE_F64.to_le_bytes());
    for v in video.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path) -> Result<VideoTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 56 || &bytes[..8] != RAW_MAGIC {
        return Err(data_err(path, "not a raw video container"));
    }
    let word = |i: usize| <[u8; 8]>::try_from(&bytes[8 + 8 * i..16 + 8 * i]).expect("8 bytes");
    let dims: [usize; 4] = std::array::from_fn(|i| u64::from_le_bytes(word(i)) as usize);
    let fps = f64::from_le_bytes(word(4));
    if u64::from_le_bytes(word(5)) != DTYPE_F64 {
        return Err(data_err(path, "unsupported dtype"));
    }
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    if count.and_then(|n| n.checked_mul(8)) != Some(bytes.len() - 56) {
        return Err(data_err(path, format!("payload does not match dims {dims:?}")));
    }
    let data = bytes[56..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    VideoTensor::new(dims, data, fps).map_err(|e| data_err(path, e))
}

/// Writes to a frame directory, or to a raw container when `path` ends in the raw extension.
pub fn write_video(video: &VideoTensor, path: &Path) -> Result<()> {
    if path.extension().is_some_and(|e| e == RAW_EXTENSION) {
        write_raw(video, path)
    } else {
        write_frame_dir(video, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn video(c: usize, seed: u32) -> VideoTensor {
        VideoTensor::from_fn([3, 5, 7, c], 12.0, |t, y, x, ch| ((((t * 31 + y * 7 + x * 3 + ch) as u32).wrapping_mul(2654435761) ^ seed) % 2001) as f64 / 1000.0 - 1.0).unwrap()
    }

    #[test]
    fn png_round_trip_within_quantization() {
        for c in [1, 3] {
            let v = video(c, 5);
            let dir = tempfile::tempdir().unwrap();
            write_frame_dir(&v, dir.path()).unwrap();
            let back = read_video(dir.path()).unwrap();
            assert_eq!(back.dims(), v.dims());
            assert_eq!(back.fps, 12.0);
            let worst = v.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            // one 8-bit step spans 2/255 of the [-1, 1] range; rounding moves at most half a step
            assert!(worst <= 1.0 / 255.0, "{worst}");
        }
    }

    #[test]
    fn raw_round_trip_is_exact() {
        let v = video(3, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.pvraw");
        write_video(&v, &path).unwrap();
        assert_eq!(read_video(&path).unwrap(), v);
    }

    #[test]
    fn corrupt_inputs_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("bad.pvraw");
        fs::write(&raw, b"PVIDRAW1short").unwrap();
        assert!(matches!(read_video(&raw), Err(Error::Data(_))));
        let png = dir.path().join("bad.png");
        fs::write(&png, b"not a png").unwrap();
        assert!(matches!(read_video(&png), Err(Error::Data(_))));
        let empty = dir.path().join("empty");
        fs::create_dir(&empty).unwrap();
        assert!(matches!(read_video(&empty), Err(Error::Data(_))));
    }

    #[test]
    fn single_png_is_one_frame() {
        let v = VideoTensor::from_fn([1, 4, 6, 3], DEFAULT_FPS, |_, y, x, c| (y + x + c) as f64 / 12.0 - 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_frame_dir(&v, dir.path()).unwrap();
        let back = read_video(&dir.path().join("frame_00000.png")).unwrap();
        assert_eq!(back.dims(), [1, 4, 6, 3]);
    }

    proptest! {
        #[test]
        fn byte_mapping_round_trips(b in any::<u8>()) {
            prop_assert_eq!(to_byte(from_byte(b)), b);
        }
    }
}
