//! On-disk model state: a JSON manifest plus one binary archive per network.
//!
//! Archives hold named little-endian `f64` tensors, including buffers (batch-norm
//! running statistics, spectral-norm vectors), so a reloaded model continues
//! training exactly where it stopped. A lock file marks a checkpoint that is
//! being written; the manifest is renamed into place last.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::hierarchy::{ModelState, ScaleLog, INIT_STREAM};
use crate::schedule::PyramidSchedule;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".lock";
const MAGIC: &[u8; 4] = b"PVNA";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkEntry {
    pub name: String,
    /// `encoder`, `generator` or `critic`.
    pub role: String,
    pub scale: Option<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngInfo {
    pub algorithm: String,
    pub seed: u64,
    /// Scale `n` draws from stream `n`; initialization of the encoder from this one.
    pub init_stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub schedule: PyramidSchedule,
    pub image_channels: usize,
    /// Number of fully trained scales.
    pub trained_scales: usize,
    pub noise_amp: Vec<f64>,
    pub rng: RngInfo,
    pub networks: Vec<NetworkEntry>,
    pub logs: Vec<ScaleLog>,
}

/// Serializes named tensors into the archive format.
pub fn archive_bytes(tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::State("truncated network archive".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses an archive back into named tensors.
pub fn parse_archive(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::State("not a network archive".into()));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::State("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::State("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::State("trailing bytes after network archive".into()));
    }
    Ok(out)
}

fn load_into(targets: Vec<(String, &mut Tensor)>, bytes: &[u8], file: &str) -> Result<()> {
    let stored = parse_archive(bytes)?;
    if stored.len() != targets.len() {
        return Err(Error::State(format!("{file}: {} tensors stored, {} expected", stored.len(), targets.len())));
    }
    for ((name, slot), (stored_name, tensor)) in targets.into_iter().zip(stored) {
        if name != stored_name || slot.shape() != tensor.shape() {
            return Err(Error::State(format!("{file}: found {stored_name} {:?}, expected {name} {:?}", tensor.shape(), slot.shape())));
        }
        *slot = tensor;
    }
    Ok(())
}

/// Serialized bytes of every network, keyed by archive file name.
pub fn network_archives(state: &ModelState) -> Vec<(NetworkEntry, Vec<u8>)> {
    let mut out = vec![(
        NetworkEntry { name: "E".into(), role: "encoder".into(), scale: None, file: "encoder.bin".into() },
        archive_bytes(&state.encoder.named_tensors()),
    )];
    for (n, g) in state.generators.iter().enumerate() {
        out.push((
            NetworkEntry { name: format!("G{n}"), role: "generator".into(), scale: Some(n), file: format!("generator_{n}.bin") },
            archive_bytes(&g.named_tensors()),
        ));
    }
    for (n, d) in state.critics.iter().enumerate() {
        if let Some(d) = d {
            out.push((
                NetworkEntry { name: format!("D{n}"), role: "critic".into(), scale: Some(n), file: format!("critic_{n}.bin") },
                archive_bytes(&d.named_tensors()),
            ));
        }
    }
    out
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Writes the model to `dir`. Only fully trained scales are meaningful to resume
/// from; networks of a scale in progress are saved as they are.
pub fn save(state: &ModelState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let lock_path = dir.join(LOCK);
    let mut lock = fs::OpenOptions::new().write(true).create_new(true).open(&lock_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::AlreadyExists {
            Error::State(format!("checkpoint {} is locked by another writer", dir.display()))
        } else {
            Error::io(&lock_path, e)
        }
    })?;
    let _guard = LockGuard(lock_path.clone());
    writeln!(lock, "{}", std::process::id()).map_err(|e| Error::io(&lock_path, e))?;

    let mut networks = Vec::new();
    for (entry, bytes) in network_archives(state) {
        let path = dir.join(&entry.file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        networks.push(entry);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_hash: state.config.hash(),
        config: state.config.clone(),
        schedule: state.schedule.clone(),
        image_channels: state.image_channels,
        trained_scales: state.trained,
        noise_amp: state.noise_amp.clone(),
        rng: RngInfo { algorithm: "chacha8".into(), seed: state.config.seed, init_stream: INIT_STREAM },
        networks,
        logs: state.logs.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::State(e.to_string()))?;
    let tmp = dir.join("manifest.json.tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    let final_path = dir.join(MANIFEST);
    fs::rename(&tmp, &final_path).map_err(|e| Error::io(&final_path, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    if dir.join(LOCK).exists() {
        return Err(Error::State(format!("checkpoint {} is locked (being written or interrupted)", dir.display())));
    }
    let path = dir.join(MANIFEST);
    let mut text = String::new();
    fs::File::open(&path).and_then(|mut f| f.read_to_string(&mut text)).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::State(format!("no checkpoint manifest in {}", dir.display())),
        _ => Error::io(&path, e),
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::State(format!("{}: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::State(format!("unsupported checkpoint format {}", manifest.format_version)));
    }
    if manifest.config_hash != manifest.config.hash() {
        return Err(Error::State("manifest config does not match its hash".into()));
    }
    Ok(manifest)
}

/// Restores a model from `dir`.
pub fn load(dir: &Path) -> Result<ModelState> {
    let m = read_manifest(dir)?;
    let mut state = ModelState::new(m.config.clone(), m.schedule.clone(), m.image_channels)?;
    let initialized = m.networks.iter().filter(|e| e.role == "generator").count();
    if initialized < m.trained_scales || m.trained_scales > m.config.finest_scale + 1 {
        return Err(Error::State(format!("manifest lists {initialized} generators for {} trained scales", m.trained_scales)));
    }
    // rebuild the architecture of every scale, then overwrite all tensors
    for n in 0..initialized {
        state.trained = n;
        state.prepare_scale(n)?;
    }
    state.trained = m.trained_scales;
    let read = |file: &str| {
        let path = dir.join(file);
        fs::read(&path).map_err(|e| Error::io(&path, e))
    };
    for entry in &m.networks {
        let bytes = read(&entry.file)?;
        match (entry.role.as_str(), entry.scale) {
            ("encoder", _) => load_into(state.encoder.named_tensors_mut(), &bytes, &entry.file)?,
            ("generator", Some(n)) if n < initialized => load_into(state.generators[n].named_tensors_mut(), &bytes, &entry.file)?,
            ("critic", Some(n)) if n < initialized => {
                let critic = state.critics[n].as_mut().ok_or_else(|| Error::State(format!("scale {n} has no critic")))?;
                load_into(critic.named_tensors_mut(), &bytes, &entry.file)?
            }
            _ => return Err(Error::State(format!("unexpected network entry {entry:?}"))),
        }
    }
    if m.noise_amp.len() != initialized {
        return Err(Error::State("noise table does not match the generator count".into()));
    }
    state.noise_amp = m.noise_amp;
    state.logs = m.logs;
    Ok(state)
}
