//! Checkpoint container.
//!
//! Layout: the 8-byte magic `XFUSECK1`, a little-endian `u64` header length,
//! a JSON header, then every parameter's values as little-endian floats in
//! header order. The header records the format version, the precision, the
//! parameter names with shapes, an optional RNG state, and free-form
//! metadata (the run configuration).

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ParamStore, Precision, Real, Tensor, TensorError};

pub const MAGIC: &[u8; 8] = b"XFUSECK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte seed.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, TensorError> {
        use rand::SeedableRng;
        let bad = |m: &str| TensorError::Checkpoint(format!("rng state: {m}"));
        if self.seed.len() != 64 {
            return Err(bad("seed must be 64 hex digits"));
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed is not hex"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub precision: Precision,
    pub params: Vec<ParamEntry>,
    pub rng: Option<RngState>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode<T: Real>(
    store: &ParamStore<T>,
    rng: Option<RngState>,
    meta: serde_json::Value,
) -> Result<Vec<u8>, TensorError> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        precision: T::PRECISION,
        params: store
            .iter()
            .map(|(_, name, v)| ParamEntry {
                name: name.to_string(),
                shape: v.shape().to_vec(),
            })
            .collect(),
        rng,
        meta,
    };
    let json = serde_json::to_vec(&header).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + store.numel() * T::PRECISION.byte_width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, v) in store.iter() {
        for &x in v.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

/// Parses only the header, e.g. to choose the precision to load with.
pub fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize), TensorError> {
    let bad = |m: String| TensorError::Checkpoint(m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..end]).map_err(|e| bad(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", header.format_version)));
    }
    Ok((header, end))
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<(CheckpointHeader, ParamStore<T>), TensorError> {
    let (header, mut pos) = decode_header(bytes)?;
    if header.precision != T::PRECISION {
        return Err(TensorError::Checkpoint(format!(
            "checkpoint precision {:?} does not match requested {:?}",
            header.precision,
            T::PRECISION
        )));
    }
    let width = T::PRECISION.byte_width();
    let mut store = ParamStore::new();
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let end = pos + n * width;
        if end > bytes.len() {
            return Err(TensorError::Checkpoint(format!("truncated values for {}", entry.name)));
        }
        let data: Vec<T> = bytes[pos..end].chunks_exact(width).map(T::read_le).collect();
        pos = end;
        store.add(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    if pos != bytes.len() {
        return Err(TensorError::Checkpoint(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok((header, store))
}

pub fn save<T: Real>(
    path: &Path,
    store: &ParamStore<T>,
    rng: Option<RngState>,
    meta: serde_json::Value,
) -> Result<(), TensorError> {
    let bytes = encode(store, rng, meta)?;
    let mut f = fs::File::create(path).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    f.write_all(&bytes).map_err(|e| TensorError::Checkpoint(e.to_string()))
}

pub fn load<T: Real>(path: &Path) -> Result<(CheckpointHeader, ParamStore<T>), TensorError> {
    let bytes = fs::read(path).map_err(|e| TensorError::Checkpoint(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

/// Copies values from a loaded store into a freshly built one, matching by name.
pub fn restore_into<T: Real>(target: &mut ParamStore<T>, loaded: &ParamStore<T>) -> Result<(), TensorError> {
    if target.len() != loaded.len() {
        return Err(TensorError::Checkpoint(format!(
            "model has {} parameters, checkpoint has {}",
            target.len(),
            loaded.len()
        )));
    }
    let ids: Vec<_> = target.ids().collect();
    for id in ids {
        let name = target.name(id).to_string();
        let src = loaded
            .id_of(&name)
            .ok_or_else(|| TensorError::Checkpoint(format!("checkpoint lacks {name}")))?;
        target.set(id, loaded.get(src).clone())?;
    }
    Ok(())
}
