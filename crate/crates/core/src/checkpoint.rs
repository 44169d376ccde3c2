//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "SCOP"
//! version      u16
//! config_len   u32      followed by config_len bytes of UTF-8 "key = value" lines
//! repeat until EOF:
//!   name_len   u32      followed by name_len bytes of UTF-8
//!   rank       u8
//!   extents    rank × u64
//!   payload    product(extents) × f32
//! ```
//!
//! Parameters are written sorted by name, so identical parameter sets always
//! produce byte-identical files. Loading is strict: unknown names, missing
//! names, and shape changes are distinct errors naming the parameter.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SCOP";
pub const VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u16),
    #[error("checkpoint truncated while reading {context}")]
    Truncated { context: &'static str },
    #[error("parameter {name:?}: stored shape {stored:?} does not match expected {expected:?}")]
    ShapeMismatch { name: String, stored: Vec<usize>, expected: Vec<usize> },
    #[error("checkpoint contains unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("checkpoint is missing parameter {0:?}")]
    MissingParam(String),
    #[error("malformed text in checkpoint: {0}")]
    MalformedText(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A parsed checkpoint: config lines plus named f32 blobs.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Serialize config and parameters into checkpoint bytes.
pub fn to_bytes(config: &[(String, String)], params: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    let mut config_text = String::new();
    for (k, v) in config {
        config_text.push_str(k);
        config_text.push_str(" = ");
        config_text.push_str(v);
        config_text.push('\n');
    }
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());

    let mut sorted: Vec<&(String, Tensor)> = params.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    for (name, tensor) in sorted {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = tensor.shape();
        out.push(shape.len() as u8);
        for &ext in shape {
            out.extend_from_slice(&(ext as u64).to_le_bytes());
        }
        for v in tensor.values_f32() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Write a checkpoint atomically: the bytes land in a sibling temp file that
/// is renamed over the destination, so a crash never leaves a partial file.
pub fn save(
    path: &Path,
    config: &[(String, String)],
    params: &[(String, Tensor)],
) -> Result<(), CheckpointError> {
    let bytes = to_bytes(config, params);
    write_atomic(path, &bytes)?;
    Ok(())
}

/// Atomic file write used for every artifact the toolkit produces.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

fn read_exact_ctx(
    r: &mut impl Read,
    buf: &mut [u8],
    context: &'static str,
) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated { context }
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, context: &'static str) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact_ctx(r, &mut b, context)?;
    Ok(u32::from_le_bytes(b))
}

/// Parse checkpoint bytes from a reader, consuming it to EOF.
pub fn from_reader(mut r: impl Read) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 4];
    read_exact_ctx(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut ver = [0u8; 2];
    read_exact_ctx(&mut r, &mut ver, "version")?;
    let version = u16::from_le_bytes(ver);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }

    let config_len = read_u32(&mut r, "config length")? as usize;
    let mut config_bytes = vec![0u8; config_len];
    read_exact_ctx(&mut r, &mut config_bytes, "config block")?;
    let config_text = String::from_utf8(config_bytes)
        .map_err(|e| CheckpointError::MalformedText(e.to_string()))?;
    let mut config = Vec::new();
    for line in config_text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::MalformedText(format!("config line {line:?}")))?;
        config.push((k.trim().to_string(), v.trim().to_string()));
    }

    let mut params = Vec::new();
    loop {
        // A clean EOF before a name length means we are done.
        let mut len_buf = [0u8; 4];
        let mut filled = 0;
        while filled < 4 {
            match r.read(&mut len_buf[filled..]) {
                Ok(0) => {
                    if filled == 0 {
                        return Ok(Checkpoint { config, params });
                    }
                    return Err(CheckpointError::Truncated { context: "parameter name length" });
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(CheckpointError::Io(e)),
            }
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact_ctx(&mut r, &mut name_bytes, "parameter name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| CheckpointError::MalformedText(e.to_string()))?;

        let mut rank_b = [0u8; 1];
        read_exact_ctx(&mut r, &mut rank_b, "parameter rank")?;
        let rank = rank_b[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut ext = [0u8; 8];
            read_exact_ctx(&mut r, &mut ext, "parameter extent")?;
            shape.push(u64::from_le_bytes(ext) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        read_exact_ctx(&mut r, &mut payload, "parameter payload")?;
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push((name, shape, values));
    }
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    from_reader(std::fs::File::open(path)?)
}

/// Copy a checkpoint's values into live parameter tensors. Every stored name
/// must exist with the stored shape, and every live parameter must be
/// covered.
pub fn load_into(
    checkpoint: &Checkpoint,
    params: &[(String, Tensor)],
) -> Result<(), CheckpointError> {
    let live: HashMap<&str, &Tensor> =
        params.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut seen = std::collections::HashSet::new();
    for (name, shape, values) in &checkpoint.params {
        let tensor = live
            .get(name.as_str())
            .ok_or_else(|| CheckpointError::UnknownParam(name.clone()))?;
        if tensor.shape() != shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                stored: shape.clone(),
                expected: tensor.shape().to_vec(),
            });
        }
        let f64s: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        tensor.set_values(&f64s);
        seen.insert(name.clone());
    }
    for (name, _) in params {
        if !seen.contains(name) {
            return Err(CheckpointError::MissingParam(name.clone()));
        }
    }
    Ok(())
}
