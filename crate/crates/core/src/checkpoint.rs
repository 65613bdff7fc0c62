//! Checkpoints: a `key = value` manifest plus a flat little-endian f64 blob.
//!
//! Manifest lines starting with `tensor.` or `extra.` declare, in order, the
//! tensors stored in the blob. The blob lives next to the manifest with a
//! `.bin` suffix appended.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::tensor::Tensor;

const FORMAT: &str = "mpnet-lab-checkpoint-1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: {msg}")]
    Content { path: PathBuf, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub meta: BTreeMap<String, String>,
    /// Extra named tensors (optimizer moments, task heads).
    pub extra: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Checkpoint {
            params,
            meta: BTreeMap::new(),
            extra: Vec::new(),
        }
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    let mut s = manifest.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn shape_text(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Writes blob then manifest, each via a temporary file and rename.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut manifest = format!("format = {FORMAT}\n");
    for (k, v) in ckpt.params.config.entries() {
        manifest.push_str(&format!("config.{k} = {v}\n"));
    }
    for (k, v) in &ckpt.meta {
        manifest.push_str(&format!("meta.{k} = {v}\n"));
    }
    let mut blob = Vec::new();
    let named = ckpt.params.named();
    let tensors = named
        .iter()
        .map(|(n, t)| ("tensor", n.as_str(), *t))
        .chain(ckpt.extra.iter().map(|(n, t)| ("extra", n.as_str(), t)));
    for (kind, name, t) in tensors {
        manifest.push_str(&format!("{kind}.{name} = {}\n", shape_text(t.shape())));
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(&blob_path(path), &blob)?;
    write_atomic(path, manifest.as_bytes())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |line: usize, msg: String| CheckpointError::Manifest {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut config = ModelConfig::default();
    let mut meta = BTreeMap::new();
    let mut decls: Vec<(bool, String, Vec<usize>)> = Vec::new();
    let mut format_seen = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| bad(i + 1, format!("expected key = value, got {line:?}")))?;
        if k == "format" {
            if v != FORMAT {
                return Err(bad(i + 1, format!("unsupported format {v:?}")));
            }
            format_seen = true;
        } else if let Some(key) = k.strip_prefix("config.") {
            match config.set(key, v) {
                Ok(true) => {}
                Ok(false) => return Err(bad(i + 1, format!("unknown config key {key:?}"))),
                Err(e) => return Err(bad(i + 1, e)),
            }
        } else if let Some(key) = k.strip_prefix("meta.") {
            meta.insert(key.to_string(), v.to_string());
        } else if let Some((is_param, name)) = k
            .strip_prefix("tensor.")
            .map(|n| (true, n))
            .or_else(|| k.strip_prefix("extra.").map(|n| (false, n)))
        {
            let shape = v
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| bad(i + 1, format!("shape {v:?}: {e}")))?;
            decls.push((is_param, name.to_string(), shape));
        } else {
            return Err(bad(i + 1, format!("unknown key {k:?}")));
        }
    }
    if !format_seen {
        return Err(bad(1, "missing format line".into()));
    }

    let blob_file = blob_path(path);
    let blob = fs::read(&blob_file).map_err(io_err(&blob_file))?;
    let content = |msg: String| CheckpointError::Content {
        path: blob_file.clone(),
        msg,
    };
    let expected: usize = decls
        .iter()
        .map(|(_, _, s)| s.iter().product::<usize>() * 8)
        .sum();
    if blob.len() != expected {
        return Err(content(format!(
            "blob has {} bytes, manifest declares {expected}",
            blob.len()
        )));
    }

    let mut params = ModelParams::zeros(&config)?;
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    let mut slots = params.named_mut().into_iter();
    let mut extra = Vec::new();
    for (is_param, name, shape) in decls {
        let count: usize = shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(count).collect();
        if is_param {
            let (want, slot) = slots
                .next()
                .ok_or_else(|| content(format!("unexpected parameter {name}")))?;
            if want != name || slot.shape() != shape.as_slice() {
                return Err(content(format!(
                    "parameter {name} {shape:?} does not match expected {want} {:?}",
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(&data);
        } else {
            let t = Tensor::new(shape, data).map_err(ModelError::from)?;
            extra.push((name, t));
        }
    }
    if let Some((missing, _)) = slots.next() {
        return Err(content(format!("parameter {missing} missing")));
    }
    Ok(Checkpoint {
        params,
        meta,
        extra,
    })
}
