//! On-disk model format.
//!
//! A checkpoint directory holds `model.toml` (format tag, [`ModelConfig`],
//! and the name and shape of every parameter) and `params.bin`:
//!
//! ```text
//! b"EBPARAMS"  u32 count
//! count x { u32 name_len, name (UTF-8), u32 ndim, ndim x u32 dim, numel x f32 }
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifierModel, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MODEL_MANIFEST: &str = "model.toml";
pub const MODEL_PARAMS: &str = "params.bin";
const MAGIC: &[u8; 8] = b"EBPARAMS";
const FORMAT: &str = "ensemble-bert-model";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    parameters: Vec<ParamEntry>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// Writes `model.toml` and `params.bin` into `dir`, creating it if needed.
/// Parameters are stored as `f32`.
pub fn save_checkpoint<T: Scalar>(model: &ClassifierModel<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let named = model.named_parameters();
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config().clone(),
        parameters: named
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| checkpoint_error(dir, format!("cannot serialize manifest: {e}")))?;
    let path = dir.join(MODEL_MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

    let mut buf = Vec::with_capacity(16 + 4 * model.parameter_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in &named {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let path = dir.join(MODEL_PARAMS);
    fs::write(&path, buf).map_err(|e| Error::io(&path, e))
}

/// Loads a checkpoint written by [`save_checkpoint`], rejecting any
/// disagreement between the manifest, the parameter file and the shapes the
/// config implies.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ClassifierModel<f32>> {
    let dir = dir.as_ref();
    let path = dir.join(MODEL_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| checkpoint_error(dir, format!("bad manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(checkpoint_error(
            dir,
            format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            ),
        ));
    }
    let mut model = ClassifierModel::<f32>::new(manifest.config.clone())
        .map_err(|e| checkpoint_error(dir, format!("invalid config: {e}")))?;
    let expected: Vec<ParamEntry> = model
        .named_parameters()
        .iter()
        .map(|(name, t)| ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    if manifest.parameters != expected {
        return Err(checkpoint_error(
            dir,
            "manifest parameter list does not match its config".into(),
        ));
    }

    let path = dir.join(MODEL_PARAMS);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut reader = Reader {
        bytes: &bytes,
        pos: 0,
        dir,
    };
    if reader.take(8)? != MAGIC {
        return Err(checkpoint_error(
            dir,
            "params.bin has a bad magic number".into(),
        ));
    }
    let count = reader.u32()? as usize;
    if count != expected.len() {
        return Err(checkpoint_error(
            dir,
            format!(
                "params.bin holds {count} tensors, config needs {}",
                expected.len()
            ),
        ));
    }
    for (entry, target) in expected.iter().zip(model.parameters_mut()) {
        let name_len = reader.u32()? as usize;
        let name = std::str::from_utf8(reader.take(name_len)?)
            .map_err(|_| checkpoint_error(dir, "parameter name is not UTF-8".into()))?
            .to_owned();
        let ndim = reader.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| reader.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if name != entry.name || shape != entry.shape {
            return Err(checkpoint_error(
                dir,
                format!(
                    "expected {} {:?}, found {name} {shape:?}",
                    entry.name, entry.shape
                ),
            ));
        }
        let numel: usize = shape.iter().product();
        let data = reader
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *target = Tensor::new(shape, data)?;
    }
    if reader.pos != bytes.len() {
        return Err(checkpoint_error(dir, "trailing bytes in params.bin".into()));
    }
    Ok(model)
}

fn checkpoint_error(dir: &Path, message: String) -> Error {
    Error::Checkpoint {
        path: dir.to_path_buf(),
        message,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    dir: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(checkpoint_error(self.dir, "params.bin is truncated".into()));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
