//! Checkpoint file format (little-endian):
//!
//! ```text
//!   magic   "SMFC" (4 bytes)
//!   version u32
//!   meta    u32 length + UTF-8 JSON (model config + step counter)
//!   params  repeated, in declaration order:
//!             name  u32 length + UTF-8
//!             shape u32 ndim + u32 extents
//!             data  f32 values, row-major
//! ```
//!
//! Values are stored as f32 regardless of the in-memory scalar type, so a
//! round trip is exact for the f32 training pipeline.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ModelConfig, Network};
use crate::nn::ParamVisit;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SMFC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Optimizer step counter at save time; lets resumed runs continue
    /// monotonically.
    pub step: u64,
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn save_checkpoint<T: Scalar>(
    net: &mut Network<T>,
    step: u64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let io_err = |e| Error::io(path, e);
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let meta = CheckpointMeta {
        model: net.config.clone(),
        step,
    };
    let meta_json = serde_json::to_vec(&meta)
        .map_err(|e| Error::Checkpoint(format!("meta serialization: {e}")))?;
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        write_u32(&mut w, FORMAT_VERSION)?;
        write_u32(&mut w, meta_json.len() as u32)?;
        w.write_all(&meta_json)?;
        Ok(())
    })()
    .map_err(io_err)?;
    for (name, tensor) in net.named_params() {
        (|| -> std::io::Result<()> {
            write_u32(&mut w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            write_u32(&mut w, tensor.ndim() as u32)?;
            for &e in tensor.shape() {
                write_u32(&mut w, e as u32)?;
            }
            for &v in tensor.data() {
                w.write_all(&(v.to_f64_c() as f32).to_le_bytes())?;
            }
            Ok(())
        })()
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let path = path.as_ref();
    let io_err = |e| Error::io(path, e);
    let file = File::open(path).map_err(io_err)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let version = read_u32(&mut r).map_err(io_err)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let meta_len = read_u32(&mut r).map_err(io_err)? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf).map_err(io_err)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)
        .map_err(|e| Error::Checkpoint(format!("meta parse: {e}")))?;

    let mut params = Vec::new();
    loop {
        let name_len = match read_u32(&mut r) {
            Ok(v) => v as usize,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(io_err(e)),
        };
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(io_err)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| Error::Checkpoint(format!("param name: {e}")))?;
        let ndim = read_u32(&mut r).map_err(io_err)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r).map_err(io_err)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf).map_err(io_err)?;
            data.push(f32::from_le_bytes(buf));
        }
        params.push((name, shape, data));
    }
    Ok(LoadedCheckpoint { meta, params })
}

/// Rebuild a network from a checkpoint. Every parameter must match the
/// config-derived model by name and shape, in order; the first mismatch is
/// reported by name.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(Network<T>, u64)> {
    let loaded = read_checkpoint(path)?;
    let mut net = Network::<T>::new(loaded.meta.model.clone(), 0)?;
    restore_params(&mut net, &loaded.params)?;
    Ok((net, loaded.meta.step))
}

pub fn restore_params<T: Scalar>(
    net: &mut Network<T>,
    params: &[(String, Vec<usize>, Vec<f32>)],
) -> Result<()> {
    let mut idx = 0usize;
    let mut mismatch: Option<String> = None;
    net.visit_params("", &mut |name, t| {
        if mismatch.is_some() {
            return;
        }
        let Some((fname, fshape, fdata)) = params.get(idx) else {
            mismatch = Some(format!("missing parameter '{name}' in checkpoint"));
            return;
        };
        if fname != &name {
            mismatch = Some(format!(
                "parameter order mismatch: expected '{name}', found '{fname}'"
            ));
            return;
        }
        if fshape != t.shape() {
            mismatch = Some(format!(
                "parameter '{name}' shape mismatch: model {:?}, checkpoint {:?}",
                t.shape(),
                fshape
            ));
            return;
        }
        let data: Vec<T> = fdata.iter().map(|&v| T::from_f64_c(v as f64)).collect();
        *t = Tensor::from_vec(data, t.shape()).unwrap().requires_grad(true);
        idx += 1;
    });
    if let Some(m) = mismatch {
        return Err(Error::Checkpoint(m));
    }
    if idx != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} extra parameter(s), first is '{}'",
            params.len() - idx,
            params[idx].0
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;
    use rand::SeedableRng;

    #[test]
    fn roundtrip_preserves_forward_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.smfc");
        let mut net = Network::<f32>::new(ModelConfig::tiny(), 21).unwrap();
        save_checkpoint(&mut net, 17, &path).unwrap();
        let (net2, step) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(step, 17);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn(&[1, 1, 16, 16, 16], &mut rng);
        let a = net.forward(&x).unwrap();
        let b = net2.forward(&x).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn mismatched_config_names_first_bad_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.smfc");
        let mut net = Network::<f32>::new(ModelConfig::tiny(), 21).unwrap();
        save_checkpoint(&mut net, 0, &path).unwrap();
        let mut loaded = read_checkpoint(&path).unwrap();
        // grow one tensor's shape so restore must reject it by name
        loaded.params[3].1[0] += 1;
        let want: usize = loaded.params[3].1.iter().product();
        let have = loaded.params[3].2.len();
        loaded.params[3].2.extend(std::iter::repeat(0.0).take(want - have));
        let mut net2 = Network::<f32>::new(loaded.meta.model.clone(), 0).unwrap();
        let err = restore_params(&mut net2, &loaded.params).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains(&loaded.params[3].0), "{msg}");
    }

    #[test]
    fn file_size_is_params_times_four_plus_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.smfc");
        let mut net = Network::<f32>::new(ModelConfig::tiny(), 2).unwrap();
        save_checkpoint(&mut net, 0, &path).unwrap();
        let size = std::fs::metadata(&path).unwrap().len();
        let payload = 4 * net.param_count();
        // header + per-param (name, ndim, extents) bookkeeping
        let names: u64 = net
            .named_params()
            .iter()
            .map(|(n, t)| 4 + n.len() as u64 + 4 + 4 * t.ndim() as u64)
            .sum();
        let meta = serde_json::to_vec(&CheckpointMeta {
            model: net.config.clone(),
            step: 0,
        })
        .unwrap()
        .len() as u64;
        assert_eq!(size, 4 + 4 + 4 + meta + names + payload);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.smfc");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}
