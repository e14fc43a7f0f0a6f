//! Binary parameter container with a JSON sidecar.
//!
//! Layout: magic `SHLBCKPT`, `u32` format version, `u32` tensor count, then
//! per tensor a `u32`-prefixed UTF-8 name, a dtype tag byte, a `u32` rank,
//! `u64` dims and little-endian values. All integers are little-endian. The
//! sidecar `<file>.json` records the configs and the SHA-256 of the binary.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use shotlab_tensor::{DType, ParamStore, Scalar, Tensor};

use crate::encoders::{build_encoder, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::icl::{IclModel, IclModelConfig};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SHLBCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// `"encoder"` or `"icl"`.
    pub kind: String,
    pub encoder_config: EncoderConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub icl_config: Option<IclModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain_objective: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config_hash: Option<String>,
    #[serde(default)]
    pub epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
    #[serde(default)]
    pub content_sha256: String,
}

impl CheckpointMeta {
    pub fn encoder(config: &EncoderConfig) -> Self {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            kind: "encoder".into(),
            encoder_config: config.clone(),
            icl_config: None,
            init_seed: None,
            pretrain_objective: None,
            regime: None,
            train_config_hash: None,
            epoch: 0,
            val_acc: None,
            content_sha256: String::new(),
        }
    }

    pub fn icl(icl: &IclModelConfig, encoder: &EncoderConfig) -> Self {
        CheckpointMeta {
            kind: "icl".into(),
            icl_config: Some(icl.clone()),
            ..Self::encoder(encoder)
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

fn encode_tensors<T: Scalar>(stores: &[(&str, &ParamStore<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count: usize = stores.iter().map(|(_, s)| s.len()).sum();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (prefix, store) in stores {
        for (name, t) in store.iter() {
            let full = format!("{prefix}/{name}");
            out.extend_from_slice(&(full.len() as u32).to_le_bytes());
            out.extend_from_slice(full.as_bytes());
            out.push(T::DTYPE.tag());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

fn decode_tensors<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { bytes, pos: 0 };
    let truncated = || ckpt_err(path, "file is truncated or malformed");
    if r.take(8).ok_or_else(truncated)? != MAGIC {
        return Err(ckpt_err(path, "not a checkpoint file"));
    }
    let version = r.u32().ok_or_else(truncated)?;
    if version != FORMAT_VERSION {
        return Err(ckpt_err(path, format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let count = r.u32().ok_or_else(truncated)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or_else(truncated)?)
            .map_err(|_| ckpt_err(path, "tensor name is not UTF-8"))?
            .to_string();
        let dtype = DType::from_tag(r.take(1).ok_or_else(truncated)?[0])
            .ok_or_else(|| ckpt_err(path, "unknown dtype tag"))?;
        let rank = r.u32().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64().ok_or_else(truncated)? as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<T> = match dtype {
            DType::F32 => r
                .take(n.checked_mul(4).ok_or_else(truncated)?)
                .ok_or_else(truncated)?
                .chunks_exact(4)
                .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            DType::F64 => r
                .take(n.checked_mul(8).ok_or_else(truncated)?)
                .ok_or_else(truncated)?
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        out.push((name, Tensor::new(shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(ckpt_err(path, "trailing bytes after the last tensor"));
    }
    Ok(out)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_with_sidecar(path: &Path, bytes: &[u8], mut meta: CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    meta.format_version = FORMAT_VERSION;
    meta.content_sha256 = sha256_hex(bytes);
    fs::write(path, bytes)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

fn read_with_sidecar<T: Scalar>(path: &Path) -> Result<(Vec<(String, Tensor<T>)>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| ckpt_err(path, e))?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| ckpt_err(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| ckpt_err(&side, e))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(ckpt_err(&side, format!("format version {}, expected {FORMAT_VERSION}", meta.format_version)));
    }
    if meta.content_sha256 != sha256_hex(&bytes) {
        return Err(ckpt_err(path, "content hash does not match the sidecar"));
    }
    Ok((decode_tensors(&bytes, path)?, meta))
}

fn fill_store<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    tensors: &mut Vec<(String, Tensor<T>)>,
    path: &Path,
) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let full = format!("{prefix}/{}", store.name(id));
        let pos = tensors
            .iter()
            .position(|(n, _)| *n == full)
            .ok_or_else(|| ckpt_err(path, format!("missing tensor {full}")))?;
        let (_, t) = tensors.swap_remove(pos);
        if t.shape() != store.get(id).shape() {
            return Err(ckpt_err(path, format!("tensor {full} has shape {:?}, expected {:?}", t.shape(), store.get(id).shape())));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}

pub fn save_encoder<T: Scalar>(path: &Path, encoder: &Encoder<T>, meta: CheckpointMeta) -> Result<()> {
    let bytes = encode_tensors(&[("encoder", &encoder.params)]);
    write_with_sidecar(path, &bytes, CheckpointMeta { kind: "encoder".into(), encoder_config: encoder.config.clone(), ..meta })
}

pub fn load_encoder<T: Scalar>(path: &Path) -> Result<(Encoder<T>, CheckpointMeta)> {
    let (mut tensors, meta) = read_with_sidecar::<T>(path)?;
    let mut encoder = build_encoder::<T>(&meta.encoder_config, 0)?;
    fill_store(&mut encoder.params, "encoder", &mut tensors, path)?;
    Ok((encoder, meta))
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &IclModel<T>,
    encoder: &Encoder<T>,
    meta: CheckpointMeta,
) -> Result<()> {
    let bytes = encode_tensors(&[("encoder", &encoder.params), ("model", &model.params)]);
    let meta = CheckpointMeta {
        kind: "icl".into(),
        encoder_config: encoder.config.clone(),
        icl_config: Some(model.config.clone()),
        ..meta
    };
    write_with_sidecar(path, &bytes, meta)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(IclModel<T>, Encoder<T>, CheckpointMeta)> {
    let (mut tensors, meta) = read_with_sidecar::<T>(path)?;
    let icl_config = meta
        .icl_config
        .clone()
        .ok_or_else(|| ckpt_err(path, "sidecar has no icl_config; is this an encoder checkpoint?"))?;
    let mut encoder = build_encoder::<T>(&meta.encoder_config, 0)?;
    fill_store(&mut encoder.params, "encoder", &mut tensors, path)?;
    let mut model = IclModel::<T>::new(&icl_config, 0)?;
    fill_store(&mut model.params, "model", &mut tensors, path)?;
    Ok((model, encoder, meta))
}
