use std::path::Path;

use crate::adapt::AdaptedModel;
use crate::model::{DualEncoder, Vocabulary};
use crate::tensor::{Dtype, Element, ParamSet, Tensor};

use super::config::ExperimentConfig;
use super::{file_err, IoError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VLMC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Raw checkpoint contents: canonical config text plus named tensors in
/// file order.
pub struct Checkpoint<E: Element> {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor<E>)>,
}

fn crc32(bytes: &[u8]) -> u32 {
    // CRC-32/ISO-HDLC (the zlib polynomial, reflected).
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, e) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *e = c;
        }
        t
    });
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

/// Serialize to the single-file format: magic, u16 version, length-prefixed
/// canonical config text, a self-describing tensor table, and a trailing
/// u32 CRC over all preceding bytes. All integers little-endian.
pub fn write_checkpoint<E: Element>(config_text: &str, params: &[&ParamSet<E>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    for set in params {
        for p in set.iter() {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(E::DTYPE.tag());
            out.push(p.tensor.shape().len() as u8);
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.tensor.data() {
                v.write_le(&mut out);
            }
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Parse and validate a checkpoint byte stream. Magic, version, and CRC
/// failures are distinct errors; nothing is returned on any failure.
pub fn read_checkpoint<E: Element>(bytes: &[u8]) -> Result<Checkpoint<E>> {
    if bytes.len() < 10 {
        return Err(IoError::Truncated("header"));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(IoError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32(&bytes[..body_end]);
    if stored != computed {
        return Err(IoError::CrcMismatch { stored, computed });
    }

    let mut pos = 6usize;
    let take = |pos: &mut usize, n: usize, what: &'static str| -> Result<&[u8]> {
        if *pos + n > body_end {
            return Err(IoError::Truncated(what));
        }
        let slice = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(slice)
    };

    let config_len = u32::from_le_bytes(take(&mut pos, 4, "config length")?.try_into().unwrap());
    let config_text = String::from_utf8_lossy(take(&mut pos, config_len as usize, "config text")?)
        .into_owned();

    let mut tensors = Vec::new();
    while pos < body_end {
        let name_len =
            u16::from_le_bytes(take(&mut pos, 2, "name length")?.try_into().unwrap()) as usize;
        let name = String::from_utf8_lossy(take(&mut pos, name_len, "name")?).into_owned();
        let dtype_tag = take(&mut pos, 1, "dtype")?[0];
        let dtype = Dtype::from_tag(dtype_tag).ok_or(IoError::UnknownDtype(dtype_tag))?;
        if dtype != E::DTYPE {
            return Err(IoError::DtypeMismatch);
        }
        let ndim = take(&mut pos, 1, "ndim")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(
                u32::from_le_bytes(take(&mut pos, 4, "dim")?.try_into().unwrap()) as usize,
            );
        }
        let count: usize = shape.iter().product();
        let raw = take(&mut pos, count * dtype.byte_width(), "tensor data")?;
        let data: Vec<E> = raw
            .chunks_exact(dtype.byte_width())
            .map(E::read_le)
            .collect();
        tensors.push((
            name,
            Tensor::new(shape, data).map_err(|e| IoError::ParamMismatch(e.to_string()))?,
        ));
    }
    Ok(Checkpoint {
        config_text,
        tensors,
    })
}

fn is_head_param(name: &str) -> bool {
    name.starts_with("probe.") || name.starts_with("prompt.") || name.starts_with("adapter.")
}

pub fn save_backbone<E: Element>(
    path: &Path,
    config: &ExperimentConfig,
    model: &DualEncoder<E>,
) -> Result<()> {
    let bytes = write_checkpoint(&config.to_canonical_text(), &[&model.params]);
    super::report::atomic_write(path, &bytes)
}

pub fn save_adapted<E: Element>(
    path: &Path,
    config: &ExperimentConfig,
    model: &AdaptedModel<E>,
) -> Result<()> {
    let bytes = write_checkpoint(
        &config.to_canonical_text(),
        &[&model.backbone.params, &model.head],
    );
    super::report::atomic_write(path, &bytes)
}

fn rebuild_backbone<E: Element>(
    config: &ExperimentConfig,
    tensors: &[(String, Tensor<E>)],
) -> Result<DualEncoder<E>> {
    let mut backbone = DualEncoder::init(config.encoder_config(), Vocabulary::standard(), config.seed)?;
    let mut seen = 0usize;
    for (name, tensor) in tensors {
        if is_head_param(name) {
            continue;
        }
        let Some(p) = backbone.params.get_mut(name) else {
            return Err(IoError::ParamMismatch(format!("unexpected parameter {name}")));
        };
        if p.tensor.shape() != tensor.shape() {
            return Err(IoError::ParamMismatch(format!(
                "shape of {name}: file {:?} vs model {:?}",
                tensor.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor = tensor.clone();
        seen += 1;
    }
    if seen != backbone.params.len() {
        return Err(IoError::ParamMismatch(format!(
            "file provides {seen} of {} backbone parameters",
            backbone.params.len()
        )));
    }
    Ok(backbone)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(file_err(path))
}

/// Load a pre-trained dual encoder (head parameters, if present, are ignored).
pub fn load_backbone<E: Element>(path: &Path) -> Result<(ExperimentConfig, DualEncoder<E>)> {
    let ckpt = read_checkpoint::<E>(&read_file(path)?)?;
    let config = ExperimentConfig::from_text(&ckpt.config_text)?;
    let backbone = rebuild_backbone(&config, &ckpt.tensors)?;
    Ok((config, backbone))
}

/// Load an adapted model: rebuilds the strategy from the config block,
/// restores head parameters, and recomputes the cached class embeddings.
pub fn load_adapted<E: Element>(path: &Path) -> Result<(ExperimentConfig, AdaptedModel<E>)> {
    let ckpt = read_checkpoint::<E>(&read_file(path)?)?;
    let config = ExperimentConfig::from_text(&ckpt.config_text)?;
    let Some(spec) = config.strategy_spec()? else {
        return Err(IoError::ParamMismatch(
            "checkpoint has no strategy (strategy.kind = none)".into(),
        ));
    };
    let backbone = rebuild_backbone(&config, &ckpt.tensors)?;
    let mut model = AdaptedModel::new(backbone, spec, config.seed)?;
    let mut seen = 0usize;
    for (name, tensor) in &ckpt.tensors {
        if !is_head_param(name) {
            continue;
        }
        let Some(p) = model.head.get_mut(name) else {
            return Err(IoError::ParamMismatch(format!("unexpected head parameter {name}")));
        };
        if p.tensor.shape() != tensor.shape() {
            return Err(IoError::ParamMismatch(format!("shape of {name}")));
        }
        p.tensor = tensor.clone();
        seen += 1;
    }
    if seen != model.head.len() {
        return Err(IoError::ParamMismatch(format!(
            "file provides {seen} of {} head parameters",
            model.head.len()
        )));
    }
    // digests and caches must reflect the loaded values
    let finetune = model.frozen_digest.is_none();
    if !finetune {
        model.frozen_digest = Some(crate::adapt::freeze_digest(&model.backbone.params));
    }
    model.rebuild_class_embeddings()?;
    Ok((config, model))
}
