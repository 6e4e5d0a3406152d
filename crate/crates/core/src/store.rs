//! Binary container for base checkpoints (`RSBM`) and adapter bundles
//! (`RSAD`).
//!
//! ```text
//! magic[4] | version u32 LE | header_len u64 LE | header JSON | payload
//! ```
//!
//! The header is canonical JSON (sorted keys, no whitespace) holding a
//! `config` object and a name-sorted `tensors` list of
//! `{name, shape, offset, nbytes}`; offsets are relative to the payload,
//! which stores every tensor as little-endian `f32`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{LoRAPair, NormDelta, ResAdapterBundle, DELTA_BETA, DELTA_GAMMA, LORA_A, LORA_B};
use crate::error::{Error, FormatError, Result};
use crate::numerics::Tensor;
use crate::unet::{SiteSelector, UNetConfig, UNetModel};

pub const MODEL_MAGIC: [u8; 4] = *b"RSBM";
pub const ADAPTER_MAGIC: [u8; 4] = *b"RSAD";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header<C> {
    config: C,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMeta {
    pub rank: usize,
    pub alpha_r: f64,
    /// 16 hex digits.
    pub base_fingerprint: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileKind {
    Model,
    Adapter,
}

impl FileKind {
    fn magic(self) -> [u8; 4] {
        match self {
            FileKind::Model => MODEL_MAGIC,
            FileKind::Adapter => ADAPTER_MAGIC,
        }
    }
}

fn header_err(e: impl fmt::Display) -> Error {
    FormatError::Header(e.to_string()).into()
}

/// Serializes `config` and the tensors (iterated in name order).
fn encode<C: Serialize>(kind: FileKind, config: &C, tensors: &BTreeMap<String, &Tensor>) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            nbytes: payload.len() as u64 - offset,
        });
    }
    let header = Header {
        config,
        tensors: entries,
    };
    // `Value` objects keep keys sorted, which makes the text canonical
    let value = serde_json::to_value(&header).map_err(header_err)?;
    let json = serde_json::to_string(&value).map_err(header_err)?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
    out.extend_from_slice(&kind.magic());
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// A parsed container whose extents have been checked.
struct Decoded<C> {
    config: C,
    tensors: BTreeMap<String, Tensor>,
    entries: Vec<TensorEntry>,
}

fn read_kind(bytes: &[u8]) -> Result<(FileKind, u32)> {
    if bytes.len() < 4 {
        return Err(FormatError::TruncatedHeader.into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    let kind = match magic {
        MODEL_MAGIC => FileKind::Model,
        ADAPTER_MAGIC => FileKind::Adapter,
        other => return Err(FormatError::BadMagic(other).into()),
    };
    if bytes.len() < PREAMBLE {
        return Err(FormatError::TruncatedHeader.into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    Ok((kind, version))
}

fn decode<C: for<'de> Deserialize<'de>>(bytes: &[u8], expect: FileKind) -> Result<Decoded<C>> {
    let (kind, _) = read_kind(bytes)?;
    if kind != expect {
        return Err(FormatError::BadMagic(bytes[..4].try_into().expect("4 bytes")).into());
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = (PREAMBLE as u64)
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or(FormatError::TruncatedHeader)? as usize;
    let text = std::str::from_utf8(&bytes[PREAMBLE..header_end]).map_err(header_err)?;
    let header: Header<C> = serde_json::from_str(text).map_err(header_err)?;
    let payload = &bytes[header_end..];
    check_extents(&header.tensors, payload.len() as u64)?;

    let mut tensors = BTreeMap::new();
    for e in &header.tensors {
        let blob = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
        let data = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| FormatError::Inconsistent {
            name: e.name.clone(),
            detail: err.to_string(),
        })?;
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(FormatError::Header(format!("duplicate tensor {}", e.name)).into());
        }
    }
    Ok(Decoded {
        config: header.config,
        tensors,
        entries: header.tensors,
    })
}

fn check_extents(entries: &[TensorEntry], payload_len: u64) -> Result<()> {
    if entries.windows(2).any(|w| w[0].name >= w[1].name) {
        return Err(FormatError::Header("tensor entries are not sorted by name".into()).into());
    }
    let mut total: u64 = 0;
    for e in entries {
        let numel: usize = e.shape.iter().product();
        if e.nbytes != 4 * numel as u64 {
            return Err(FormatError::Inconsistent {
                name: e.name.clone(),
                detail: format!("shape {:?} needs {} bytes, header says {}", e.shape, 4 * numel, e.nbytes),
            }
            .into());
        }
        total = total.saturating_add(e.nbytes);
    }
    let mut by_offset: Vec<&TensorEntry> = entries.iter().collect();
    by_offset.sort_by_key(|e| (e.offset, e.nbytes));
    for w in by_offset.windows(2) {
        if w[0].offset.saturating_add(w[0].nbytes) > w[1].offset {
            return Err(FormatError::OverlappingExtents(w[1].name.clone()).into());
        }
    }
    let end = by_offset.last().map_or(0, |e| e.offset.saturating_add(e.nbytes));
    let expected = total.max(end);
    if payload_len < expected {
        return Err(FormatError::TruncatedPayload {
            expected,
            found: payload_len,
        }
        .into());
    }
    if payload_len > expected {
        return Err(FormatError::TrailingBytes {
            expected,
            found: payload_len,
        }
        .into());
    }
    Ok(())
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn model_to_bytes(model: &UNetModel) -> Result<Vec<u8>> {
    let tensors: BTreeMap<String, &Tensor> = model.params().iter().map(|(k, v)| (k.clone(), v)).collect();
    encode(FileKind::Model, model.config(), &tensors)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<UNetModel> {
    let d: Decoded<UNetConfig> = decode(bytes, FileKind::Model)?;
    UNetModel::from_params(d.config, d.tensors)
}

pub fn save_model(model: &UNetModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &model_to_bytes(model)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<UNetModel> {
    model_from_bytes(&read_file(path.as_ref())?)
}

pub fn bundle_to_bytes(bundle: &ResAdapterBundle) -> Result<Vec<u8>> {
    let meta = BundleMeta {
        rank: bundle.rank,
        alpha_r: bundle.alpha_r,
        base_fingerprint: format!("{:016x}", bundle.base_fingerprint),
    };
    encode(FileKind::Adapter, &meta, &bundle.tensors())
}

pub fn bundle_from_bytes(bytes: &[u8]) -> Result<ResAdapterBundle> {
    let d: Decoded<BundleMeta> = decode(bytes, FileKind::Adapter)?;
    let meta = d.config;
    let base_fingerprint = u64::from_str_radix(&meta.base_fingerprint, 16)
        .ok()
        .filter(|_| meta.base_fingerprint.len() == 16)
        .ok_or_else(|| FormatError::Header(format!("bad fingerprint {:?}", meta.base_fingerprint)))?;
    if !(0.0..=1.0).contains(&meta.alpha_r) {
        return Err(FormatError::Header(format!("alpha_r {} outside [0, 1]", meta.alpha_r)).into());
    }

    let mut tensors = d.tensors;
    let mut conv_loras = Vec::new();
    let mut norm_deltas = Vec::new();
    let names: Vec<String> = tensors.keys().cloned().collect();
    for name in &names {
        if let Some(site) = name.strip_suffix(LORA_A) {
            if !SiteSelector::SamplerConvs.matches(site) {
                return Err(FormatError::UnknownSite(name.clone()).into());
            }
            let a = tensors.remove(name).expect("listed");
            let b = tensors
                .remove(&format!("{site}{LORA_B}"))
                .ok_or_else(|| FormatError::MissingSite(format!("{site}{LORA_B}")))?;
            let ok = a.rank() == 2 && b.rank() == 2 && a.shape()[1] == meta.rank && b.shape()[1] == meta.rank;
            if !ok {
                return Err(FormatError::Inconsistent {
                    name: site.to_string(),
                    detail: format!("A {:?} and B {:?} disagree with rank {}", a.shape(), b.shape(), meta.rank),
                }
                .into());
            }
            conv_loras.push(LoRAPair {
                site: site.to_string(),
                a,
                b,
            });
        } else if let Some(site) = name.strip_suffix(DELTA_GAMMA) {
            if !SiteSelector::ResnetNorms.matches(&format!("{site}.gamma")) {
                return Err(FormatError::UnknownSite(name.clone()).into());
            }
            let dgamma = tensors.remove(name).expect("listed");
            let dbeta = tensors
                .remove(&format!("{site}{DELTA_BETA}"))
                .ok_or_else(|| FormatError::MissingSite(format!("{site}{DELTA_BETA}")))?;
            if dgamma.rank() != 1 || dgamma.shape() != dbeta.shape() {
                return Err(FormatError::Inconsistent {
                    name: site.to_string(),
                    detail: format!("delta shapes {:?} and {:?}", dgamma.shape(), dbeta.shape()),
                }
                .into());
            }
            norm_deltas.push(NormDelta {
                site: site.to_string(),
                dgamma,
                dbeta,
            });
        }
    }
    // anything left is a lone B / beta or a name outside the grammar
    if let Some(name) = tensors.keys().next() {
        let err = if let Some(site) = name.strip_suffix(LORA_B) {
            FormatError::MissingSite(format!("{site}{LORA_A}"))
        } else if let Some(site) = name.strip_suffix(DELTA_BETA) {
            FormatError::MissingSite(format!("{site}{DELTA_GAMMA}"))
        } else {
            FormatError::UnknownSite(name.clone())
        };
        return Err(err.into());
    }
    Ok(ResAdapterBundle {
        rank: meta.rank,
        conv_loras,
        norm_deltas,
        alpha_r: meta.alpha_r,
        base_fingerprint,
    })
}

pub fn save_bundle(bundle: &ResAdapterBundle, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &bundle_to_bytes(bundle)?)
}

/// Loads a bundle without checking it against any model; use
/// [`ResAdapterBundle::validate_against`] before applying it.
pub fn load_bundle(path: impl AsRef<Path>) -> Result<ResAdapterBundle> {
    bundle_from_bytes(&read_file(path.as_ref())?)
}

/// Summary of a container file.
#[derive(Clone, Debug, PartialEq)]
pub struct InspectReport {
    pub kind: FileKind,
    pub version: u32,
    pub tensors: Vec<(String, Vec<usize>)>,
    pub total_params: usize,
    /// Model fingerprint, or the base fingerprint an adapter expects.
    pub fingerprint: u64,
    pub rank: Option<usize>,
    pub alpha_r: Option<f64>,
}

impl fmt::Display for InspectReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (magic, label) = match self.kind {
            FileKind::Model => ("RSBM", "base model"),
            FileKind::Adapter => ("RSAD", "adapter bundle"),
        };
        writeln!(f, "kind: {magic} ({label})")?;
        writeln!(f, "version: {}", self.version)?;
        match self.kind {
            FileKind::Model => writeln!(f, "fingerprint: {:016x}", self.fingerprint)?,
            FileKind::Adapter => writeln!(f, "base_fingerprint: {:016x}", self.fingerprint)?,
        }
        if let Some(r) = self.rank {
            writeln!(f, "rank: {r}")?;
        }
        if let Some(a) = self.alpha_r {
            writeln!(f, "alpha_r: {a}")?;
        }
        writeln!(f, "tensors: {}", self.tensors.len())?;
        let width = self.tensors.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        for (name, shape) in &self.tensors {
            writeln!(f, "  {name:<width$}  {shape:?}")?;
        }
        let what = match self.kind {
            FileKind::Model => "parameters",
            FileKind::Adapter => "trainable parameters",
        };
        writeln!(f, "{what}: {}", self.total_params)
    }
}

pub fn inspect_bytes(bytes: &[u8]) -> Result<InspectReport> {
    let (kind, version) = read_kind(bytes)?;
    let (entries, fingerprint, rank, alpha_r) = match kind {
        FileKind::Model => {
            let model = model_from_bytes(bytes)?;
            let d: Decoded<UNetConfig> = decode(bytes, kind)?;
            (d.entries, model.fingerprint(), None, None)
        }
        FileKind::Adapter => {
            let b = bundle_from_bytes(bytes)?;
            let d: Decoded<BundleMeta> = decode(bytes, kind)?;
            (d.entries, b.base_fingerprint, Some(b.rank), Some(b.alpha_r))
        }
    };
    Ok(InspectReport {
        kind,
        version,
        total_params: entries.iter().map(|e| e.shape.iter().product::<usize>()).sum(),
        tensors: entries.into_iter().map(|e| (e.name, e.shape)).collect(),
        fingerprint,
        rank,
        alpha_r,
    })
}

pub fn inspect(path: impl AsRef<Path>) -> Result<InspectReport> {
    inspect_bytes(&read_file(path.as_ref())?)
}
