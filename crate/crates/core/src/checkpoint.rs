//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "ADVSEGCK"
//! version  u32
//! kind     u8       0 = segmentation net, 1 = discriminator, 2 = trainer state
//! dtype    u8       4 = f32, 8 = f64
//! seed     u64      initialization seed
//! meta     u32 length + UTF-8 JSON (network config or trainer state)
//! count    u32      number of arrays
//! array    u16 name length + name, u8 rank, rank x u64 dims, elements
//! crc      u32      CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::networks::{DiscNet, DiscNetConfig, NetParams, Param, SegNet, SegNetConfig};
use crate::real::{DType, Real};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ADVSEGCK";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchiveKind {
    Segmentation,
    Discriminator,
    TrainerState,
}

impl ArchiveKind {
    fn tag(self) -> u8 {
        match self {
            ArchiveKind::Segmentation => 0,
            ArchiveKind::Discriminator => 1,
            ArchiveKind::TrainerState => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ArchiveKind::Segmentation),
            1 => Some(ArchiveKind::Discriminator),
            2 => Some(ArchiveKind::TrainerState),
            _ => None,
        }
    }
}

/// Decoded file with arrays widened to `f64` (lossless for both dtypes).
#[derive(Debug, Clone)]
pub struct Archive {
    pub kind: ArchiveKind,
    pub dtype: DType,
    pub seed: u64,
    pub meta: String,
    pub arrays: Vec<Param<f64>>,
}

impl Archive {
    pub fn array(&self, name: &str) -> Option<&Param<f64>> {
        self.arrays.iter().find(|p| p.name == name)
    }
}

pub(crate) fn encode<T: Real>(kind: ArchiveKind, seed: u64, meta: &str, arrays: &[&Param<T>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind.tag());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&seed.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for p in arrays {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.shape.len() as u8);
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &p.data {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Archive> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
        return Err(corrupt(path, "checksum mismatch"));
    }
    let truncated = || corrupt(path, "truncated");
    let mut r = Reader { bytes: body, pos: 12 };
    let kind = ArchiveKind::from_tag(r.u8().ok_or_else(truncated)?).ok_or_else(|| corrupt(path, "unknown kind"))?;
    let dtype = DType::from_tag(r.u8().ok_or_else(truncated)?).ok_or_else(|| corrupt(path, "unknown dtype"))?;
    let seed = r.u64().ok_or_else(truncated)?;
    let meta_len = r.u32().ok_or_else(truncated)? as usize;
    let meta = String::from_utf8(r.take(meta_len).ok_or_else(truncated)?.to_vec())
        .map_err(|_| corrupt(path, "metadata is not UTF-8"))?;
    let count = r.u32().ok_or_else(truncated)? as usize;
    let mut arrays = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u16().ok_or_else(truncated)? as usize;
        let name = String::from_utf8(r.take(name_len).ok_or_else(truncated)?.to_vec())
            .map_err(|_| corrupt(path, "array name is not UTF-8"))?;
        let rank = r.u8().ok_or_else(truncated)? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize).ok_or_else(truncated))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(truncated)?;
        let width = dtype.tag() as usize;
        let raw = r.take(n.checked_mul(width).ok_or_else(truncated)?).ok_or_else(truncated)?;
        let data = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
        };
        arrays.push(Param { name, shape, data });
    }
    if r.pos != body.len() {
        return Err(corrupt(path, "trailing bytes"));
    }
    Ok(Archive {
        kind,
        dtype,
        seed,
        meta,
        arrays,
    })
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

fn expect_kind(a: &Archive, kind: ArchiveKind, path: &Path) -> Result<()> {
    if a.kind != kind {
        return Err(corrupt(path, format!("holds {:?}, expected {kind:?}", a.kind)));
    }
    Ok(())
}

fn params_from<T: Real>(a: &Archive) -> NetParams<T> {
    NetParams {
        seed: a.seed,
        params: a.arrays.iter().map(|p| Param {
            name: p.name.clone(),
            shape: p.shape.clone(),
            data: p.data.iter().map(|&v| T::of(v)).collect(),
        })
        .collect(),
    }
}

fn config_json<C: serde::Serialize>(config: &C) -> String {
    serde_json::to_string(config).expect("configs serialize")
}

pub fn save_seg<T: Real>(net: &SegNet<T>, path: &Path) -> Result<()> {
    let arrays: Vec<_> = net.params.params.iter().collect();
    write_atomic(path, &encode(ArchiveKind::Segmentation, net.params.seed, &config_json(&net.config), &arrays))
}

/// Loads a segmentation net. With `expected` set, the stored config must
/// match it.
pub fn load_seg<T: Real>(path: &Path, expected: Option<&SegNetConfig>) -> Result<SegNet<T>> {
    let a = read_archive(path)?;
    expect_kind(&a, ArchiveKind::Segmentation, path)?;
    let config: SegNetConfig =
        serde_json::from_str(&a.meta).map_err(|e| corrupt(path, format!("bad config echo: {e}")))?;
    if let Some(want) = expected {
        if want != &config {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {config:?}, configuration asks for {want:?}"
            )));
        }
    }
    SegNet::from_params(config, params_from(&a))
}

pub fn save_disc<T: Real>(net: &DiscNet<T>, path: &Path) -> Result<()> {
    let arrays: Vec<_> = net.params.params.iter().collect();
    write_atomic(path, &encode(ArchiveKind::Discriminator, net.params.seed, &config_json(&net.config), &arrays))
}

pub fn load_disc<T: Real>(path: &Path, expected: Option<&DiscNetConfig>) -> Result<DiscNet<T>> {
    let a = read_archive(path)?;
    expect_kind(&a, ArchiveKind::Discriminator, path)?;
    let config: DiscNetConfig =
        serde_json::from_str(&a.meta).map_err(|e| corrupt(path, format!("bad config echo: {e}")))?;
    if let Some(want) = expected {
        if want != &config {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {config:?}, configuration asks for {want:?}"
            )));
        }
    }
    DiscNet::from_params(config, params_from(&a))
}

/// Element type stored in a checkpoint file.
pub fn checkpoint_dtype(path: &Path) -> Result<DType> {
    Ok(read_archive(path)?.dtype)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_seg<T: Real>() -> SegNet<T> {
        SegNet::new(
            SegNetConfig {
                base_channels: 2,
                ..Default::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seg.bin");
        let net = small_seg::<f32>();
        save_seg(&net, &p).unwrap();
        let back: SegNet<f32> = load_seg(&p, Some(&net.config)).unwrap();
        assert_eq!(back.params, net.params);
        let net64 = small_seg::<f64>();
        save_seg(&net64, &p).unwrap();
        assert_eq!(load_seg::<f64>(&p, None).unwrap().params, net64.params);
        assert_eq!(checkpoint_dtype(&p).unwrap(), DType::F64);

        let d = DiscNet::<f32>::new(DiscNetConfig::default(), 3).unwrap();
        let q = dir.path().join("disc.bin");
        save_disc(&d, &q).unwrap();
        assert_eq!(load_disc::<f32>(&q, None).unwrap().params, d.params);
        assert!(load_seg::<f32>(&q, None).is_err());
    }

    #[test]
    fn wrong_class_count_is_a_config_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seg.bin");
        let net = small_seg::<f32>();
        save_seg(&net, &p).unwrap();
        let other = SegNetConfig {
            classes: 3,
            ..net.config.clone()
        };
        assert!(matches!(load_seg::<f32>(&p, Some(&other)), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seg.bin");
        save_seg(&small_seg::<f32>(), &p).unwrap();
        let good = fs::read(&p).unwrap();

        let mut flipped = good.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(decode(&flipped, &p), Err(Error::Checkpoint { .. })));

        let mut versioned = good.clone();
        versioned[8] = 99;
        assert!(matches!(decode(&versioned, &p), Err(Error::CheckpointVersion { found: 99, .. })));

        assert!(decode(&good[..good.len() - 9], &p).is_err());
        assert!(decode(b"hello", &p).is_err());
        assert!(matches!(load_seg::<f32>(&dir.path().join("none.bin"), None), Err(Error::Io { .. })));
    }
}
