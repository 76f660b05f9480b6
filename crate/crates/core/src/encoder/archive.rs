//! Feature archive container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "PPFEAT01"
//! version      u32      currently 1
//! header_len   u32
//! header       JSON     ArchiveHeader
//! entry_count  u32
//! index        entry_count × { image_id u64, flipped u8, offset u64, length u64 }
//! payload      concatenated zlib blocks, offsets relative to payload start
//! digest       32 bytes SHA-256 of everything above
//! ```
//!
//! Each zlib block decompresses to `channels, grid_h, grid_w` as u32 followed by the
//! `f32` values in `(C, grid_h, grid_w)` order. The digest is verified before any
//! entry is exposed, so a corrupted file never yields partial data.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EncoderError, EncoderSpec, PatchFeatureMap};
use crate::dataset::ImageId;

pub const ARCHIVE_MAGIC: &[u8; 8] = b"PPFEAT01";
const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const INDEX_ENTRY_LEN: usize = 8 + 1 + 8 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub encoder: EncoderSpec,
    pub split: String,
    pub entries: usize,
    /// Hex SHA-256 of the payload section, fixed at finalize time.
    pub payload_digest: String,
}

type EntryKey = (ImageId, bool);

/// Single-writer builder; entries are immutable once [`ArchiveWriter::finish`] runs.
pub struct ArchiveWriter {
    spec: EncoderSpec,
    split: String,
    blocks: BTreeMap<EntryKey, Vec<u8>>,
}

impl ArchiveWriter {
    pub fn new(spec: EncoderSpec, split: impl Into<String>) -> Self {
        Self { spec, split: split.into(), blocks: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Add one map; `flipped` marks the entry extracted from the mirrored image.
    pub fn push(&mut self, map: &PatchFeatureMap, flipped: bool) -> Result<(), EncoderError> {
        if map.channels != self.spec.embed_dim {
            return Err(EncoderError::DimensionMismatch(format!(
                "map has {} channels, archive expects {}",
                map.channels, self.spec.embed_dim
            )));
        }
        let key = (map.image_id, flipped);
        if self.blocks.contains_key(&key) {
            return Err(EncoderError::DuplicateEntry(map.image_id));
        }
        let mut raw = Vec::with_capacity(12 + 4 * map.data.len());
        for d in [map.channels, map.grid_h, map.grid_w] {
            raw.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &map.data {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        let mut enc = ZlibEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&raw).expect("in-memory write");
        self.blocks.insert(key, enc.finish().expect("in-memory write"));
        Ok(())
    }

    pub fn finish(self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut index = Vec::with_capacity(self.blocks.len());
        for ((id, flipped), block) in &self.blocks {
            index.push((*id, *flipped, payload.len() as u64, block.len() as u64));
            payload.extend_from_slice(block);
        }
        let header = ArchiveHeader {
            encoder: self.spec,
            split: self.split,
            entries: index.len(),
            payload_digest: hex_digest(&payload),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");

        let mut out = Vec::with_capacity(payload.len() + header_json.len() + 64);
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&(index.len() as u32).to_le_bytes());
        for (id, flipped, offset, len) in index {
            out.extend_from_slice(&id.to_le_bytes());
            out.push(flipped as u8);
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&len.to_le_bytes());
        }
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(digest.as_slice());
        out
    }

    pub fn finalize(self, path: &Path) -> Result<(), EncoderError> {
        let bytes = self.finish();
        std::fs::write(path, bytes).map_err(|source| EncoderError::Io { path: path.to_owned(), source })
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// A verified, read-only archive held in memory with random access by image id.
#[derive(Debug, Clone)]
pub struct FeatureArchive {
    header: ArchiveHeader,
    index: BTreeMap<EntryKey, (usize, usize)>,
    payload: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EncoderError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| EncoderError::Corrupt("truncated archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, EncoderError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, EncoderError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl FeatureArchive {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncoderError> {
        if bytes.len() < ARCHIVE_MAGIC.len() + DIGEST_LEN || &bytes[..8] != ARCHIVE_MAGIC {
            return Err(EncoderError::Corrupt("bad magic".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(EncoderError::Corrupt("content digest mismatch".into()));
        }

        let mut cur = Cursor { bytes: body, pos: 8 };
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(EncoderError::Corrupt(format!("unsupported version {version}")));
        }
        let header_len = cur.u32()? as usize;
        let header: ArchiveHeader = serde_json::from_slice(cur.take(header_len)?)
            .map_err(|e| EncoderError::Corrupt(format!("header: {e}")))?;
        let count = cur.u32()? as usize;
        if count != header.entries {
            return Err(EncoderError::Corrupt("index size disagrees with header".into()));
        }
        if count.checked_mul(INDEX_ENTRY_LEN).is_none_or(|n| n > body.len() - cur.pos) {
            return Err(EncoderError::Corrupt("index exceeds archive size".into()));
        }
        let mut raw_index = Vec::with_capacity(count);
        for _ in 0..count {
            let id = cur.u64()?;
            let flipped = cur.take(1)?[0] != 0;
            let offset = cur.u64()? as usize;
            let len = cur.u64()? as usize;
            raw_index.push(((id, flipped), (offset, len)));
        }
        let payload = body[cur.pos..].to_vec();
        if hex_digest(&payload) != header.payload_digest {
            return Err(EncoderError::Corrupt("payload digest mismatch".into()));
        }
        let mut index = BTreeMap::new();
        for (key, (offset, len)) in raw_index {
            if offset.checked_add(len).is_none_or(|end| end > payload.len()) {
                return Err(EncoderError::Corrupt(format!("entry {} out of range", key.0)));
            }
            index.insert(key, (offset, len));
        }
        let archive = Self { header, index, payload };
        // every entry must decode before the archive is handed out
        for &key in archive.index.keys() {
            archive.decode(key)?;
        }
        Ok(archive)
    }

    pub fn open(path: &Path) -> Result<Self, EncoderError> {
        let bytes = std::fs::read(path).map_err(|source| EncoderError::Io { path: path.to_owned(), source })?;
        Self::from_bytes(&bytes)
    }

    pub fn header(&self) -> &ArchiveHeader {
        &self.header
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.header.encoder
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Image ids with an unflipped entry, ascending.
    pub fn image_ids(&self) -> Vec<ImageId> {
        self.index.keys().filter(|(_, f)| !f).map(|(id, _)| *id).collect()
    }

    pub fn has_flipped(&self, id: ImageId) -> bool {
        self.index.contains_key(&(id, true))
    }

    pub fn get(&self, id: ImageId) -> Result<PatchFeatureMap, EncoderError> {
        self.decode((id, false))
    }

    pub fn get_flipped(&self, id: ImageId) -> Result<PatchFeatureMap, EncoderError> {
        self.decode((id, true))
    }

    /// Unflipped entries in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = PatchFeatureMap> + '_ {
        self.image_ids().into_iter().map(move |id| self.get(id).expect("entries verified at open"))
    }

    fn decode(&self, key: EntryKey) -> Result<PatchFeatureMap, EncoderError> {
        let &(offset, len) = self.index.get(&key).ok_or(EncoderError::NotFound(key.0))?;
        let mut raw = Vec::new();
        ZlibDecoder::new(&self.payload[offset..offset + len])
            .read_to_end(&mut raw)
            .map_err(|e| EncoderError::Corrupt(format!("entry {}: {e}", key.0)))?;
        let mut cur = Cursor { bytes: &raw, pos: 0 };
        let (c, gh, gw) = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
        if c != self.header.encoder.embed_dim {
            return Err(EncoderError::Corrupt(format!("entry {} has {c} channels", key.0)));
        }
        let n = c * gh * gw;
        let values = cur.take(n * 4)?;
        if cur.pos != raw.len() {
            return Err(EncoderError::Corrupt(format!("entry {} has trailing bytes", key.0)));
        }
        let data = values.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        PatchFeatureMap::new(key.0, c, gh, gw, data)
    }
}

/// Write maps (all unflipped) into a finalized archive at `path`.
pub fn write_archive(
    maps: &[PatchFeatureMap],
    spec: &EncoderSpec,
    split: &str,
    path: &Path,
) -> Result<FeatureArchive, EncoderError> {
    let mut w = ArchiveWriter::new(spec.clone(), split);
    for m in maps {
        w.push(m, false)?;
    }
    let bytes = w.finish();
    std::fs::write(path, &bytes).map_err(|source| EncoderError::Io { path: path.to_owned(), source })?;
    FeatureArchive::from_bytes(&bytes)
}

pub fn read_archive(path: &Path) -> Result<Vec<PatchFeatureMap>, EncoderError> {
    Ok(FeatureArchive::open(path)?.iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Variant;

    fn spec(c: usize) -> EncoderSpec {
        EncoderSpec { name: "t".into(), patch_size: 16, embed_dim: c, variant: Variant::Mock }
    }

    fn map(id: u64, c: usize, gh: usize, gw: usize) -> PatchFeatureMap {
        let data = (0..c * gh * gw).map(|i| (i as f32 * 0.37 + id as f32).sin()).collect();
        PatchFeatureMap::new(id, c, gh, gw, data).unwrap()
    }

    #[test]
    fn roundtrip_and_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ppf");
        let maps: Vec<_> = (1..=5).map(|i| map(i, 6, 2 + i as usize % 3, 3)).collect();
        write_archive(&maps, &spec(6), "train", &path).unwrap();
        assert_eq!(read_archive(&path).unwrap(), maps);
        let a = FeatureArchive::open(&path).unwrap();
        assert_eq!(a.get(3).unwrap(), maps[2]);
        assert!(matches!(a.get(99), Err(EncoderError::NotFound(99))));
        assert_eq!(a.header().split, "train");
    }

    #[test]
    fn flipped_entries_are_separate() {
        let mut w = ArchiveWriter::new(spec(2), "train");
        w.push(&map(1, 2, 1, 2), false).unwrap();
        w.push(&map(100, 2, 1, 2), true).unwrap();
        assert!(matches!(w.push(&map(1, 2, 1, 2), false), Err(EncoderError::DuplicateEntry(1))));
        let a = FeatureArchive::from_bytes(&w.finish()).unwrap();
        assert_eq!(a.image_ids(), vec![1]);
        assert!(a.has_flipped(100));
        assert!(a.get(100).is_err());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut w = ArchiveWriter::new(spec(3), "x");
        assert!(w.push(&map(1, 2, 1, 1), false).is_err());
    }

    #[test]
    fn any_flipped_byte_is_detected() {
        let mut w = ArchiveWriter::new(spec(3), "val");
        w.push(&map(1, 3, 2, 2), false).unwrap();
        let bytes = w.finish();
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x01;
            assert!(FeatureArchive::from_bytes(&bad).is_err(), "byte {i} went unnoticed");
        }
    }
}
