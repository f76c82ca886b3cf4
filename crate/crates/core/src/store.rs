//! PKB1 embedding store: fixed-stride binary records plus a JSONL metadata sidecar.
//!
//! Layout (all little-endian):
//!
//! ```text
//! 0   magic    "PKB1"
//! 4   u16      version (1)
//! 6   u16      flags (bit 0: normalized)
//! 8   u32      d_A
//! 12  u32      d_T
//! 16  u64      count
//! 24  count × [u64 id][d_A × f32 audio][d_T × f32 text]
//! ```
//!
//! The sidecar `<stem>.meta.jsonl` holds one `{"id","caption","audio_uri","source"}`
//! object per entry. Its id set must equal the binary file's id set.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::kb::{EntryId, KnowledgeBase, PairEntry, Schema};

pub const STORE_MAGIC: &[u8; 4] = b"PKB1";
pub const STORE_VERSION: u16 = 1;
const HEADER_LEN: usize = 24;
const FLAG_NORMALIZED: u16 = 1;

/// One line of the metadata sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryMeta {
    pub id: EntryId,
    pub caption: String,
    pub audio_uri: String,
    pub source: String,
}

/// Decoded binary payload, before joining with metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct RawStore {
    pub schema: Schema,
    pub records: Vec<RawRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub id: EntryId,
    pub audio: Vec<f32>,
    pub text: Vec<f32>,
}

/// `foo/toy.pkb` → `foo/toy.meta.jsonl`.
pub fn metadata_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.meta.jsonl"))
}

pub fn encode_store(kb: &KnowledgeBase) -> Vec<u8> {
    let schema = kb.schema();
    let stride = 8 + 4 * (schema.d_audio + schema.d_text);
    let mut out = Vec::with_capacity(HEADER_LEN + stride * kb.len());
    out.extend_from_slice(STORE_MAGIC);
    out.extend_from_slice(&STORE_VERSION.to_le_bytes());
    let flags = if schema.normalized { FLAG_NORMALIZED } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(schema.d_audio as u32).to_le_bytes());
    out.extend_from_slice(&(schema.d_text as u32).to_le_bytes());
    out.extend_from_slice(&(kb.len() as u64).to_le_bytes());
    for e in kb.entries() {
        out.extend_from_slice(&e.id.to_le_bytes());
        for v in e.audio.as_slice().iter().chain(e.text.as_slice()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn encode_metadata(kb: &KnowledgeBase) -> Vec<u8> {
    let mut out = Vec::new();
    for e in kb.entries() {
        let meta = EntryMeta {
            id: e.id,
            caption: e.caption.clone(),
            audio_uri: e.audio_uri.clone(),
            source: e.source.clone(),
        };
        serde_json::to_writer(&mut out, &meta).expect("in-memory serialization");
        out.push(b'\n');
    }
    out
}

/// Writes `path` and its metadata sidecar.
pub fn write_store(kb: &KnowledgeBase, path: &Path) -> Result<()> {
    fs::write(path, encode_store(kb))?;
    fs::write(metadata_path(path), encode_metadata(kb))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| Error::TruncatedFile(format!("need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parses the binary part of a PKB1 file.
pub fn decode_store(bytes: &[u8]) -> Result<RawStore> {
    if bytes.len() < STORE_MAGIC.len() || &bytes[..4] != STORE_MAGIC {
        return Err(Error::BadMagic { expected: "PKB1" });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u16()?;
    if version != STORE_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let flags = r.u16()?;
    if flags & !FLAG_NORMALIZED != 0 {
        return Err(Error::Corrupt(format!("unknown flags {flags:#x}")));
    }
    let d_audio = r.u32()? as usize;
    let d_text = r.u32()? as usize;
    let count = r.u64()?;
    if d_audio == 0 || d_text == 0 {
        return Err(Error::Corrupt("zero dimension".into()));
    }
    let stride = (d_audio as u64 + d_text as u64)
        .checked_mul(4)
        .and_then(|s| s.checked_add(8))
        .ok_or_else(|| Error::Corrupt("record stride overflows".into()))?;
    let body = (bytes.len() - HEADER_LEN) as u64;
    match count.checked_mul(stride) {
        Some(need) if need > body => {
            return Err(Error::TruncatedFile(format!(
                "header declares {count} records ({need} bytes), {body} bytes present"
            )))
        }
        Some(need) if need < body => {
            return Err(Error::Corrupt(format!("{} trailing bytes", body - need)))
        }
        Some(_) => {}
        None => return Err(Error::TruncatedFile("record count overflows".into())),
    }
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let id = r.u64()?;
        let audio = r.f32s(d_audio)?;
        let text = r.f32s(d_text)?;
        records.push(RawRecord { id, audio, text });
    }
    Ok(RawStore {
        schema: Schema {
            d_audio,
            d_text,
            normalized: flags & FLAG_NORMALIZED != 0,
        },
        records,
    })
}

pub fn parse_metadata(text: &str) -> Result<Vec<EntryMeta>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Joins decoded records with their metadata into a validated knowledge base.
pub fn assemble(name: &str, raw: RawStore, meta: Vec<EntryMeta>) -> Result<KnowledgeBase> {
    let mut by_id: HashMap<EntryId, EntryMeta> = HashMap::with_capacity(meta.len());
    for m in meta {
        let id = m.id;
        if by_id.insert(id, m).is_some() {
            return Err(Error::MetadataMismatch(format!("id {id} listed twice")));
        }
    }
    if by_id.len() != raw.records.len() {
        return Err(Error::MetadataMismatch(format!(
            "{} records but {} metadata lines",
            raw.records.len(),
            by_id.len()
        )));
    }
    let mut entries = Vec::with_capacity(raw.records.len());
    for rec in raw.records {
        let m = by_id
            .remove(&rec.id)
            .ok_or_else(|| Error::MetadataMismatch(format!("id {} has no metadata", rec.id)))?;
        entries.push(PairEntry {
            id: rec.id,
            audio: Embedding::new(rec.audio)?,
            text: Embedding::new(rec.text)?,
            caption: m.caption,
            audio_uri: m.audio_uri,
            source: m.source,
        });
    }
    KnowledgeBase::new(name, raw.schema, entries)
}

/// Loads a PKB1 file and its sidecar. The knowledge base is named after the file stem.
pub fn load_embedding_store(path: &Path) -> Result<KnowledgeBase> {
    let bytes = fs::read(path)?;
    let raw = decode_store(&bytes)?;
    let meta = parse_metadata(&fs::read_to_string(metadata_path(path))?)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "kb".into());
    assemble(&name, raw, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::toy_kb;

    #[test]
    fn metadata_path_replaces_extension() {
        assert_eq!(
            metadata_path(Path::new("/a/b/toy.pkb")),
            PathBuf::from("/a/b/toy.meta.jsonl")
        );
    }

    #[test]
    fn loads_three_record_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.pkb");
        write_store(&toy_kb(), &path).unwrap();
        let kb = load_embedding_store(&path).unwrap();
        assert_eq!(kb.len(), 3);
        assert_eq!(kb.name(), "toy");
        assert_eq!(kb.get(3).unwrap().caption, toy_kb().get(3).unwrap().caption);
        assert_eq!(encode_store(&kb), encode_store(&toy_kb()));
    }

    #[test]
    fn short_record_section_is_truncated() {
        let mut bytes = encode_store(&toy_kb());
        bytes[16..24].copy_from_slice(&5u64.to_le_bytes());
        assert!(matches!(decode_store(&bytes), Err(Error::TruncatedFile(_))));
        // header says 5, four records present
        let kb = crate::fixture::random_kb(4, 2, 2, 1);
        let mut bytes = encode_store(&kb);
        bytes[16..24].copy_from_slice(&5u64.to_le_bytes());
        assert!(matches!(decode_store(&bytes), Err(Error::TruncatedFile(_))));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_store(&toy_kb());
        bytes[0] = b'X';
        assert!(matches!(decode_store(&bytes), Err(Error::BadMagic { .. })));
        let mut bytes = encode_store(&toy_kb());
        bytes[4] = 9;
        assert!(matches!(
            decode_store(&bytes),
            Err(Error::VersionUnsupported(9))
        ));
        assert!(matches!(decode_store(b"PK"), Err(Error::BadMagic { .. })));
        assert!(matches!(
            decode_store(b"PKB1\x01\x00"),
            Err(Error::TruncatedFile(_))
        ));
    }

    #[test]
    fn metadata_missing_id_is_mismatch() {
        let kb = toy_kb();
        let raw = decode_store(&encode_store(&kb)).unwrap();
        let meta: Vec<EntryMeta> =
            parse_metadata(std::str::from_utf8(&encode_metadata(&kb)).unwrap())
                .unwrap()
                .into_iter()
                .filter(|m| m.id != 2)
                .collect();
        assert!(matches!(
            assemble("toy", raw.clone(), meta.clone()),
            Err(Error::MetadataMismatch(_))
        ));
        let mut swapped = meta;
        swapped.push(EntryMeta {
            id: 99,
            caption: "x".into(),
            audio_uri: "x".into(),
            source: "x".into(),
        });
        assert!(matches!(
            assemble("toy", raw, swapped),
            Err(Error::MetadataMismatch(_))
        ));
    }

    #[test]
    fn rejects_unknown_metadata_keys() {
        assert!(parse_metadata(r#"{"id":1,"caption":"a","audio_uri":"b","source":"c","x":1}"#).is_err());
    }
}
