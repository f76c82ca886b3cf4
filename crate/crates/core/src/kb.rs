//! Knowledge-base records and the immutable collection that holds them.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embedding::{l2_normalize, Embedding};
use crate::error::{Error, Result};

pub type EntryId = u64;

/// Dimensions and normalization flag shared by every entry of a knowledge base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub d_audio: usize,
    pub d_text: usize,
    pub normalized: bool,
}

impl Schema {
    pub fn new(d_audio: usize, d_text: usize) -> Self {
        Self {
            d_audio,
            d_text,
            normalized: true,
        }
    }

    pub fn shared_space(&self) -> bool {
        self.d_audio == self.d_text
    }

    pub fn require_shared_space(&self) -> Result<()> {
        if self.shared_space() {
            Ok(())
        } else {
            Err(Error::SharedSpaceRequired {
                d_audio: self.d_audio,
                d_text: self.d_text,
            })
        }
    }
}

/// One audio-caption pair with its two embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: EntryId,
    pub audio: Embedding,
    pub text: Embedding,
    pub caption: String,
    pub audio_uri: String,
    pub source: String,
}

impl PairEntry {
    pub fn new(
        id: EntryId,
        audio: Embedding,
        text: Embedding,
        caption: impl Into<String>,
        audio_uri: impl Into<String>,
        source: impl Into<String>,
    ) -> Self {
        Self {
            id,
            audio,
            text,
            caption: caption.into(),
            audio_uri: audio_uri.into(),
            source: source.into(),
        }
    }
}

/// An immutable set of [`PairEntry`] records with unique ids.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    name: String,
    schema: Schema,
    entries: Vec<PairEntry>,
    by_id: HashMap<EntryId, usize>,
}

impl KnowledgeBase {
    /// Validates every entry against `schema`. When the schema is flagged
    /// normalized, both embeddings of every entry are L2-normalized here.
    pub fn new(name: impl Into<String>, schema: Schema, entries: Vec<PairEntry>) -> Result<Self> {
        if schema.d_audio == 0 || schema.d_text == 0 {
            return Err(Error::SchemaMismatch("dimensions must be positive".into()));
        }
        let mut by_id = HashMap::with_capacity(entries.len());
        let mut checked = Vec::with_capacity(entries.len());
        for (pos, mut entry) in entries.into_iter().enumerate() {
            entry.audio.ensure_dim(schema.d_audio)?;
            entry.text.ensure_dim(schema.d_text)?;
            if entry.caption.is_empty() {
                return Err(Error::EmptyCaption(entry.id));
            }
            if by_id.insert(entry.id, pos).is_some() {
                return Err(Error::DuplicateId(entry.id));
            }
            if schema.normalized {
                entry.audio = l2_normalize(&entry.audio)?;
                entry.text = l2_normalize(&entry.text)?;
            }
            checked.push(entry);
        }
        Ok(Self {
            name: name.into(),
            schema,
            entries: checked,
            by_id,
        })
    }

    pub fn empty(name: impl Into<String>, schema: Schema) -> Self {
        Self {
            name: name.into(),
            schema,
            entries: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    /// Concatenates several knowledge bases into one tier, e.g.
    /// base ∪ synthetic captions → "large". Ids must stay unique.
    pub fn union(name: impl Into<String>, parts: &[&KnowledgeBase]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyKb)?;
        let schema = first.schema;
        for p in parts {
            if p.schema != schema {
                return Err(Error::SchemaMismatch(format!(
                    "{} vs {}",
                    first.name, p.name
                )));
            }
        }
        let entries = parts.iter().flat_map(|p| p.entries.iter().cloned()).collect();
        Self::new(name, schema, entries)
    }

    /// A new knowledge base holding the entries of `self` whose ids satisfy `keep`,
    /// in their original order.
    pub fn filter(&self, name: impl Into<String>, keep: impl Fn(EntryId) -> bool) -> Self {
        let entries: Vec<PairEntry> = self
            .entries
            .iter()
            .filter(|e| keep(e.id))
            .cloned()
            .collect();
        let by_id = entries.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
        Self {
            name: name.into(),
            schema: self.schema,
            entries,
            by_id,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn schema(&self) -> Schema {
        self.schema
    }

    pub fn entries(&self) -> &[PairEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: EntryId) -> Option<&PairEntry> {
        self.by_id.get(&id).map(|&i| &self.entries[i])
    }

    pub fn position(&self, id: EntryId) -> Option<usize> {
        self.by_id.get(&id).copied()
    }

    pub fn contains(&self, id: EntryId) -> bool {
        self.by_id.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = EntryId> + '_ {
        self.entries.iter().map(|e| e.id)
    }

    /// Finds the entry whose `audio_uri` equals `audio_ref`.
    pub fn find_by_audio_uri(&self, audio_ref: &str) -> Option<&PairEntry> {
        self.entries.iter().find(|e| e.audio_uri == audio_ref)
    }
}
