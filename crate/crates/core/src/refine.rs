//! Refined knowledge-base construction.
//!
//! Every pair is embedded as `z = [a ; t]` with both halves unit length. Each
//! trainset pair queries the knowledge base by cosine over these concatenations;
//! the union of all top-k hits, deduplicated, becomes the refined knowledge base.
//!
//! With unit halves, `cos(z_j, z_i) = (⟨a_j, a_i⟩ + ⟨t_j, t_i⟩) / 2`, which is the
//! pair-to-pair fused score at `W = 0.5`.

use std::collections::{BTreeSet, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{l2_normalize, Embedding};
use crate::error::{Error, Result};
use crate::index::{build_flat, Field};
use crate::kb::{EntryId, KnowledgeBase, PairEntry};

/// Name given to the output knowledge base.
pub const REFINED_NAME: &str = "refined";

/// `[audio ; text]` of one entry, not renormalized as a whole.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatEmbedding {
    pub parent_id: EntryId,
    pub values: Embedding,
    pub d_audio: usize,
}

impl ConcatEmbedding {
    pub fn audio_part(&self) -> &[f32] {
        &self.values.as_slice()[..self.d_audio]
    }

    pub fn text_part(&self) -> &[f32] {
        &self.values.as_slice()[self.d_audio..]
    }
}

/// Normalizes each half (a no-op for normalized knowledge bases) and concatenates.
pub fn concat_embedding(entry: &PairEntry) -> Result<ConcatEmbedding> {
    let a = l2_normalize(&entry.audio)?;
    let t = l2_normalize(&entry.text)?;
    let mut values = a.into_vec();
    let d_audio = values.len();
    values.extend_from_slice(t.as_slice());
    Ok(ConcatEmbedding {
        parent_id: entry.id,
        values: Embedding::new(values)?,
        d_audio,
    })
}

/// Cosine of two vectors of equal length.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineHit {
    pub id: EntryId,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHits {
    pub query_id: EntryId,
    pub hits: Vec<RefineHit>,
}

/// Audit record of one refinement run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub input_kb_size: usize,
    pub trainset_size: usize,
    pub k: usize,
    pub exclude_self: bool,
    pub output_size: usize,
    /// `input_kb_size / output_size`.
    pub compression_ratio: f64,
    pub queries: Vec<QueryHits>,
}

/// Whether any trainset id also appears in the knowledge base; the default
/// for `exclude_self`.
pub fn ids_overlap(kb: &KnowledgeBase, trainset: &KnowledgeBase) -> bool {
    trainset.ids().any(|id| kb.contains(id))
}

/// Unions every trainset pair's top-`k` neighbours (cosine over concatenated
/// embeddings). With `exclude_self`, a trainset pair never retrieves the
/// knowledge-base entry sharing its id.
pub fn refine_kb(
    kb: &KnowledgeBase,
    trainset: &KnowledgeBase,
    k: usize,
    exclude_self: bool,
) -> Result<(KnowledgeBase, RefineReport)> {
    if kb.schema() != trainset.schema() {
        return Err(Error::SchemaMismatch(format!(
            "knowledge base {:?} vs trainset {:?}",
            kb.schema(),
            trainset.schema()
        )));
    }
    if kb.is_empty() {
        return Err(Error::EmptyKb);
    }
    if trainset.is_empty() {
        return Err(Error::EmptyTrainset);
    }
    if k == 0 {
        return Err(Error::InvalidK);
    }
    // Ranking by raw inner product equals cosine ranking once both halves are unit.
    let index = if kb.schema().normalized {
        build_flat(kb, Field::PairConcat)?
    } else {
        let mut schema = kb.schema();
        schema.normalized = true;
        build_flat(
            &KnowledgeBase::new(kb.name(), schema, kb.entries().to_vec())?,
            Field::PairConcat,
        )?
    };
    let concat: Vec<ConcatEmbedding> = kb
        .entries()
        .iter()
        .map(concat_embedding)
        .collect::<Result<_>>()?;
    let queries: Vec<QueryHits> = trainset
        .entries()
        .par_iter()
        .map(|q| -> Result<QueryHits> {
            let z = concat_embedding(q)?;
            let exclude: Option<HashSet<EntryId>> = exclude_self.then(|| [q.id].into());
            let top = index.search_topk(z.values.as_slice(), k, exclude.as_ref())?;
            let hits = top
                .hits
                .iter()
                .map(|h| {
                    let pos = kb.position(h.id).expect("indexed id");
                    RefineHit {
                        id: h.id,
                        cosine: cosine(z.values.as_slice(), concat[pos].values.as_slice()),
                    }
                })
                .collect();
            Ok(QueryHits {
                query_id: q.id,
                hits,
            })
        })
        .collect::<Result<_>>()?;
    let keep: BTreeSet<EntryId> = queries
        .iter()
        .flat_map(|q| q.hits.iter().map(|h| h.id))
        .collect();
    let refined = kb.filter(REFINED_NAME, |id| keep.contains(&id));
    let report = RefineReport {
        input_kb_size: kb.len(),
        trainset_size: trainset.len(),
        k,
        exclude_self,
        output_size: refined.len(),
        compression_ratio: if refined.is_empty() {
            0.0
        } else {
            kb.len() as f64 / refined.len() as f64
        },
        queries,
    };
    Ok((refined, report))
}
