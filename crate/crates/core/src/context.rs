//! Interleaved few-shot contexts and two-phase curriculum manifests.
//!
//! A context is a run of retrieved `(audio, caption)` demonstrations followed
//! by the query audio; the downstream model is expected to caption the last
//! audio. Manifests list, per training query, which demonstrations to
//! interleave: none in phase 1, between 1 and K in phase 2.

use std::collections::HashSet;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::rank_order;
use crate::kb::{EntryId, KnowledgeBase};
use crate::retrieval::{RetrievalQuery, Retriever, ScoredHit, Strategy};

/// Maximum demonstrations per training sample.
pub const DEFAULT_TRAIN_K: usize = 5;
/// Maximum demonstrations evaluated at test time.
pub const DEFAULT_EVAL_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub audio_ref: String,
    pub caption: String,
    pub source_entry_id: EntryId,
    pub s_fused: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderPolicy {
    /// Least similar first; the most similar demonstration sits next to the query.
    #[default]
    AscendingSimilarity,
    DescendingSimilarity,
}

impl std::str::FromStr for OrderPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ascending" | "ascending_similarity" => Ok(OrderPolicy::AscendingSimilarity),
            "descending" | "descending_similarity" => Ok(OrderPolicy::DescendingSimilarity),
            other => Err(Error::InvalidArgument(format!("unknown order policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterleavedContext {
    pub demonstrations: Vec<Demonstration>,
    pub query_audio_ref: String,
    pub order_policy: OrderPolicy,
}

/// One element of the flattened prompt sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContextItem<'a> {
    Audio(&'a str),
    Caption(&'a str),
}

impl InterleavedContext {
    /// `a_1, t_1, …, a_k, t_k, a_query`.
    pub fn sequence(&self) -> Vec<ContextItem<'_>> {
        let mut out = Vec::with_capacity(2 * self.demonstrations.len() + 1);
        for d in &self.demonstrations {
            out.push(ContextItem::Audio(&d.audio_ref));
            out.push(ContextItem::Caption(&d.caption));
        }
        out.push(ContextItem::Audio(&self.query_audio_ref));
        out
    }
}

/// Picks the `k` best hits (by fused score, ties to lower id), orders them per
/// `policy`, and resolves captions from `kb`. `k` beyond the hit count is clipped.
pub fn assemble_context(
    hits: &[ScoredHit],
    kb: &KnowledgeBase,
    query_audio_ref: &str,
    k: usize,
    policy: OrderPolicy,
) -> Result<InterleavedContext> {
    let mut ranked: Vec<ScoredHit> = hits.to_vec();
    ranked.sort_by(|a, b| rank_order(a.s_fused, a.entry_id, b.s_fused, b.entry_id));
    let mut seen = HashSet::new();
    ranked.retain(|h| seen.insert(h.entry_id));
    ranked.truncate(k);
    if policy == OrderPolicy::AscendingSimilarity {
        ranked.reverse();
    }
    let demonstrations = ranked
        .iter()
        .map(|h| {
            let e = kb.get(h.entry_id).ok_or(Error::UnknownEntryId(h.entry_id))?;
            Ok(Demonstration {
                audio_ref: e.audio_uri.clone(),
                caption: e.caption.clone(),
                source_entry_id: e.id,
                s_fused: h.s_fused,
            })
        })
        .collect::<Result<_>>()?;
    Ok(InterleavedContext {
        demonstrations,
        query_audio_ref: query_audio_ref.to_string(),
        order_policy: policy,
    })
}

#[derive(Serialize)]
struct RenderedDemo<'a> {
    audio_ref: &'a str,
    caption: &'a str,
}

#[derive(Serialize)]
struct RenderedContext<'a> {
    demonstrations: Vec<RenderedDemo<'a>>,
    query_audio_ref: &'a str,
}

/// Compact JSON with a fixed key order.
pub fn render_context_json(ctx: &InterleavedContext) -> Vec<u8> {
    let rendered = RenderedContext {
        demonstrations: ctx
            .demonstrations
            .iter()
            .map(|d| RenderedDemo {
                audio_ref: &d.audio_ref,
                caption: &d.caption,
            })
            .collect(),
        query_audio_ref: &ctx.query_audio_ref,
    };
    serde_json::to_vec(&rendered).expect("plain structs serialize")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumSample {
    pub query_id: EntryId,
    /// Demonstrations drawn for this sample; 0 in phase 1.
    pub k: usize,
    pub demonstrations: Vec<EntryId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumManifest {
    pub phase: u8,
    pub samples: Vec<CurriculumSample>,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    phase: u8,
    query_id: EntryId,
    k: usize,
    demonstrations: Vec<EntryId>,
}

impl CurriculumManifest {
    /// One JSON object per sample: `{"phase","query_id","k","demonstrations"}`.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for s in &self.samples {
            serde_json::to_writer(
                &mut out,
                &ManifestLine {
                    phase: self.phase,
                    query_id: s.query_id,
                    k: s.k,
                    demonstrations: s.demonstrations.clone(),
                },
            )?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self> {
        let mut phase = None;
        let mut samples = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let l: ManifestLine = serde_json::from_str(line)?;
            if *phase.get_or_insert(l.phase) != l.phase {
                return Err(Error::InvalidArgument("mixed phases in manifest".into()));
            }
            samples.push(CurriculumSample {
                query_id: l.query_id,
                k: l.k,
                demonstrations: l.demonstrations,
            });
        }
        Ok(Self {
            phase: phase.unwrap_or(1),
            samples,
        })
    }
}

/// Phase 1: every trainset pair with no demonstrations. Phase 2: each pair with
/// `k ~ U{1..=max_k}` (seeded, in trainset order) demonstrations retrieved from
/// the knowledge base, never including the pair's own id.
pub fn build_curriculum(
    trainset: &KnowledgeBase,
    retriever: &Retriever,
    strategy: Strategy,
    max_k: usize,
    seed: u64,
) -> Result<(CurriculumManifest, CurriculumManifest)> {
    if max_k == 0 {
        return Err(Error::InvalidK);
    }
    let phase1 = CurriculumManifest {
        phase: 1,
        samples: trainset
            .entries()
            .iter()
            .map(|e| CurriculumSample {
                query_id: e.id,
                k: 0,
                demonstrations: Vec::new(),
            })
            .collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ks: Vec<usize> = trainset
        .entries()
        .iter()
        .map(|_| rng.random_range(1..=max_k))
        .collect();
    let samples = trainset
        .entries()
        .par_iter()
        .zip(ks)
        .map(|(e, k)| {
            let exclude: HashSet<EntryId> = [e.id].into();
            let hits = retriever.retrieve(strategy, &RetrievalQuery::from_entry(e), k, Some(&exclude))?;
            Ok(CurriculumSample {
                query_id: e.id,
                k,
                demonstrations: hits.iter().map(|h| h.entry_id).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((phase1, CurriculumManifest { phase: 2, samples }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::{random_kb, toy_kb};
    use crate::retrieval::Weight;
    use std::sync::Arc;

    fn hit(id: u64, s: f64) -> ScoredHit {
        ScoredHit {
            entry_id: id,
            s_audio: s,
            s_text: None,
            s_fused: s,
        }
    }

    #[test]
    fn assemble_examples() {
        let kb = toy_kb();
        let hits = [hit(3, 0.8), hit(1, 0.5)];
        let ctx = assemble_context(&hits, &kb, "clip-q", 2, OrderPolicy::AscendingSimilarity).unwrap();
        let ids: Vec<u64> = ctx.demonstrations.iter().map(|d| d.source_entry_id).collect();
        assert_eq!(ids, vec![1, 3]);
        assert_eq!(ctx.sequence().last(), Some(&ContextItem::Audio("clip-q")));
        assert_eq!(ctx.demonstrations[1].caption, "dog barking in the rain");

        let ctx = assemble_context(&hits, &kb, "clip-q", 0, OrderPolicy::default()).unwrap();
        assert!(ctx.demonstrations.is_empty());
        assert_eq!(ctx.sequence(), vec![ContextItem::Audio("clip-q")]);

        let ctx = assemble_context(&hits, &kb, "clip-q", 5, OrderPolicy::default()).unwrap();
        assert_eq!(ctx.demonstrations.len(), 2);

        let ctx = assemble_context(&hits, &kb, "q", 2, OrderPolicy::DescendingSimilarity).unwrap();
        assert_eq!(ctx.demonstrations[0].source_entry_id, 3);

        assert!(matches!(
            assemble_context(&[hit(9, 1.0)], &kb, "q", 1, OrderPolicy::default()),
            Err(Error::UnknownEntryId(9))
        ));
    }

    #[test]
    fn top_k_set_independent_of_policy() {
        let kb = toy_kb();
        let hits = [hit(2, 0.1), hit(3, 0.8), hit(1, 0.5)];
        for k in 0..4 {
            let a = assemble_context(&hits, &kb, "q", k, OrderPolicy::AscendingSimilarity).unwrap();
            let d = assemble_context(&hits, &kb, "q", k, OrderPolicy::DescendingSimilarity).unwrap();
            let mut x: Vec<u64> = a.demonstrations.iter().map(|d| d.source_entry_id).collect();
            let mut y: Vec<u64> = d.demonstrations.iter().map(|d| d.source_entry_id).collect();
            x.sort();
            y.sort();
            assert_eq!(x, y);
            let expected: Vec<u64> = [3, 1, 2][..k.min(3)].to_vec();
            let mut expected = expected;
            expected.sort();
            assert_eq!(x, expected);
        }
    }

    #[test]
    fn render_examples() {
        let kb = toy_kb();
        let ctx = assemble_context(&[], &kb, "clip-1", 3, OrderPolicy::default()).unwrap();
        assert_eq!(
            render_context_json(&ctx),
            br#"{"demonstrations":[],"query_audio_ref":"clip-1"}"#
        );
        let ctx = assemble_context(&[hit(2, 0.3)], &kb, "clip-1", 1, OrderPolicy::default()).unwrap();
        let bytes = render_context_json(&ctx);
        assert_eq!(bytes, render_context_json(&ctx.clone()));
        assert_eq!(
            bytes,
            br#"{"demonstrations":[{"audio_ref":"clip-2","caption":"rain falling"}],"query_audio_ref":"clip-1"}"#
        );
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(serde_json::to_vec(&v).unwrap(), bytes);
    }

    fn curriculum(max_k: usize, seed: u64) -> (CurriculumManifest, CurriculumManifest) {
        let kb = Arc::new(random_kb(40, 4, 4, 2));
        let r = Retriever::new(kb.clone()).unwrap();
        let train = kb.filter("train", |id| id <= 3);
        build_curriculum(&train, &r, Strategy::PairToPair(Weight::default()), max_k, seed).unwrap()
    }

    #[test]
    fn curriculum_examples() {
        let (p1, p2) = curriculum(1, 0);
        assert!(p1.samples.iter().all(|s| s.demonstrations.is_empty() && s.k == 0));
        assert_eq!(p1.phase, 1);
        assert!(p2.samples.iter().all(|s| s.demonstrations.len() == 1));

        let a = curriculum(5, 42);
        let b = curriculum(5, 42);
        assert_eq!(a, b);
        for s in &a.1.samples {
            assert!((1..=5).contains(&s.k));
            assert_eq!(s.demonstrations.len(), s.k);
            assert!(!s.demonstrations.contains(&s.query_id));
        }
    }

    #[test]
    fn manifest_jsonl_round_trip() {
        let (_, p2) = curriculum(5, 7);
        let mut buf = Vec::new();
        p2.write_jsonl(&mut buf).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 3);
        assert_eq!(CurriculumManifest::read_jsonl(std::str::from_utf8(&buf).unwrap()).unwrap(), p2);
    }
}
