//! Retrieval strategies over a knowledge base.
//!
//! Every strategy scores an entry with inner products of normalized embeddings:
//!
//! | strategy                  | fused score                                   |
//! |---------------------------|-----------------------------------------------|
//! | audio_to_audio            | ⟨a_q, a_k⟩                                    |
//! | audio_to_text             | ⟨a_q, t_k⟩                                    |
//! | audio_to_mixture          | (⟨a_q, a_k⟩ + ⟨a_q, t_k⟩) / 2                 |
//! | pair_to_pair              | W·⟨a_q, a_k⟩ + (1 − W)·⟨t_q, t_k⟩             |
//! | generative_pair_to_pair   | as pair_to_pair, t_q encoded from a generated caption |

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embedding::{dot_slices, Embedding};
use crate::error::{Error, Result};
use crate::index::{build_flat, rank_order, top_k_by, Field, VectorIndex};
use crate::kb::{EntryId, KnowledgeBase, PairEntry};
use crate::providers::{CaptionProvider, EncodeInput, EncoderProvider};

/// Knowledge bases up to this size are ranked by full scan.
pub const DEFAULT_EXACT_THRESHOLD: usize = 100_000;
/// Per-modality candidates fetched per requested hit before re-ranking.
pub const DEFAULT_OVERFETCH: usize = 4;
pub const DEFAULT_WEIGHT: f64 = 0.5;

/// Audio/text balance `W ∈ [0, 1]` of the fused score.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Weight(f64);

impl Weight {
    pub fn new(w: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&w) {
            Ok(Self(w))
        } else {
            Err(Error::InvalidWeight(w))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Weight {
    fn default() -> Self {
        Self(DEFAULT_WEIGHT)
    }
}

impl TryFrom<f64> for Weight {
    type Error = Error;
    fn try_from(w: f64) -> Result<Self> {
        Self::new(w)
    }
}

impl From<Weight> for f64 {
    fn from(w: Weight) -> f64 {
        w.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    AudioToAudio,
    AudioToText,
    AudioToMixture,
    PairToPair(Weight),
    GenerativePairToPair(Weight),
}

impl Strategy {
    pub const TAGS: [&'static str; 5] = [
        "audio_to_audio",
        "audio_to_text",
        "audio_to_mixture",
        "pair_to_pair",
        "generative_pair_to_pair",
    ];

    /// Builds a strategy from its tag. Pair strategies take `weight`
    /// (default 0.5); the others reject one.
    pub fn parse(tag: &str, weight: Option<f64>) -> Result<Self> {
        let w = || weight.map_or(Ok(Weight::default()), Weight::new);
        let single = |s: Strategy| match weight {
            Some(_) => Err(Error::InvalidArgument(format!("{tag} takes no weight"))),
            None => Ok(s),
        };
        match tag {
            "audio_to_audio" => single(Strategy::AudioToAudio),
            "audio_to_text" => single(Strategy::AudioToText),
            "audio_to_mixture" => single(Strategy::AudioToMixture),
            "pair_to_pair" => Ok(Strategy::PairToPair(w()?)),
            "generative_pair_to_pair" => Ok(Strategy::GenerativePairToPair(w()?)),
            other => Err(Error::InvalidArgument(format!("unknown strategy {other:?}"))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Strategy::AudioToAudio => Self::TAGS[0],
            Strategy::AudioToText => Self::TAGS[1],
            Strategy::AudioToMixture => Self::TAGS[2],
            Strategy::PairToPair(_) => Self::TAGS[3],
            Strategy::GenerativePairToPair(_) => Self::TAGS[4],
        }
    }

    pub fn weight(&self) -> Option<Weight> {
        match self {
            Strategy::PairToPair(w) | Strategy::GenerativePairToPair(w) => Some(*w),
            _ => None,
        }
    }

    pub fn is_pair(&self) -> bool {
        self.weight().is_some()
    }

    pub fn is_cross_modal(&self) -> bool {
        matches!(self, Strategy::AudioToText | Strategy::AudioToMixture)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.weight() {
            Some(w) => write!(f, "{}(W={})", self.tag(), w.value()),
            None => f.write_str(self.tag()),
        }
    }
}

/// Query side: the audio embedding plus an optional text embedding, caption and reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub audio: Embedding,
    #[serde(default)]
    pub text: Option<Embedding>,
    #[serde(default)]
    pub text_query: Option<String>,
    #[serde(default)]
    pub audio_ref: Option<String>,
}

impl RetrievalQuery {
    pub fn audio(audio: Embedding) -> Self {
        Self {
            audio,
            text: None,
            text_query: None,
            audio_ref: None,
        }
    }

    pub fn pair(audio: Embedding, text: Embedding) -> Self {
        Self {
            text: Some(text),
            ..Self::audio(audio)
        }
    }

    /// Uses an entry's own embeddings as the query.
    pub fn from_entry(entry: &PairEntry) -> Self {
        Self {
            audio: entry.audio.clone(),
            text: Some(entry.text.clone()),
            text_query: Some(entry.caption.clone()),
            audio_ref: Some(entry.audio_uri.clone()),
        }
    }
}

/// A retrieved entry with its component and fused scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub entry_id: EntryId,
    pub s_audio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_text: Option<f64>,
    pub s_fused: f64,
}

fn check_audio(q: &RetrievalQuery, entry: &PairEntry) -> Result<()> {
    q.audio.ensure_dim(entry.audio.dim())
}

fn check_cross(q: &RetrievalQuery, entry: &PairEntry) -> Result<()> {
    if entry.audio.dim() != entry.text.dim() {
        return Err(Error::SharedSpaceRequired {
            d_audio: entry.audio.dim(),
            d_text: entry.text.dim(),
        });
    }
    check_audio(q, entry)
}

fn query_text<'q>(q: &'q RetrievalQuery, entry: &PairEntry) -> Result<&'q [f32]> {
    let t = q.text.as_ref().ok_or(Error::MissingTextQuery)?;
    t.ensure_dim(entry.text.dim())?;
    Ok(t.as_slice())
}

pub fn score_audio_to_audio(q: &RetrievalQuery, entry: &PairEntry) -> Result<ScoredHit> {
    check_audio(q, entry)?;
    let s = dot_slices(q.audio.as_slice(), entry.audio.as_slice());
    Ok(ScoredHit {
        entry_id: entry.id,
        s_audio: s,
        s_text: None,
        s_fused: s,
    })
}

/// Cross-modal: `s_text` carries ⟨a_q, t_k⟩.
pub fn score_audio_to_text(q: &RetrievalQuery, entry: &PairEntry) -> Result<ScoredHit> {
    check_cross(q, entry)?;
    let s_audio = dot_slices(q.audio.as_slice(), entry.audio.as_slice());
    let s_text = dot_slices(q.audio.as_slice(), entry.text.as_slice());
    Ok(ScoredHit {
        entry_id: entry.id,
        s_audio,
        s_text: Some(s_text),
        s_fused: s_text,
    })
}

/// Mean of the audio-audio and audio-text inner products.
pub fn score_audio_to_mixture(q: &RetrievalQuery, entry: &PairEntry) -> Result<ScoredHit> {
    check_cross(q, entry)?;
    let s_audio = dot_slices(q.audio.as_slice(), entry.audio.as_slice());
    let s_text = dot_slices(q.audio.as_slice(), entry.text.as_slice());
    Ok(ScoredHit {
        entry_id: entry.id,
        s_audio,
        s_text: Some(s_text),
        s_fused: 0.5 * s_audio + 0.5 * s_text,
    })
}

/// `W·S_A + (1 − W)·S_T`. Compares audio with audio and text with text only,
/// so `d_A` and `d_T` may differ.
pub fn score_pair_to_pair(q: &RetrievalQuery, entry: &PairEntry, w: Weight) -> Result<ScoredHit> {
    check_audio(q, entry)?;
    let t = query_text(q, entry)?;
    let s_audio = dot_slices(q.audio.as_slice(), entry.audio.as_slice());
    let s_text = dot_slices(t, entry.text.as_slice());
    let w = w.value();
    Ok(ScoredHit {
        entry_id: entry.id,
        s_audio,
        s_text: Some(s_text),
        s_fused: w * s_audio + (1.0 - w) * s_text,
    })
}

pub fn score(strategy: Strategy, q: &RetrievalQuery, entry: &PairEntry) -> Result<ScoredHit> {
    match strategy {
        Strategy::AudioToAudio => score_audio_to_audio(q, entry),
        Strategy::AudioToText => score_audio_to_text(q, entry),
        Strategy::AudioToMixture => score_audio_to_mixture(q, entry),
        Strategy::PairToPair(w) | Strategy::GenerativePairToPair(w) => {
            score_pair_to_pair(q, entry, w)
        }
    }
}

fn by_fused(a: &ScoredHit, b: &ScoredHit) -> std::cmp::Ordering {
    rank_order(a.s_fused, a.entry_id, b.s_fused, b.entry_id)
}

/// Retrieval over one knowledge base with per-modality indexes.
///
/// Single-field strategies search one index. Fused strategies scan every entry
/// while the knowledge base holds at most `exact_threshold` entries; above it they
/// fetch `overfetch · k` candidates per modality, re-score the union exactly, and
/// widen the fetch until the k-th fused score beats the best score any unfetched
/// entry could reach. With flat indexes the result equals the full scan.
#[derive(Debug, Clone)]
pub struct Retriever {
    kb: Arc<KnowledgeBase>,
    audio: VectorIndex,
    text: VectorIndex,
    exact_threshold: usize,
    overfetch: usize,
}

impl Retriever {
    /// Builds flat audio and text indexes.
    pub fn new(kb: Arc<KnowledgeBase>) -> Result<Self> {
        let audio = build_flat(&kb, Field::Audio)?;
        let text = build_flat(&kb, Field::Text)?;
        Self::with_indexes(kb, audio, text)
    }

    pub fn with_indexes(
        kb: Arc<KnowledgeBase>,
        audio: VectorIndex,
        text: VectorIndex,
    ) -> Result<Self> {
        if audio.field() != Field::Audio || text.field() != Field::Text {
            return Err(Error::InvalidArgument(
                "expected an audio index and a text index".into(),
            ));
        }
        if audio.len() != kb.len() || text.len() != kb.len() {
            return Err(Error::InvalidArgument(
                "index size differs from knowledge base".into(),
            ));
        }
        Ok(Self {
            kb,
            audio,
            text,
            exact_threshold: DEFAULT_EXACT_THRESHOLD,
            overfetch: DEFAULT_OVERFETCH,
        })
    }

    pub fn with_exact_threshold(mut self, n: usize) -> Self {
        self.exact_threshold = n;
        self
    }

    pub fn with_overfetch(mut self, factor: usize) -> Self {
        self.overfetch = factor.max(1);
        self
    }

    pub fn kb(&self) -> &Arc<KnowledgeBase> {
        &self.kb
    }

    fn entry(&self, id: EntryId) -> &PairEntry {
        self.kb.get(id).expect("index ids come from the knowledge base")
    }

    fn validate(&self, strategy: Strategy, q: &RetrievalQuery) -> Result<()> {
        let schema = self.kb.schema();
        if strategy.is_cross_modal() {
            schema.require_shared_space()?;
        }
        q.audio.ensure_dim(schema.d_audio)?;
        if strategy.is_pair() {
            q.text
                .as_ref()
                .ok_or(Error::MissingTextQuery)?
                .ensure_dim(schema.d_text)?;
        }
        Ok(())
    }

    /// Top-`k` entries by fused score, descending, ties by ascending id.
    pub fn retrieve(
        &self,
        strategy: Strategy,
        q: &RetrievalQuery,
        k: usize,
        exclude: Option<&HashSet<EntryId>>,
    ) -> Result<Vec<ScoredHit>> {
        if k == 0 {
            return Err(Error::InvalidK);
        }
        self.validate(strategy, q)?;
        let single = |index: &VectorIndex| -> Result<Vec<ScoredHit>> {
            index
                .search_topk(q.audio.as_slice(), k, exclude)?
                .hits
                .iter()
                .map(|h| score(strategy, q, self.entry(h.id)))
                .collect()
        };
        match strategy {
            Strategy::AudioToAudio => single(&self.audio),
            Strategy::AudioToText => single(&self.text),
            Strategy::AudioToMixture => self.fused(strategy, q, (0.5, 0.5), q.audio.as_slice(), k, exclude),
            Strategy::PairToPair(w) | Strategy::GenerativePairToPair(w) => {
                let t = q.text.as_ref().expect("validated").as_slice();
                self.fused(strategy, q, (w.value(), 1.0 - w.value()), t, k, exclude)
            }
        }
    }

    /// Exact ranking by scoring every entry.
    pub fn full_scan(
        &self,
        strategy: Strategy,
        q: &RetrievalQuery,
        k: usize,
        exclude: Option<&HashSet<EntryId>>,
    ) -> Result<Vec<ScoredHit>> {
        if k == 0 {
            return Err(Error::InvalidK);
        }
        self.validate(strategy, q)?;
        let scored = self
            .kb
            .entries()
            .iter()
            .filter(|e| exclude.is_none_or(|ex| !ex.contains(&e.id)))
            .map(|e| score(strategy, q, e))
            .collect::<Result<Vec<_>>>()?;
        Ok(top_k_by(scored, k, by_fused))
    }

    fn fused(
        &self,
        strategy: Strategy,
        q: &RetrievalQuery,
        (w_audio, w_text): (f64, f64),
        text_side_query: &[f32],
        k: usize,
        exclude: Option<&HashSet<EntryId>>,
    ) -> Result<Vec<ScoredHit>> {
        let n = self.kb.len();
        if n <= self.exact_threshold {
            return self.full_scan(strategy, q, k, exclude);
        }
        let exact = self.audio.is_exact() && self.text.is_exact();
        let mut fetch = self.overfetch.saturating_mul(k).min(n);
        loop {
            let a = self.audio.search_topk(q.audio.as_slice(), fetch, exclude)?;
            let t = self.text.search_topk(text_side_query, fetch, exclude)?;
            let ids: BTreeSet<EntryId> = a.hits.iter().chain(&t.hits).map(|h| h.id).collect();
            let scored = ids
                .into_iter()
                .map(|id| score(strategy, q, self.entry(id)))
                .collect::<Result<Vec<_>>>()?;
            let top = top_k_by(scored, k, by_fused);
            // A short list means every admissible entry was fetched.
            let complete = a.len() < fetch || t.len() < fetch || fetch >= n;
            if !exact || complete {
                return Ok(top);
            }
            // Any unfetched entry scores at most this on both modalities.
            let bound = w_audio * a.hits[fetch - 1].score + w_text * t.hits[fetch - 1].score;
            if top.len() == k && top[k - 1].s_fused > bound + 1e-12 {
                return Ok(top);
            }
            fetch = fetch.saturating_mul(2).min(n);
        }
    }
}

/// Caption produced for the query plus the hits it led to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeResult {
    pub text_query: String,
    pub hits: Vec<ScoredHit>,
}

/// Captions the query audio, encodes the caption as the text query, and runs
/// pair-to-pair retrieval with it.
#[allow(clippy::too_many_arguments)]
pub fn generative_retrieve(
    retriever: &Retriever,
    audio: &Embedding,
    audio_ref: &str,
    captioner: &dyn CaptionProvider,
    text_encoder: &dyn EncoderProvider,
    w: Weight,
    k: usize,
    exclude: Option<&HashSet<EntryId>>,
) -> Result<GenerativeResult> {
    let caption = captioner
        .caption(audio_ref)
        .map_err(|e| Error::CaptionFailed(Box::new(e)))?;
    let text = text_encoder
        .encode(EncodeInput::Text(&caption))
        .map_err(|e| Error::EncodeFailed(Box::new(e)))?;
    let q = RetrievalQuery {
        audio: audio.clone(),
        text: Some(text),
        text_query: Some(caption.clone()),
        audio_ref: Some(audio_ref.to_string()),
    };
    let hits = retriever.retrieve(Strategy::GenerativePairToPair(w), &q, k, exclude)?;
    Ok(GenerativeResult {
        text_query: caption,
        hits,
    })
}
