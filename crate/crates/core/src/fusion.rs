//! Generated-caption score fusion for cross-modal ranking and zero-shot
//! classification.
//!
//! A candidate text `T_y` (a caption, or a prompted class name) is scored as
//! `⟨a_q, t_y⟩ + ⟨g_q, t_y⟩`, where `g_q` embeds a caption generated from the
//! query audio. Both terms are raw inner products, summed without weighting
//! unless [`FusionWeights`] says otherwise.

use serde::{Deserialize, Serialize};

use crate::embedding::{dot_slices, Embedding};
use crate::error::{Error, Result};
use crate::index::{Hit, TopKResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateText {
    pub id: u64,
    pub text: String,
    pub emb: Embedding,
}

impl CandidateText {
    /// Normalizes `emb`; rejects empty text.
    pub fn new(id: u64, text: impl Into<String>, emb: Embedding) -> Result<Self> {
        let text = text.into();
        if text.is_empty() {
            return Err(Error::InvalidArgument(format!("candidate {id} has empty text")));
        }
        Ok(Self {
            id,
            text,
            emb: crate::embedding::l2_normalize(&emb)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionQuery {
    pub audio: Embedding,
    pub gen_text: Embedding,
}

/// Multipliers on the audio and generated-text terms. Both default to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub audio: f64,
    pub text: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            audio: 1.0,
            text: 1.0,
        }
    }
}

fn check(q: &FusionQuery, c: &CandidateText) -> Result<()> {
    q.audio.ensure_dim(c.emb.dim())?;
    q.gen_text.ensure_dim(c.emb.dim())
}

/// `⟨a_q, t_y⟩ + ⟨g_q, t_y⟩`.
pub fn fused_candidate_score(q: &FusionQuery, c: &CandidateText) -> Result<f64> {
    weighted_candidate_score(q, c, FusionWeights::default())
}

pub fn weighted_candidate_score(
    q: &FusionQuery,
    c: &CandidateText,
    w: FusionWeights,
) -> Result<f64> {
    check(q, c)?;
    let audio = dot_slices(q.audio.as_slice(), c.emb.as_slice());
    let text = dot_slices(q.gen_text.as_slice(), c.emb.as_slice());
    Ok(w.audio * audio + w.text * text)
}

pub fn cross_modal_rank(
    q: &FusionQuery,
    candidates: &[CandidateText],
    k: usize,
) -> Result<TopKResult> {
    cross_modal_rank_weighted(q, candidates, k, FusionWeights::default())
}

pub fn cross_modal_rank_weighted(
    q: &FusionQuery,
    candidates: &[CandidateText],
    k: usize,
    w: FusionWeights,
) -> Result<TopKResult> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if k == 0 {
        return Err(Error::InvalidK);
    }
    let hits = candidates
        .iter()
        .map(|c| {
            Ok(Hit {
                id: c.id,
                score: weighted_candidate_score(q, c, w)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TopKResult::from_unsorted(hits, k))
}

/// Highest-scoring class; ties go to the lowest id.
pub fn zero_shot_classify(q: &FusionQuery, classes: &[CandidateText]) -> Result<(u64, f64)> {
    zero_shot_classify_weighted(q, classes, FusionWeights::default())
}

pub fn zero_shot_classify_weighted(
    q: &FusionQuery,
    classes: &[CandidateText],
    w: FusionWeights,
) -> Result<(u64, f64)> {
    let top = cross_modal_rank_weighted(q, classes, 1, w)?;
    let best = top.hits[0];
    Ok((best.id, best.score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::random_unit;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn emb(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn two_classes() -> Vec<CandidateText> {
        vec![
            CandidateText::new(1, "dog", emb(&[1.0, 0.0])).unwrap(),
            CandidateText::new(2, "rain", emb(&[0.0, 1.0])).unwrap(),
        ]
    }

    fn q(a: &[f32], g: &[f32]) -> FusionQuery {
        FusionQuery {
            audio: emb(a),
            gen_text: emb(g),
        }
    }

    #[test]
    fn score_examples() {
        let c = two_classes();
        assert_eq!(fused_candidate_score(&q(&[1.0, 0.0], &[1.0, 0.0]), &c[0]).unwrap(), 2.0);
        assert_eq!(fused_candidate_score(&q(&[1.0, 0.0], &[0.0, 1.0]), &c[1]).unwrap(), 1.0);
        assert_eq!(fused_candidate_score(&q(&[1.0, 0.0], &[1.0, 0.0]), &c[1]).unwrap(), 0.0);
        assert!(matches!(
            fused_candidate_score(&q(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]), &c[1]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn rank_examples() {
        let c = two_classes();
        let r = cross_modal_rank(&q(&[1.0, 0.0], &[1.0, 0.0]), &c, 1).unwrap();
        assert_eq!(r.hits, vec![Hit { id: 1, score: 2.0 }]);
        let r = cross_modal_rank(&q(&[1.0, 0.0], &[0.0, 1.0]), &c, 2).unwrap();
        assert_eq!(r.hits, vec![Hit { id: 1, score: 1.0 }, Hit { id: 2, score: 1.0 }]);
        assert_eq!(cross_modal_rank(&q(&[1.0, 0.0], &[0.0, 1.0]), &c, 5).unwrap().len(), 2);
        assert!(matches!(
            cross_modal_rank(&q(&[1.0, 0.0], &[0.0, 1.0]), &[], 1),
            Err(Error::EmptyCandidates)
        ));
    }

    #[test]
    fn classify_examples() {
        let c = two_classes();
        assert_eq!(zero_shot_classify(&q(&[1.0, 0.0], &[1.0, 0.0]), &c).unwrap().0, 1);
        assert_eq!(zero_shot_classify(&q(&[0.0, 1.0], &[0.0, 1.0]), &c).unwrap().0, 2);
        assert_eq!(zero_shot_classify(&q(&[1.0, 0.0], &[0.0, 1.0]), &c).unwrap(), (1, 1.0));
        assert!(matches!(
            zero_shot_classify(&q(&[1.0, 0.0], &[0.0, 1.0]), &[]),
            Err(Error::EmptyCandidates)
        ));
    }

    #[test]
    fn weights_scale_terms() {
        let c = two_classes();
        let w = FusionWeights { audio: 1.0, text: 0.0 };
        assert_eq!(
            weighted_candidate_score(&q(&[1.0, 0.0], &[1.0, 0.0]), &c[0], w).unwrap(),
            1.0
        );
    }

    #[test]
    fn zero_generated_text_reduces_to_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cands: Vec<CandidateText> = (0..50)
            .map(|i| CandidateText::new(i, format!("c{i}"), random_unit(&mut rng, 8)).unwrap())
            .collect();
        let audio = random_unit(&mut rng, 8);
        let fq = FusionQuery {
            audio: audio.clone(),
            gen_text: Embedding::zeros(8).unwrap(),
        };
        let fused = cross_modal_rank(&fq, &cands, 50).unwrap();
        let base = TopKResult::from_unsorted(
            cands
                .iter()
                .map(|c| Hit {
                    id: c.id,
                    score: dot_slices(audio.as_slice(), c.emb.as_slice()),
                })
                .collect(),
            50,
        );
        assert_eq!(fused.ids(), base.ids());
    }
}
