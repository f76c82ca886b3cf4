//! Retrieval metrics, similarity statistics and parameter sweeps.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot_slices, Embedding};
use crate::error::{Error, Result};
use crate::fixture::random_unit;
use crate::kb::{EntryId, KnowledgeBase};
use crate::retrieval::{RetrievalQuery, Retriever, ScoredHit, Strategy, Weight};

/// Query id → ranked candidate ids.
pub type Rankings = BTreeMap<u64, Vec<EntryId>>;

/// Query id → ids counted as correct.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroundTruth(pub BTreeMap<u64, BTreeSet<EntryId>>);

impl GroundTruth {
    pub fn insert(&mut self, query: u64, ids: impl IntoIterator<Item = EntryId>) {
        self.0.entry(query).or_default().extend(ids);
    }

    /// Checks that every referenced id exists in `pool`.
    pub fn validate(&self, pool: &KnowledgeBase) -> Result<()> {
        for ids in self.0.values() {
            if let Some(&missing) = ids.iter().find(|id| !pool.contains(**id)) {
                return Err(Error::UnknownEntryId(missing));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Fraction of queries whose first `k` ranked ids include a correct one.
pub fn recall_at_k(rankings: &Rankings, truth: &GroundTruth, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidK);
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("ground truth is empty".into()));
    }
    let mut found = 0usize;
    for (q, correct) in &truth.0 {
        let ranked = rankings.get(q).ok_or(Error::MissingRanking(*q))?;
        if ranked.iter().take(k).any(|id| correct.contains(id)) {
            found += 1;
        }
    }
    Ok(found as f64 / truth.len() as f64)
}

pub fn zero_shot_accuracy(
    predictions: &BTreeMap<u64, u64>,
    truth: &BTreeMap<u64, u64>,
) -> Result<f64> {
    if predictions.len() != truth.len() || predictions.keys().ne(truth.keys()) {
        return Err(Error::KeyMismatch);
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    let correct = predictions
        .iter()
        .filter(|(q, class)| truth.get(q) == Some(class))
        .count();
    Ok(correct as f64 / truth.len() as f64)
}

/// One evaluation query: what to search with, what counts as correct, and what to skip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalQuery {
    pub id: u64,
    pub audio: Embedding,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<Embedding>,
    /// Embedding of the query's reference caption, for similarity statistics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_text: Option<Embedding>,
    #[serde(default)]
    pub relevant: BTreeSet<EntryId>,
    #[serde(default)]
    pub exclude: BTreeSet<EntryId>,
}

impl EvalQuery {
    pub fn retrieval_query(&self) -> RetrievalQuery {
        RetrievalQuery {
            audio: self.audio.clone(),
            text: self.text.clone(),
            text_query: None,
            audio_ref: None,
        }
    }

    fn exclude_set(&self) -> Option<HashSet<EntryId>> {
        (!self.exclude.is_empty()).then(|| self.exclude.iter().copied().collect())
    }

    /// A knowledge-base entry queried with its own embeddings, excluding itself.
    /// Its reference caption is its own.
    pub fn from_entry(entry: &crate::kb::PairEntry) -> Self {
        Self {
            id: entry.id,
            audio: entry.audio.clone(),
            text: Some(entry.text.clone()),
            reference_text: Some(entry.text.clone()),
            relevant: BTreeSet::new(),
            exclude: [entry.id].into(),
        }
    }
}

pub fn parse_queries_jsonl(text: &str) -> Result<Vec<EvalQuery>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Perturbs both embeddings of `n` entries (chosen in id order) with independent
/// noise of equal magnitude: `q = normalize(x + noise · u)`, `u` a random unit
/// direction. Each query's only relevant id is its source entry.
pub fn noisy_self_queries(kb: &KnowledgeBase, n: usize, noise: f32, seed: u64) -> Result<Vec<EvalQuery>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perturb = |e: &Embedding| {
        let u = random_unit(&mut rng, e.dim());
        let v: Vec<f32> = e
            .as_slice()
            .iter()
            .zip(u.as_slice())
            .map(|(&x, &z)| x + noise * z)
            .collect();
        Embedding::unit(v)
    };
    kb.entries()
        .iter()
        .take(n)
        .map(|e| {
            Ok(EvalQuery {
                id: e.id,
                audio: perturb(&e.audio)?,
                text: Some(perturb(&e.text)?),
                reference_text: Some(e.text.clone()),
                relevant: [e.id].into(),
                exclude: BTreeSet::new(),
            })
        })
        .collect()
}

/// Hits per query, in query order.
pub fn run_queries(
    queries: &[EvalQuery],
    retriever: &Retriever,
    strategy: Strategy,
    k: usize,
) -> Result<Vec<Vec<ScoredHit>>> {
    queries
        .par_iter()
        .map(|q| retriever.retrieve(strategy, &q.retrieval_query(), k, q.exclude_set().as_ref()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySimilarity {
    pub query_id: u64,
    pub mean_audio_sim: f64,
    pub mean_text_sim: Option<f64>,
}

/// Pooled similarity of retrieved pairs to their queries, over all top-k hits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub strategy: String,
    pub kb: String,
    pub k: usize,
    pub n: usize,
    pub mean_audio_sim: f64,
    pub std_audio_sim: f64,
    /// Absent when no query carries a text embedding.
    pub mean_text_sim: Option<f64>,
    pub std_text_sim: Option<f64>,
    pub per_query: Vec<QuerySimilarity>,
}

fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Audio similarity is `⟨a_q, a_k⟩`; text similarity is `⟨r, t_k⟩` where `r` is the
/// query's reference caption embedding, or its text query when no reference is given.
pub fn similarity_stats(
    queries: &[EvalQuery],
    retriever: &Retriever,
    strategy: Strategy,
    k: usize,
) -> Result<SimilarityStats> {
    let results = run_queries(queries, retriever, strategy, k)?;
    let kb = retriever.kb();
    let mut audio = Vec::new();
    let mut text = Vec::new();
    let mut per_query = Vec::with_capacity(queries.len());
    for (q, hits) in queries.iter().zip(&results) {
        if hits.is_empty() {
            continue;
        }
        let reference = q.reference_text.as_ref().or(q.text.as_ref());
        let a: Vec<f64> = hits
            .iter()
            .map(|h| dot_slices(q.audio.as_slice(), kb.get(h.entry_id).unwrap().audio.as_slice()))
            .collect();
        let t: Option<Vec<f64>> = reference.map(|r| {
            hits.iter()
                .map(|h| dot_slices(r.as_slice(), kb.get(h.entry_id).unwrap().text.as_slice()))
                .collect()
        });
        per_query.push(QuerySimilarity {
            query_id: q.id,
            mean_audio_sim: mean_std(&a).unwrap().0,
            mean_text_sim: t.as_deref().and_then(mean_std).map(|m| m.0),
        });
        audio.extend(a);
        text.extend(t.unwrap_or_default());
    }
    let (mean_audio_sim, std_audio_sim) = mean_std(&audio).ok_or(Error::EmptyRetrieval)?;
    let text_stats = mean_std(&text);
    Ok(SimilarityStats {
        strategy: strategy.to_string(),
        kb: kb.name().to_string(),
        k,
        n: audio.len(),
        mean_audio_sim,
        std_audio_sim,
        mean_text_sim: text_stats.map(|s| s.0),
        std_text_sim: text_stats.map(|s| s.1),
        per_query,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// At least one relevant id among the point's top-k.
    RecallAtK,
    /// Top-1 hit is relevant.
    Accuracy,
    MeanAudioSim,
    MeanTextSim,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::RecallAtK => "recall_at_k",
            Metric::Accuracy => "accuracy",
            Metric::MeanAudioSim => "mean_audio_sim",
            Metric::MeanTextSim => "mean_text_sim",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recall" | "recall_at_k" | "recall@k" => Ok(Metric::RecallAtK),
            "accuracy" => Ok(Metric::Accuracy),
            "mean_audio_sim" => Ok(Metric::MeanAudioSim),
            "mean_text_sim" => Ok(Metric::MeanTextSim),
            other => Err(Error::InvalidArgument(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    #[serde(rename = "W")]
    Weight,
    TopK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub k: usize,
    pub w: Option<f64>,
    pub metrics: BTreeMap<String, f64>,
    /// Retrieved ids per query at this point.
    pub rankings: Rankings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub strategy: String,
    pub kb: String,
    pub seed: Option<u64>,
    pub points: Vec<SweepPoint>,
}

pub const CSV_HEADER: &str = "axis_value,metric_name,metric_value,strategy,kb,k,W,seed";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl SweepResult {
    /// One row per (point, metric), columns as in [`CSV_HEADER`].
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let seed = self.seed.map(|s| s.to_string()).unwrap_or_default();
        for p in &self.points {
            let w = p.w.map(|w| w.to_string()).unwrap_or_default();
            for (name, value) in &p.metrics {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    p.value,
                    name,
                    value,
                    csv_field(&self.strategy),
                    csv_field(&self.kb),
                    p.k,
                    w,
                    seed
                );
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn metric(&self, name: &str) -> Vec<f64> {
        self.points
            .iter()
            .filter_map(|p| p.metrics.get(name).copied())
            .collect()
    }
}

fn strictly_increasing<T: PartialOrd>(xs: &[T]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

fn point_metrics(
    queries: &[EvalQuery],
    hits: &[Vec<ScoredHit>],
    retriever: &Retriever,
    k: usize,
    metrics: &[Metric],
) -> Result<(BTreeMap<String, f64>, Rankings)> {
    let rankings: Rankings = queries
        .iter()
        .zip(hits)
        .map(|(q, h)| (q.id, h.iter().map(|h| h.entry_id).collect()))
        .collect();
    let mut truth = GroundTruth::default();
    for q in queries.iter().filter(|q| !q.relevant.is_empty()) {
        truth.insert(q.id, q.relevant.iter().copied());
    }
    let kb = retriever.kb();
    let mut out = BTreeMap::new();
    for &m in metrics {
        let value = match m {
            Metric::RecallAtK => recall_at_k(&rankings, &truth, k)?,
            Metric::Accuracy => recall_at_k(&rankings, &truth, 1)?,
            Metric::MeanAudioSim | Metric::MeanTextSim => {
                let mut xs = Vec::new();
                for (q, hs) in queries.iter().zip(hits) {
                    let reference = match m {
                        Metric::MeanAudioSim => Some(&q.audio),
                        _ => q.reference_text.as_ref().or(q.text.as_ref()),
                    };
                    let Some(r) = reference else { continue };
                    for h in hs {
                        let e = kb.get(h.entry_id).unwrap();
                        let target = if m == Metric::MeanAudioSim { &e.audio } else { &e.text };
                        xs.push(dot_slices(r.as_slice(), target.as_slice()));
                    }
                }
                mean_std(&xs).ok_or(Error::EmptyRetrieval)?.0
            }
        };
        out.insert(m.name().to_string(), value);
    }
    Ok((out, rankings))
}

/// Pair-to-pair retrieval at each `W` in `weights` (strictly increasing, within [0, 1]).
pub fn weight_sweep(
    queries: &[EvalQuery],
    retriever: &Retriever,
    weights: &[f64],
    k: usize,
    metrics: &[Metric],
) -> Result<SweepResult> {
    if !strictly_increasing(weights) {
        return Err(Error::UnsortedAxis);
    }
    let ws = weights
        .iter()
        .map(|&w| Weight::new(w))
        .collect::<Result<Vec<_>>>()?;
    let points = ws
        .iter()
        .map(|&w| {
            let hits = run_queries(queries, retriever, Strategy::PairToPair(w), k)?;
            let (metrics, rankings) = point_metrics(queries, &hits, retriever, k, metrics)?;
            Ok(SweepPoint {
                value: w.value(),
                k,
                w: Some(w.value()),
                metrics,
                rankings,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepResult {
        axis: SweepAxis::Weight,
        strategy: "pair_to_pair".into(),
        kb: retriever.kb().name().to_string(),
        seed: None,
        points,
    })
}

/// `strategy` at each `k` in `ks` (strictly increasing, positive).
pub fn topk_sweep(
    queries: &[EvalQuery],
    retriever: &Retriever,
    ks: &[usize],
    strategy: Strategy,
    metrics: &[Metric],
) -> Result<SweepResult> {
    if ks.first() == Some(&0) {
        return Err(Error::InvalidK);
    }
    if !strictly_increasing(ks) {
        return Err(Error::UnsortedAxis);
    }
    let points = ks
        .iter()
        .map(|&k| {
            let hits = run_queries(queries, retriever, strategy, k)?;
            let (metrics, rankings) = point_metrics(queries, &hits, retriever, k, metrics)?;
            Ok(SweepPoint {
                value: k as f64,
                k,
                w: strategy.weight().map(Weight::value),
                metrics,
                rankings,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepResult {
        axis: SweepAxis::TopK,
        strategy: strategy.tag().into(),
        kb: retriever.kb().name().to_string(),
        seed: None,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::toy_kb;
    use std::sync::Arc;

    fn emb(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn two_query_fixture() -> (Rankings, GroundTruth) {
        let rankings: Rankings = [(1, vec![10, 11, 12]), (2, vec![20, 21, 22])].into();
        let mut truth = GroundTruth::default();
        truth.insert(1, [10]);
        truth.insert(2, [22]);
        (rankings, truth)
    }

    #[test]
    fn recall_examples() {
        let (r, t) = two_query_fixture();
        assert_eq!(recall_at_k(&r, &t, 1).unwrap(), 0.5);
        assert_eq!(recall_at_k(&r, &t, 3).unwrap(), 1.0);
        assert!(matches!(recall_at_k(&r, &t, 0), Err(Error::InvalidK)));
        let mut t2 = t.clone();
        t2.insert(3, [1]);
        assert!(matches!(recall_at_k(&r, &t2, 1), Err(Error::MissingRanking(3))));
    }

    #[test]
    fn ground_truth_validation() {
        let mut t = GroundTruth::default();
        t.insert(1, [1, 3]);
        assert!(t.validate(&toy_kb()).is_ok());
        t.insert(2, [7]);
        assert!(matches!(t.validate(&toy_kb()), Err(Error::UnknownEntryId(7))));
    }

    #[test]
    fn accuracy_examples() {
        let truth: BTreeMap<u64, u64> = [(1, 1), (2, 2), (3, 3), (4, 4)].into();
        let pred: BTreeMap<u64, u64> = [(1, 1), (2, 2), (3, 3), (4, 1)].into();
        assert_eq!(zero_shot_accuracy(&pred, &truth).unwrap(), 0.75);
        assert_eq!(zero_shot_accuracy(&truth, &truth).unwrap(), 1.0);
        let other: BTreeMap<u64, u64> = [(5, 1), (6, 2), (7, 3), (8, 4)].into();
        assert!(matches!(zero_shot_accuracy(&other, &truth), Err(Error::KeyMismatch)));
    }

    fn toy() -> Retriever {
        Retriever::new(Arc::new(toy_kb())).unwrap()
    }

    fn toy_query() -> EvalQuery {
        EvalQuery {
            id: 1,
            audio: emb(&[1.0, 0.0]),
            text: Some(emb(&[0.0, 1.0])),
            reference_text: Some(emb(&[0.0, 1.0])),
            relevant: BTreeSet::new(),
            exclude: BTreeSet::new(),
        }
    }

    #[test]
    fn similarity_examples() {
        let r = toy();
        let s = similarity_stats(&[toy_query()], &r, Strategy::AudioToAudio, 2).unwrap();
        assert!((s.mean_audio_sim - 0.9).abs() < 1e-6);
        assert_eq!(s.n, 2);
        let s = similarity_stats(&[toy_query()], &r, Strategy::PairToPair(Weight::new(0.0).unwrap()), 1)
            .unwrap();
        assert_eq!(s.mean_text_sim, Some(1.0));
        let mut q = toy_query();
        q.exclude = [1, 2, 3].into();
        assert!(matches!(
            similarity_stats(&[q], &r, Strategy::AudioToAudio, 2),
            Err(Error::EmptyRetrieval)
        ));
    }

    #[test]
    fn self_match_saturates_audio_similarity() {
        let kb = Arc::new(crate::fixture::random_kb(100, 8, 8, 3));
        let r = Retriever::new(kb.clone()).unwrap();
        let qs: Vec<EvalQuery> = kb
            .entries()
            .iter()
            .map(|e| EvalQuery { exclude: BTreeSet::new(), ..EvalQuery::from_entry(e) })
            .collect();
        let s = similarity_stats(&qs, &r, Strategy::AudioToAudio, 1).unwrap();
        assert!((s.mean_audio_sim - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn weight_sweep_examples() {
        let r = toy();
        let s = weight_sweep(&[toy_query()], &r, &[0.0, 0.5, 1.0], 1, &[Metric::MeanAudioSim]).unwrap();
        let top1: Vec<u64> = s.points.iter().map(|p| p.rankings[&1][0]).collect();
        assert_eq!(top1, vec![2, 3, 1]);
        assert_eq!(s.to_csv().lines().count(), 4);
        let single = weight_sweep(&[toy_query()], &r, &[0.5], 1, &[Metric::MeanAudioSim]).unwrap();
        assert_eq!(single.points.len(), 1);
        assert!(matches!(
            weight_sweep(&[toy_query()], &r, &[0.5, 0.0], 1, &[]),
            Err(Error::UnsortedAxis)
        ));
        assert!(matches!(
            weight_sweep(&[toy_query()], &r, &[0.5, 1.5], 1, &[]),
            Err(Error::InvalidWeight(_))
        ));
    }

    #[test]
    fn topk_sweep_examples() {
        let r = toy();
        let mut q = toy_query();
        q.relevant = [2].into();
        let s = topk_sweep(&[q.clone()], &r, &[1, 2, 3, 10], Strategy::AudioToAudio, &[Metric::RecallAtK])
            .unwrap();
        let sizes: Vec<usize> = s.points.iter().map(|p| p.rankings[&1].len()).collect();
        assert_eq!(sizes, vec![1, 2, 3, 3]);
        let recall = s.metric("recall_at_k");
        assert!(recall.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(recall, vec![0.0, 0.0, 1.0, 1.0]);
        assert!(matches!(
            topk_sweep(&[q.clone()], &r, &[2, 1], Strategy::AudioToAudio, &[]),
            Err(Error::UnsortedAxis)
        ));
        assert!(matches!(
            topk_sweep(&[q], &r, &[0, 1], Strategy::AudioToAudio, &[]),
            Err(Error::InvalidK)
        ));
    }

    #[test]
    fn sweep_output_is_deterministic() {
        let kb = Arc::new(crate::fixture::random_kb(200, 8, 8, 5));
        let r = Retriever::new(kb.clone()).unwrap();
        let qs = noisy_self_queries(&kb, 30, 0.5, 9).unwrap();
        let a = weight_sweep(&qs, &r, &[0.1, 0.5, 0.9], 5, &[Metric::RecallAtK, Metric::MeanTextSim]).unwrap();
        let b = weight_sweep(&qs, &r, &[0.1, 0.5, 0.9], 5, &[Metric::RecallAtK, Metric::MeanTextSim]).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.to_json(), b.to_json());
        for m in a.metric("recall_at_k") {
            assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn csv_quotes_commas() {
        let s = SweepResult {
            axis: SweepAxis::TopK,
            strategy: "a,b".into(),
            kb: "kb".into(),
            seed: Some(3),
            points: vec![SweepPoint {
                value: 1.0,
                k: 1,
                w: None,
                metrics: [("accuracy".to_string(), 0.5)].into(),
                rankings: Rankings::new(),
            }],
        };
        assert_eq!(
            s.to_csv(),
            format!("{CSV_HEADER}\n1,accuracy,0.5,\"a,b\",kb,1,,3\n")
        );
    }
}
