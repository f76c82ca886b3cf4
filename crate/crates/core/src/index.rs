//! Exact flat and clustered (IVF-flat) inner-product indexes over one field
//! of a knowledge base.
//!
//! On-disk layout (`PKIX`, little-endian):
//!
//! ```text
//! magic "PKIX" | u16 version | u8 field | u8 kind | u32 dim | u64 count
//! [clustered: u32 n_clusters | u32 n_probe]
//! count × u64 id
//! count × dim × f32 vectors
//! [clustered: n_clusters × dim × f32 centroids,
//!             n_clusters × (u64 len, len × u32 row)]
//! ```

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot_slices, norm};
use crate::error::{Error, Result};
use crate::kb::{EntryId, KnowledgeBase, PairEntry, Schema};

pub const INDEX_MAGIC: &[u8; 4] = b"PKIX";
pub const INDEX_VERSION: u16 = 1;

/// k-means iteration cap.
pub const KMEANS_MAX_ITERS: usize = 25;

/// Which embedding of each entry an index covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Audio,
    Text,
    /// `[audio ; text]`.
    PairConcat,
}

impl Field {
    pub fn dim(self, schema: Schema) -> usize {
        match self {
            Field::Audio => schema.d_audio,
            Field::Text => schema.d_text,
            Field::PairConcat => schema.d_audio + schema.d_text,
        }
    }

    pub fn extend_from(self, entry: &PairEntry, out: &mut Vec<f32>) {
        match self {
            Field::Audio => out.extend_from_slice(entry.audio.as_slice()),
            Field::Text => out.extend_from_slice(entry.text.as_slice()),
            Field::PairConcat => {
                out.extend_from_slice(entry.audio.as_slice());
                out.extend_from_slice(entry.text.as_slice());
            }
        }
    }

    fn tag(self) -> u8 {
        match self {
            Field::Audio => 0,
            Field::Text => 1,
            Field::PairConcat => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Field::Audio),
            1 => Ok(Field::Text),
            2 => Ok(Field::PairConcat),
            t => Err(Error::Corrupt(format!("unknown field tag {t}"))),
        }
    }
}

impl std::str::FromStr for Field {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Field::Audio),
            "text" => Ok(Field::Text),
            "pair_concat" | "pair" => Ok(Field::PairConcat),
            other => Err(Error::InvalidArgument(format!("unknown field {other:?}"))),
        }
    }
}

impl std::fmt::Display for Field {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Field::Audio => "audio",
            Field::Text => "text",
            Field::PairConcat => "pair_concat",
        })
    }
}

/// A scored entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: EntryId,
    pub score: f64,
}

/// Score descending, then id ascending.
#[inline]
pub fn rank_order(a_score: f64, a_id: EntryId, b_score: f64, b_id: EntryId) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then(a_id.cmp(&b_id))
}

/// Keeps the best `k` items of `items` under `cmp` and sorts them.
pub(crate) fn top_k_by<T>(mut items: Vec<T>, k: usize, cmp: impl Fn(&T, &T) -> Ordering) -> Vec<T> {
    if items.len() > k {
        if k == 0 {
            return Vec::new();
        }
        items.select_nth_unstable_by(k - 1, &cmp);
        items.truncate(k);
    }
    items.sort_by(cmp);
    items
}

/// Up to `k` hits in rank order without duplicate ids.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TopKResult {
    pub hits: Vec<Hit>,
}

impl TopKResult {
    pub fn from_unsorted(hits: Vec<Hit>, k: usize) -> Self {
        Self {
            hits: top_k_by(hits, k, |a, b| rank_order(a.score, a.id, b.score, b.id)),
        }
    }

    pub fn ids(&self) -> Vec<EntryId> {
        self.hits.iter().map(|h| h.id).collect()
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexKind {
    Flat,
    Clustered { n_clusters: usize, n_probe: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct Clusters {
    /// Unit-length centroids, row-major.
    centroids: Vec<f32>,
    /// Row indices (into `ids`) per cluster.
    postings: Vec<Vec<u32>>,
    n_probe: usize,
}

/// Immutable inner-product index.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    field: Field,
    dim: usize,
    ids: Vec<EntryId>,
    vectors: Vec<f32>,
    clusters: Option<Clusters>,
}

fn gather(kb: &KnowledgeBase, field: Field) -> Result<(usize, Vec<EntryId>, Vec<f32>)> {
    if kb.is_empty() {
        return Err(Error::EmptyKb);
    }
    let dim = field.dim(kb.schema());
    let mut vectors = Vec::with_capacity(dim * kb.len());
    for e in kb.entries() {
        field.extend_from(e, &mut vectors);
    }
    Ok((dim, kb.ids().collect(), vectors))
}

pub fn build_flat(kb: &KnowledgeBase, field: Field) -> Result<VectorIndex> {
    let (dim, ids, vectors) = gather(kb, field)?;
    Ok(VectorIndex {
        field,
        dim,
        ids,
        vectors,
        clusters: None,
    })
}

/// Builds an IVF-flat index. `n_probe` defaults to `n_clusters / 4` (at least 1)
/// and can be overridden per search.
pub fn build_clustered(
    kb: &KnowledgeBase,
    field: Field,
    n_clusters: usize,
    seed: u64,
) -> Result<VectorIndex> {
    let (dim, ids, vectors) = gather(kb, field)?;
    let n = ids.len();
    if n_clusters == 0 || n_clusters > n {
        return Err(Error::BadClusterCount { n_clusters, n });
    }
    let (centroids, assignment) = spherical_kmeans(&vectors, dim, n_clusters, seed);
    let mut postings = vec![Vec::new(); n_clusters];
    for (row, &c) in assignment.iter().enumerate() {
        postings[c].push(row as u32);
    }
    Ok(VectorIndex {
        field,
        dim,
        ids,
        vectors,
        clusters: Some(Clusters {
            centroids,
            postings,
            n_probe: (n_clusters / 4).max(1),
        }),
    })
}

fn nearest_centroid(v: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (c, cent) in centroids.chunks_exact(dim).enumerate() {
        let s = dot_slices(v, cent);
        if s > best.1 {
            best = (c, s);
        }
    }
    best
}

fn assign(vectors: &[f32], dim: usize, centroids: &[f32]) -> Vec<(usize, f64)> {
    vectors
        .par_chunks_exact(dim)
        .map(|v| nearest_centroid(v, centroids, dim))
        .collect()
}

/// Seeded k-means on the unit sphere: centroids are renormalized means and
/// assignment maximizes inner product. Empty clusters steal the worst-fitting
/// member of the largest cluster.
fn spherical_kmeans(vectors: &[f32], dim: usize, k: usize, seed: u64) -> (Vec<f32>, Vec<usize>) {
    let n = vectors.len() / dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, n, k).into_vec();
    picks.sort_unstable();
    let mut centroids = Vec::with_capacity(k * dim);
    for &p in &picks {
        centroids.extend(unit_or_zero(&vectors[p * dim..(p + 1) * dim]));
    }
    let mut assignment: Vec<usize> = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let assigned = assign(vectors, dim, &centroids);
        let mut next: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (row, &c) in next.iter().enumerate() {
            counts[c] += 1;
            let v = &vectors[row * dim..(row + 1) * dim];
            for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(v) {
                *s += x as f64;
            }
        }
        for c in 0..k {
            let sum = &sums[c * dim..(c + 1) * dim];
            let len = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
            if counts[c] == 0 || len == 0.0 {
                let Some(row) = reseed_row(&next, &assigned, &counts) else {
                    continue;
                };
                counts[next[row]] -= 1;
                counts[c] += 1;
                next[row] = c;
                centroids[c * dim..(c + 1) * dim]
                    .copy_from_slice(&unit_or_zero(&vectors[row * dim..(row + 1) * dim]));
            } else {
                for (dst, &s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(sum) {
                    *dst = (s / len) as f32;
                }
            }
        }
        if next == assignment {
            break;
        }
        assignment = next;
    }
    let final_assignment = assign(vectors, dim, &centroids)
        .into_iter()
        .map(|a| a.0)
        .collect();
    (centroids, final_assignment)
}

/// Member of the largest cluster (by count, ties to lowest cluster index) with the
/// lowest similarity to its centroid, ties to lowest row.
fn reseed_row(assignment: &[usize], assigned: &[(usize, f64)], counts: &[usize]) -> Option<usize> {
    let (largest, &size) = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    if size < 2 {
        return None;
    }
    assignment
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == largest)
        .min_by(|a, b| {
            assigned[a.0]
                .1
                .partial_cmp(&assigned[b.0].1)
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
        })
        .map(|(row, _)| row)
}

fn unit_or_zero(v: &[f32]) -> Vec<f32> {
    let n = norm(v);
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|&x| (x as f64 / n) as f32).collect()
    }
}

impl VectorIndex {
    pub fn field(&self) -> Field {
        self.field
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn kind(&self) -> IndexKind {
        match &self.clusters {
            None => IndexKind::Flat,
            Some(c) => IndexKind::Clustered {
                n_clusters: c.postings.len(),
                n_probe: c.n_probe,
            },
        }
    }

    pub fn is_exact(&self) -> bool {
        match &self.clusters {
            None => true,
            Some(c) => c.n_probe == c.postings.len(),
        }
    }

    /// Cluster membership as entry ids; `None` for flat indexes.
    pub fn posting_lists(&self) -> Option<Vec<Vec<EntryId>>> {
        self.clusters.as_ref().map(|c| {
            c.postings
                .iter()
                .map(|p| p.iter().map(|&r| self.ids[r as usize]).collect())
                .collect()
        })
    }

    /// Sets the default probe count of a clustered index.
    pub fn with_n_probe(mut self, n_probe: usize) -> Result<Self> {
        if let Some(c) = &mut self.clusters {
            let n_clusters = c.postings.len();
            if n_probe == 0 || n_probe > n_clusters {
                return Err(Error::BadProbeCount {
                    n_probe,
                    n_clusters,
                });
            }
            c.n_probe = n_probe;
        }
        Ok(self)
    }

    fn row(&self, r: usize) -> &[f32] {
        &self.vectors[r * self.dim..(r + 1) * self.dim]
    }

    /// Top-`k` entries by inner product with `query`, skipping `exclude`.
    /// `k` larger than the index is clipped.
    pub fn search_topk(
        &self,
        query: &[f32],
        k: usize,
        exclude: Option<&HashSet<EntryId>>,
    ) -> Result<TopKResult> {
        let n_probe = self.clusters.as_ref().map_or(0, |c| c.n_probe);
        self.search_with_probe(query, k, n_probe, exclude)
    }

    /// As [`search_topk`](Self::search_topk) with an explicit probe count
    /// (ignored by flat indexes).
    pub fn search_with_probe(
        &self,
        query: &[f32],
        k: usize,
        n_probe: usize,
        exclude: Option<&HashSet<EntryId>>,
    ) -> Result<TopKResult> {
        if query.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        if k == 0 {
            return Err(Error::InvalidK);
        }
        let keep = |r: usize| exclude.is_none_or(|ex| !ex.contains(&self.ids[r]));
        let score = |r: usize| Hit {
            id: self.ids[r],
            score: dot_slices(query, self.row(r)),
        };
        let hits: Vec<Hit> = match &self.clusters {
            None => (0..self.ids.len()).filter(|&r| keep(r)).map(score).collect(),
            Some(c) => {
                let n_clusters = c.postings.len();
                if n_probe == 0 || n_probe > n_clusters {
                    return Err(Error::BadProbeCount {
                        n_probe,
                        n_clusters,
                    });
                }
                let probes: Vec<usize> = if n_probe == n_clusters {
                    (0..n_clusters).collect()
                } else {
                    let cents: Vec<Hit> = c
                        .centroids
                        .chunks_exact(self.dim)
                        .enumerate()
                        .map(|(i, cent)| Hit {
                            id: i as u64,
                            score: dot_slices(query, cent),
                        })
                        .collect();
                    TopKResult::from_unsorted(cents, n_probe)
                        .hits
                        .iter()
                        .map(|h| h.id as usize)
                        .collect()
                };
                probes
                    .iter()
                    .flat_map(|&p| c.postings[p].iter().map(|&r| r as usize))
                    .filter(|&r| keep(r))
                    .map(score)
                    .collect()
            }
        };
        Ok(TopKResult::from_unsorted(hits, k))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.push(self.field.tag());
        out.push(u8::from(self.clusters.is_some()));
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        if let Some(c) = &self.clusters {
            out.extend_from_slice(&(c.postings.len() as u32).to_le_bytes());
            out.extend_from_slice(&(c.n_probe as u32).to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(c) = &self.clusters {
            for v in &c.centroids {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for p in &c.postings {
                out.extend_from_slice(&(p.len() as u64).to_le_bytes());
                for r in p {
                    out.extend_from_slice(&r.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != INDEX_MAGIC {
            return Err(Error::BadMagic { expected: "PKIX" });
        }
        let mut r = Cursor { bytes, pos: 4 };
        let version = r.u16()?;
        if version != INDEX_VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        let field = Field::from_tag(r.u8()?)?;
        let clustered = match r.u8()? {
            0 => false,
            1 => true,
            k => return Err(Error::Corrupt(format!("unknown index kind {k}"))),
        };
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        if dim == 0 {
            return Err(Error::Corrupt("zero dimension".into()));
        }
        let (n_clusters, n_probe) = if clustered {
            (r.u32()? as usize, r.u32()? as usize)
        } else {
            (0, 0)
        };
        // Refuse counts the remaining bytes cannot possibly hold before allocating.
        let min_payload = count
            .checked_mul(8 + 4 * dim as u64)
            .ok_or_else(|| Error::TruncatedFile("count overflows".into()))?;
        if min_payload > r.remaining() as u64 {
            return Err(Error::TruncatedFile(format!(
                "{count} vectors need {min_payload} bytes"
            )));
        }
        let count = count as usize;
        let ids: Vec<EntryId> = (0..count).map(|_| r.u64()).collect::<Result<_>>()?;
        let vectors = r.f32s(count * dim)?;
        let mut seen = HashSet::with_capacity(count);
        if !ids.iter().all(|id| seen.insert(*id)) {
            return Err(Error::Corrupt("duplicate ids".into()));
        }
        let clusters = if clustered {
            if n_clusters == 0 || n_clusters > count || n_probe == 0 || n_probe > n_clusters {
                return Err(Error::Corrupt(format!(
                    "bad cluster parameters ({n_clusters}, {n_probe}) for {count} entries"
                )));
            }
            let centroid_len = n_clusters
                .checked_mul(dim)
                .ok_or_else(|| Error::Corrupt("centroid table overflows".into()))?;
            let centroids = r.f32s(centroid_len)?;
            let mut assigned = vec![false; count];
            let mut postings = Vec::with_capacity(n_clusters);
            for _ in 0..n_clusters {
                let len = r.u64()?;
                if len > count as u64 {
                    return Err(Error::Corrupt("posting list longer than index".into()));
                }
                let mut list = Vec::with_capacity(len as usize);
                for _ in 0..len {
                    let row = r.u32()?;
                    let slot = assigned
                        .get_mut(row as usize)
                        .ok_or_else(|| Error::Corrupt(format!("row {row} out of range")))?;
                    if std::mem::replace(slot, true) {
                        return Err(Error::Corrupt(format!("row {row} in two postings")));
                    }
                    list.push(row);
                }
                postings.push(list);
            }
            if !assigned.iter().all(|&a| a) {
                return Err(Error::Corrupt("unassigned rows".into()));
            }
            Some(Clusters {
                centroids,
                postings,
                n_probe,
            })
        } else {
            None
        };
        if r.remaining() != 0 {
            return Err(Error::Corrupt(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            field,
            dim,
            ids,
            vectors,
            clusters,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::TruncatedFile(format!(
                "need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::TruncatedFile("length overflows".into()))?;
        let raw = self.take(len)?;
        let out: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(out)
    }
}

pub fn save_index(index: &VectorIndex, path: &Path) -> Result<()> {
    fs::write(path, index.to_bytes())?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<VectorIndex> {
    VectorIndex::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::{random_kb, toy_kb};

    fn hits(v: &[(u64, f64)]) -> Vec<(u64, f64)> {
        v.to_vec()
    }

    fn as_pairs(r: &TopKResult) -> Vec<(u64, f64)> {
        r.hits.iter().map(|h| (h.id, h.score)).collect()
    }

    fn close(a: &[(u64, f64)], b: &[(u64, f64)]) -> bool {
        a.len() == b.len()
            && a.iter()
                .zip(b)
                .all(|(x, y)| x.0 == y.0 && (x.1 - y.1).abs() <= 1e-6)
    }

    #[test]
    fn flat_build_examples() {
        let kb = toy_kb();
        assert_eq!(build_flat(&kb, Field::Audio).unwrap().len(), 3);
        let pair = build_flat(&kb, Field::PairConcat).unwrap();
        assert_eq!(pair.dim(), 4);
        let empty = KnowledgeBase::empty("e", Schema::new(2, 2));
        assert!(matches!(build_flat(&empty, Field::Audio), Err(Error::EmptyKb)));
    }

    #[test]
    fn toy_search_examples() {
        let idx = build_flat(&toy_kb(), Field::Audio).unwrap();
        let r = idx.search_topk(&[1.0, 0.0], 2, None).unwrap();
        assert!(close(&as_pairs(&r), &hits(&[(1, 1.0), (3, 0.8)])));
        let ex: HashSet<u64> = [1].into();
        let r = idx.search_topk(&[1.0, 0.0], 2, Some(&ex)).unwrap();
        assert!(close(&as_pairs(&r), &hits(&[(3, 0.8), (2, 0.0)])));
        assert_eq!(idx.search_topk(&[1.0, 0.0], 10, None).unwrap().len(), 3);
        assert!(matches!(
            idx.search_topk(&[1.0, 0.0, 0.0], 1, None),
            Err(Error::DimMismatch { .. })
        ));
        assert!(matches!(
            idx.search_topk(&[1.0, 0.0], 0, None),
            Err(Error::InvalidK)
        ));
    }

    #[test]
    fn ties_break_by_id() {
        let idx = build_flat(&toy_kb(), Field::Audio).unwrap();
        // a zero query scores every entry 0.0
        let r = idx.search_topk(&[0.0, 0.0], 3, None).unwrap();
        assert_eq!(r.ids(), vec![1, 2, 3]);
    }

    #[test]
    fn clustered_examples() {
        let kb = toy_kb();
        let idx = build_clustered(&kb, Field::Audio, 1, 0).unwrap();
        let mut lists = idx.posting_lists().unwrap();
        lists[0].sort();
        assert_eq!(lists, vec![vec![1, 2, 3]]);
        assert!(matches!(
            build_clustered(&kb, Field::Audio, 0, 0),
            Err(Error::BadClusterCount { .. })
        ));
        assert!(matches!(
            build_clustered(&kb, Field::Audio, 4, 0),
            Err(Error::BadClusterCount { .. })
        ));

        let big = random_kb(1000, 16, 16, 5);
        let idx = build_clustered(&big, Field::Audio, 16, 9).unwrap();
        let lists = idx.posting_lists().unwrap();
        assert_eq!(lists.iter().map(Vec::len).sum::<usize>(), 1000);
        let mut all: Vec<u64> = lists.concat();
        all.sort();
        assert_eq!(all, (1..=1000).collect::<Vec<_>>());
    }

    #[test]
    fn probe_count_validated() {
        let idx = build_clustered(&random_kb(50, 4, 4, 1), Field::Audio, 5, 0).unwrap();
        assert!(idx.clone().with_n_probe(0).is_err());
        assert!(idx.clone().with_n_probe(6).is_err());
        assert!(idx.with_n_probe(5).unwrap().is_exact());
    }

    #[test]
    fn search_is_pure() {
        let kb = random_kb(300, 8, 8, 2);
        let idx = build_clustered(&kb, Field::Text, 8, 3).unwrap();
        let q = kb.entries()[7].audio.as_slice();
        let a = idx.search_topk(q, 10, None).unwrap();
        let b = idx.search_topk(q, 10, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn round_trips() {
        let kb = toy_kb();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.pkix");
        let flat = build_flat(&kb, Field::Audio).unwrap();
        save_index(&flat, &path).unwrap();
        let back = load_index(&path).unwrap();
        assert_eq!(
            back.search_topk(&[1.0, 0.0], 3, None).unwrap(),
            flat.search_topk(&[1.0, 0.0], 3, None).unwrap()
        );

        let big = random_kb(200, 8, 8, 4);
        let clustered = build_clustered(&big, Field::PairConcat, 7, 1).unwrap();
        save_index(&clustered, &path).unwrap();
        let back = load_index(&path).unwrap();
        assert_eq!(back.posting_lists(), clustered.posting_lists());
        assert_eq!(back, clustered);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = build_flat(&toy_kb(), Field::Audio).unwrap().to_bytes();
        bytes[1] = b'?';
        assert!(matches!(
            VectorIndex::from_bytes(&bytes),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn truncation_is_typed() {
        let bytes = build_clustered(&random_kb(40, 4, 4, 0), Field::Audio, 4, 0)
            .unwrap()
            .to_bytes();
        for cut in 0..bytes.len() {
            assert!(VectorIndex::from_bytes(&bytes[..cut]).is_err());
        }
    }
}
