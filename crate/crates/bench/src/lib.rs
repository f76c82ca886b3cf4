//! Shared setup for the criterion benchmarks.

use std::sync::Arc;

use pairkb_core::fixture::{gen_fixture, FixtureSpec};
use pairkb_core::{KnowledgeBase, RetrievalQuery};

pub fn corpus(n: usize, dim: usize, seed: u64) -> Arc<KnowledgeBase> {
    let spec = FixtureSpec {
        n,
        d_audio: dim,
        d_text: dim,
        seed,
        correlation: 0.8,
    };
    Arc::new(gen_fixture(&spec).expect("fixture builds"))
}

/// Every `stride`-th entry queried with its own pair.
pub fn self_queries(kb: &KnowledgeBase, stride: usize) -> Vec<RetrievalQuery> {
    kb.entries()
        .iter()
        .step_by(stride.max(1))
        .map(RetrievalQuery::from_entry)
        .collect()
}
