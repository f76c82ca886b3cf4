//! Paired audio-text knowledge bases and retrieval over them.
//!
//! Every entry carries a unit audio embedding and a unit caption embedding.
//! Retrieval scores entries against a query by audio, by text, or by a
//! weighted sum of both; the rest of the crate builds on that: refining a
//! knowledge base to the neighbours of a training set, fusing generated
//! captions into cross-modal ranking, assembling in-context demonstrations,
//! and evaluating all of the above.

pub mod context;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod fusion;
pub mod index;
pub mod kb;
pub mod providers;
pub mod refine;
pub mod retrieval;
pub mod store;

pub use context::{assemble_context, build_curriculum, InterleavedContext, OrderPolicy};
pub use embedding::{dot, l2_normalize, Embedding};
pub use error::{Error, Result};
pub use eval::{recall_at_k, zero_shot_accuracy, EvalQuery, GroundTruth, Metric, SweepResult};
pub use fusion::{cross_modal_rank, zero_shot_classify, CandidateText, FusionQuery};
pub use index::{build_clustered, build_flat, load_index, save_index, Field, Hit, TopKResult, VectorIndex};
pub use kb::{EntryId, KnowledgeBase, PairEntry, Schema};
pub use providers::{CaptionProvider, EncodeInput, EncoderProvider, Modality};
pub use refine::refine_kb;
pub use retrieval::{RetrievalQuery, Retriever, ScoredHit, Strategy, Weight};
pub use store::{load_embedding_store, write_store};
