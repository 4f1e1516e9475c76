//! Knowledge-graph question answering at desk scale: k-hop subgraph
//! retrieval, question-conditioned edge re-scoring, an edge-score-scaled
//! graph attention encoder, and a small transformer classifier whose upper
//! feed-forward layers consume per-layer graph representations as extra
//! key-value memory slots.

pub mod diffcore;
pub mod gnn;
pub mod harness;
pub mod kgstore;
pub mod knowformer;
pub mod rescoring;
pub mod retrieval;
pub mod trainer;

pub use kgstore::{EntityId, KnowledgeGraph, RelationId, Triple};
pub use retrieval::{Subgraph, TopicEntities};
