//! Build false-premise question benchmarks from a knowledge graph and score
//! language models against them.
//!
//! Pipeline: [`kg_store`] loads the graph, [`editor`] corrupts true triplets
//! with six topology-based methods, [`qgen`] turns them into questions,
//! [`eval_harness`] runs the gated, three-sample evaluation protocol, and
//! [`metrics_report`] aggregates the transcripts.

pub mod chat;
pub mod editor;
pub mod eval_harness;
pub mod jsonl;
pub mod judge;
pub mod kg_store;
pub mod metrics_report;
pub mod prompts;
pub mod qgen;
pub mod seed;

pub use editor::{candidates, edit, edit_all, verify_method, EditBundle, EditError, EditMethod, FalseTriplet};
pub use kg_store::{
    extract_true_triplets, load_graph, DomainFilter, Entity, EntityId, Hop, KgError, KnowledgeGraph, LoadReport,
    Triplet, MAX_NEIGHBOR_HOPS,
};
