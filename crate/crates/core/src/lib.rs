//! Visual token compression that keeps positions alive.
//!
//! Rotary position ids are sectioned across spatiotemporal axes; when similar
//! tokens merge, each section splits further into capacity-many chunks so one
//! compressed token carries the ids of several source tokens. Clustering is
//! density-peaks over embeddings, merging is the cluster mean, and a toy
//! attention harness measures what the surviving ids make visible.

pub mod attention;
pub mod cascade;
pub mod cli;
pub mod cluster;
pub mod io;
pub mod merge;
pub mod rope;
pub mod selftest;
pub mod synth;

pub use attention::{
    attention_scores, project_heatmap, AttentionConfig, AttentionMap, Heatmap, ToyBlock,
};
pub use cascade::{
    run_pipeline, run_spatiotemporal, PipelineConfig, PipelineOutcome, PipelineReport, StageKind,
    StageSpec,
};
pub use cluster::{
    assign_members, cluster_tokens, density_profile, knn_density, select_centers, temporal_cluster,
    ClusterAssignment, DensityProfile,
};
pub use merge::{
    compress_stage, ids_retained, merge_embeddings, select_topk_ids, GridExtent, SourceRecord,
    Token, TokenSet,
};
pub use rope::{
    build_frequencies, fill_mrope_ids, merge_ppe_ids, rotate, sections_gcd, ComplexEmbedding,
    FrequencyTable, IdVector, Position3D, RopeConfig,
};
pub use synth::{gen_synthetic, Pattern, SynthSpec};
