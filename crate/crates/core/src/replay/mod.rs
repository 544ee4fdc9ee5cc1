//! Replay memory: question clustering, proportional quotas and refresh.

mod kmeans;
mod memory;
mod tfidf;

pub use kmeans::{inertia, kmeans, sq_dist, Clustering, DEFAULT_MAX_ITER};
pub use memory::{curate_task_memory, per_cluster_quota, proportional_quota, read_memory, CuratedSample, MemoryBuffer, MemoryEntry, Shortfall};
pub use tfidf::{tfidf_fit_transform, TfidfModel};
