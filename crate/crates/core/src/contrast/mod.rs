//! The key queue, the InfoNCE instance loss, local k-means, the cross-level
//! group loss and their weighted combination.

mod cld;
mod infonce;
mod kmeans;
mod queue;
mod total;

pub use cld::{cld_batch, cld_loss, GroupLoss};
pub use infonce::{infonce, infonce_batch, InstanceLoss};
pub use kmeans::{centroids_from_members, local_kmeans, local_kmeans_traced, ClusterResult, KMeansStep};
pub use queue::KeyQueue;
pub use total::{compose, total_loss, Embeddings, LossConfig, TotalLoss};
