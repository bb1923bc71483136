//! Cluster a catalog of single-task LoRA adapters into a fixed budget of
//! clusters and merge each cluster into one multi-task adapter.
//!
//! The clustering can come from data-free baselines (random, k-means on
//! weights, k-means on SVD features, Dirichlet sampling) or from a
//! data-driven local search that scores proposals with a [`LossOracle`].

pub mod baseline;
pub mod merge;
pub mod metrics;
pub mod oracle;
pub mod partition;
pub mod search;
pub mod tensor_store;

pub use baseline::{features_flat, features_svd, kmeans, FeatureMatrix, KMeansOptions};
pub use merge::{merge, MergeConfig, MergeMethod};
pub use oracle::{ExternalOracle, LossOracle, SyntheticSpec, SyntheticTaskModel};
pub use partition::{random_partition, storage_fraction, PartitionMap};
pub use search::{d2c_run, evaluate_partition, SearchConfig, SearchTrace};
pub use tensor_store::{AdapterMeta, AdapterSet, LoraAdapter, Matrix, Schema, TensorMap};
