//! Sharer selection, sharer adapter training and gate training.

pub mod corpus;
mod select;
mod train;

pub use corpus::{Corpus, EncodedItem, HistoryItem, ItemKind, Query, SplitManifest, UserRecord};
pub use select::{
    embed_profile, embed_sequences, embed_user, kmeans, select_sharers, Candidate, ClusterResult, KMeans,
    SelectionStrategy, UserEmbedding,
};
pub use train::{
    adapt_base, base_examples, train_gates, train_sharer, train_user_adapter, user_seed, BaseReport, BaseTrainConfig,
    SharerArtifacts,
};
