//! Playlist continuation built from ad-hoc retrieval parts.
//!
//! Background playlists are indexed three ways: as bags of track ids (for
//! relevance-model expansion), and as two kinds of per-track text
//! pseudo-documents (for BM25 title search). Four track-embedding variants add
//! nearest-neighbour candidates. A LambdaMART ranker fuses the seven candidate
//! lists and the final list is padded by popularity to exactly 500 tracks.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! bottom of this file fix the precisions used by the pipeline.

pub mod binio;
pub mod corpus;
pub mod embed;
pub mod eval;
pub mod features;
pub mod index;
pub mod ltr;
pub mod pipeline;
pub mod rank_pipeline;
pub mod retrieval;
pub mod scalar;
pub mod splits;

pub use corpus::{AlbumId, ArtistId, BackgroundStats, Corpus, PlaylistRecord, TrackId};
pub use scalar::Scalar;
pub use splits::{Category, CorpusSplit, SplitPlaylist};

/// Embeddings are stored and searched in single precision.
pub type Embeddings = embed::EmbeddingMatrix<f32>;

/// Ranking model, features and candidate scores use double precision.
pub type Candidates = retrieval::CandidateList<f64>;
pub type Features = features::FeatureVector<f64>;
pub type Example = features::RankingExample<f64>;
pub type Ranker = ltr::LtrModel<f64>;

