//! Semi-supervised event-type induction.
//!
//! A small attention head is trained over minibatches of frozen sentence
//! embeddings so that its pairwise attention logits separate event types.
//! Types with labels supervise the logits directly; unlabeled mentions of
//! unknown types are left free and later grouped by clustering the learned
//! similarities.
//!
//! ```
//! use evinduce::dataio::SyntheticSpec;
//! use evinduce::training::{train, TrainConfig};
//!
//! let spec = SyntheticSpec {
//!     seed: 1,
//!     n_seen_types: 2,
//!     n_unseen_types: 3,
//!     per_type: 5,
//!     d: 8,
//!     noise_sigma: 0.1,
//!     aug_sigma: 0.02,
//! };
//! let dataset = spec.generate()?;
//! let config = TrainConfig { max_epochs: 2, ..TrainConfig::default() };
//! let outcome = train(&dataset, &config, None)?;
//! assert_eq!(outcome.trace.epochs.len(), 2);
//! # Ok::<(), evinduce::Error>(())
//! ```

pub mod clusterer;
pub mod clustering;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod losses;
pub mod pipeline;
pub mod supervision;
pub mod training;

pub use clusterer::{ClustererConfig, ClustererParams};
pub use clustering::{Clustering, DistanceMatrix};
pub use dataio::{EmbeddingDataset, FrameHierarchy, NameCorpus, SyntheticSpec, TypeTag};
pub use error::{Error, Result};
pub use evaluation::{MetricReport, RankingReport};
pub use pipeline::RunConfig;
pub use training::{TrainConfig, TrainTrace};
