//! Generative segmentation, likelihood-ratio OoD detection, clustered
//! embedding retrieval and parameter-isolated class-incremental learning
//! over feature grids.

pub mod continual;
pub mod error;
pub mod gmm;
pub mod grid;
pub mod io;
pub mod math;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod ood;
pub mod pipeline;
pub mod retrieval;
pub mod samples;
pub mod synth;

pub use error::{Error, ErrorKind, FormatError, Result};
pub use gmm::{fit_gmm_em, sinkhorn_responsibilities, DiagGaussian, Mixture, SinkhornConfig};
pub use grid::{ClassId, ClassOrigin, ClassRecord, ClassRegistry, FeatureGrid, LabelGrid, IGNORE, OOD};
pub use model::{Decoder, DecoderConfig, DecoderKind, GmmClassModel, GridPrediction, TrainConfig};
pub use retrieval::{EmbeddingIndex, EmbeddingRecord, Hit, IndexConfig, Modality, Provenance, SimilarityBand};
pub use samples::Samples;
pub use continual::{AdaptiveHead, ContinualConfig, LearnReport};
pub use ood::{InlierTerm, OodComponent, OodConfig, OodScorer};
