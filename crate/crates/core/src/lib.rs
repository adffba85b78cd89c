//! Desk-scale user behavior modeling pipeline: timestamp-aware sequence
//! construction, semantic/business multi-modal fusion, target-aware causal
//! decoding, contrastive training and retrieval evaluation.

pub mod blocks;
pub mod business;
pub mod datagen;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod params;
pub mod pipeline;
pub mod qformer;
pub mod semantic;
pub mod tensor;
pub mod timestamp;
pub mod training;

pub use error::LumError;
