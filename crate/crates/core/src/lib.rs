//! Hierarchical label-wise attention for explainable multi-label document
//! coding: preprocessing and chunking of long documents, a pluggable chunk
//! encoder, a two-level label-wise attention head with per-label sigmoid
//! classifiers, training with decoupled weight decay, multi-label metrics,
//! and attention-based explanation reports.

pub mod checkpoint;
pub mod encoder;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod synthgen;
pub mod tensor;
pub mod textprep;
pub mod train;
