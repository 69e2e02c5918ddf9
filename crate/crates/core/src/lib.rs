//! Budget allocation for multi-stage LLM pipelines that use repeated
//! sampling: cost normalization, search-space enumeration, evaluation
//! backends, and allocation search strategies.

pub mod archive;
pub mod config;
pub mod costmodel;
pub mod environment;
pub mod searchspace;
pub mod strategies;
