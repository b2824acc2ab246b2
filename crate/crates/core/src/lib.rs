//! Video knowledge bases and synset knowledge graphs built from multimodal
//! dataflow pipelines over time-aligned data windows.

pub mod adapters;
pub mod graph;
pub mod inference;
pub mod kb;
pub mod keyframe;
pub mod learning;
pub mod lexicon;
pub mod pipeline;
pub mod recipe;
pub mod relations;
pub mod retrieval;
pub mod segment;
pub mod store;
pub mod text;
pub mod window;
