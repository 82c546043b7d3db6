//! Corpus-to-dataset-to-evaluation toolkit: recursive chunking, exact
//! retrieval, two-agent instruction synthesis, MCQ evaluation, NF4/LoRA
//! forward algebra and energy accounting.

pub mod answers;
pub mod bench;
pub mod config;
pub mod corpus;
pub mod energy;
pub mod exec;
pub mod index;
pub mod llm;
pub mod numeric;
pub mod pipeline;
pub mod prompts;
pub mod qlora;
pub mod questions;
