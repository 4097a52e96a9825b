//! Masked caption prompting for generative data augmentation.
//!
//! The pipeline captions a handful of labelled images, masks nouns and
//! adjectives in each caption, has a language model fill the masks back in,
//! renders the completions as text-to-image prompts, and trains a linear probe
//! on frozen embeddings of real plus synthetic images.
//!
//! Stage modules:
//! * [`corpus`]: dataset indexing and few-shot splits
//! * [`lingua`]: tokenization, tagging, masking
//! * [`promptkit`]: prompt templates and the LLM steps
//! * [`synth`]: text-to-image generation with provenance
//! * [`embed`]: embedding providers and the `EMBV1` format
//! * [`probe`]: the linear classifier and its optimizer
//! * [`metrics`]: accuracy, SSIM, feature diversity, CMMD, word frequencies
//! * [`pipeline`]: experiment configuration and orchestration

pub mod backend;
pub mod cli;
pub mod corpus;
pub mod embed;
pub mod lingua;
pub mod metrics;
pub mod mock;
pub mod pipeline;
pub mod probe;
pub mod promptkit;
pub mod rng;
pub mod synth;

pub use corpus::{DatasetIndex, FewShotSplit, ImageRecord, Split, StyleLabel};
pub use lingua::{MaskedCaption, TaggedCaption};
pub use promptkit::{CompletedCaption, PromptStrategy};
