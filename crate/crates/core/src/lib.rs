//! Contextualized rewriting for extractive-abstractive summarization.
//!
//! Sentence alignments between a document and its summary are expressed as
//! group tags: every token carries the number of the sentence group it
//! belongs to, and a small encoder-decoder adds a learned embedding of that
//! number on both sides. The same machinery covers rewriting the output of an
//! external extractor and joint selection-plus-rewriting, where selecting a
//! sentence is just predicting its identifier token.

pub mod align;
pub mod analysis;
pub mod decode;
pub mod error;
pub mod model;
pub mod rouge;
pub mod synth;
pub mod textcore;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/group-tags.md")]
    mod group_tags {}
    #[doc = include_str!("../../../book/src/oracle.md")]
    mod oracle {}
    #[doc = include_str!("../../../book/src/layouts.md")]
    mod layouts {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
