//! Deterministic synthetic world: scenes, renderings, captions,
//! paraphrases, hard negatives and evaluation suites.
//!
//! Captions follow a single grammar,
//! `the ATTR NOUN is REL the ATTR NOUN`, so every generated sentence can be
//! parsed back into the scene it describes.

mod benchmark;
mod caption;
mod dataset;
mod noise;
pub mod rng;
mod scene;
pub mod vocab;

#[cfg(test)]
mod tests;

pub use benchmark::{
    build_benchmark, build_benchmark_with, BenchmarkItem, SuiteKind, PARAPHRASE_SUITE_NEGATIVES,
};
pub use caption::{
    available_categories, caption_set, caption_with_template, make_hard_negatives,
    make_negative_of, make_paraphrase, parse_caption, word_distance, CaptionRecord, NegCategory,
    ParsedCaption, Role, Template, CAPTION_SET_TEMPLATES,
};
pub use dataset::{Dataset, SceneEntry};
pub use noise::inject_paraphrase_noise;
pub use scene::{generate_scenes, render_image, split_scenes, ImageRendering, Meaning, Object, Scene};
pub use vocab::{TokenId, BOS, EOS, PAD, TEXT_VOCAB, VISUAL_OFFSET, VISUAL_VOCAB};
