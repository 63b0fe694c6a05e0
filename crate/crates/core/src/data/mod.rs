//! Synthetic scenes, caption grammars, vocabulary and corpus files.

pub mod corpus;
pub mod image;
pub mod language;
pub mod scene;
pub mod vocab;

pub use corpus::{build_corpus, Corpus, CorpusSample, CorpusSpec, Languages, Split};
pub use image::Image;
pub use language::{LanguageSpec, WordOrder};
pub use scene::{Color, Object, Scene, Shape};
pub use vocab::Vocabulary;
