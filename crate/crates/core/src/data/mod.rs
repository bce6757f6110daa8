//! Tokenization, sequence concatenation, corruption and batching.

pub mod batch;
pub mod bpe;
pub mod corpus;
pub mod example;
pub mod vocab;

pub use batch::{Draw, MixedStream, Origin, TokenBatcher};
pub use bpe::BpeModel;
pub use corpus::{MonoSentence, Pair, Segmenter};
pub use example::{example_rng, ConcatExample, NoiseSpec, Reconstruction};
pub use vocab::{TagSet, TokenId, Vocab};
