//! Vocabularies, tokenized parallel corpora, word alignments and embedding files.
//!
//! Input is expected to be pre-tokenized: tokens are whitespace-separated and
//! out-of-vocabulary words map to `<unk>`.

mod embeddings;
mod parallel;
mod vocab;

pub use embeddings::{load_word2vec_text, read_word2vec_text, EmbeddingTable, LoadReport};
pub use parallel::{read_parallel, AlignmentLinks, ParallelExample, SentenceIds};
pub use vocab::{Vocabulary, BOS, EOS, PAD, RESERVED, UNK};
