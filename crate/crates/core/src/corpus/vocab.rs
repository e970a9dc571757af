use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK: u32 = 0;
pub const PAD: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;

pub const RESERVED: [&str; 4] = ["<unk>", "<pad>", "<s>", "</s>"];

/// Word ↔ id bijection with the four reserved tokens at ids 0..3.
///
/// Non-reserved words are stored frequency-descending, ties broken
/// lexicographically, so truncating a vocabulary to its first `n` ids keeps
/// the `n - 4` most frequent words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn with_reserved() -> Self {
        let mut v = Vocabulary {
            words: Vec::new(),
            freqs: Vec::new(),
            index: HashMap::new(),
        };
        for w in RESERVED {
            v.push(w.to_string(), 0);
        }
        v
    }

    fn push(&mut self, word: String, freq: u64) {
        self.index.insert(word.clone(), self.words.len() as u32);
        self.words.push(word);
        self.freqs.push(freq);
    }

    /// Builds a vocabulary from a token stream, keeping the `max_size` most
    /// frequent words. Literal reserved tokens in the stream are ignored.
    pub fn build<I, S>(tokens: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut seen_any = false;
        for tok in tokens {
            seen_any = true;
            let tok = tok.as_ref();
            if RESERVED.contains(&tok) {
                continue;
            }
            *counts.entry(tok.to_string()).or_default() += 1;
        }
        if !seen_any {
            return Err(Error::EmptyCorpus);
        }
        let mut entries: Vec<(String, u64)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        entries.truncate(max_size);

        let mut v = Self::with_reserved();
        for (w, f) in entries {
            v.push(w, f);
        }
        Ok(v)
    }

    /// Vocabulary over whitespace-tokenized lines.
    pub fn build_from_lines<'a, I>(lines: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        Self::build(lines.into_iter().flat_map(str::split_whitespace), max_size)
    }

    /// Rebuilds from an ordered word list (snapshots); the first four entries
    /// must be the reserved tokens.
    pub fn from_words(words: Vec<String>, freqs: Vec<u64>) -> Result<Self> {
        if words.len() != freqs.len() {
            return Err(Error::dims("Vocabulary::from_words", words.len(), freqs.len()));
        }
        if words.len() < RESERVED.len() || words[..4].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::InvalidArgument("vocabulary must start with the reserved tokens".into()));
        }
        let mut v = Vocabulary {
            words: Vec::with_capacity(words.len()),
            freqs: Vec::with_capacity(words.len()),
            index: HashMap::with_capacity(words.len()),
        };
        for (w, f) in words.into_iter().zip(freqs) {
            if v.index.contains_key(&w) {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary word {w:?}")));
            }
            v.push(w, f);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    /// Id of `word`, falling back to `<unk>`.
    pub fn id_or_unk(&self, word: &str) -> u32 {
        self.id(word).unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn freq(&self, id: u32) -> u64 {
        self.freqs.get(id as usize).copied().unwrap_or(0)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn freqs(&self) -> &[u64] {
        &self.freqs
    }

    pub fn encode(&self, tokens: &[&str]) -> Vec<u32> {
        tokens.iter().map(|t| self.id_or_unk(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.word(i).unwrap_or("<unk>")).collect()
    }

    /// Writes `word<TAB>frequency` lines, frequency-descending, reserved
    /// tokens omitted.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for (w, f) in self.words.iter().zip(&self.freqs).skip(RESERVED.len()) {
            writeln!(out, "{w}\t{f}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(File::create(path)?);
        self.write(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut v = Self::with_reserved();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (w, f) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, lineno + 1, "expected word<TAB>frequency"))?;
            let f = f
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, lineno + 1, format!("bad frequency {f:?}")))?;
            if v.index.contains_key(w) {
                return Err(Error::parse(path, lineno + 1, format!("duplicate word {w:?}")));
            }
            v.push(w.to_string(), f);
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order_then_lexicographic() {
        let v = Vocabulary::build_from_lines(["a a b"], 10).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));

        let v = Vocabulary::build_from_lines(["b a"], 5).unwrap();
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
    }

    #[test]
    fn reserved_ids_fixed() {
        let v = Vocabulary::build_from_lines(["x <unk> y"], 10).unwrap();
        for (i, w) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(w), Some(i as u32));
        }
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn truncates_to_max_size() {
        let tokens: Vec<String> = (0..50_000).map(|i| format!("w{i}")).collect();
        let v = Vocabulary::build(&tokens, 16_000).unwrap();
        assert_eq!(v.len(), 16_004);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            Vocabulary::build(Vec::<String>::new(), 10),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn round_trip_ids_words() {
        let v = Vocabulary::build_from_lines(["the cat sat on the mat"], 100).unwrap();
        let ids = v.encode(&["the", "mat", "cat"]);
        let words = v.decode(&ids);
        assert_eq!(v.encode(&words), ids);
        assert_eq!(v.id_or_unk("dog"), UNK);
    }

    #[test]
    fn vocab_file_is_deterministic_and_reloads() {
        let text = "c b a c b c d d d d";
        let mut first = Vec::new();
        Vocabulary::build_from_lines([text], 10).unwrap().write(&mut first).unwrap();
        let mut second = Vec::new();
        Vocabulary::build_from_lines([text], 10).unwrap().write(&mut second).unwrap();
        assert_eq!(first, second);
        assert_eq!(String::from_utf8(first.clone()).unwrap(), "d\t4\nc\t3\nb\t2\na\t1\n");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        std::fs::write(&path, &first).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded, Vocabulary::build_from_lines([text], 10).unwrap());
    }
}
