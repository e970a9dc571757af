//! Seeded synthetic parallel corpora for training and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::{AlignmentLinks, ParallelExample, SentenceIds, Vocabulary};
use crate::error::{Error, Result};
use crate::math::Rng;
use crate::snapshot::write_atomic;

/// Source marker words of the disambiguation corpus and their translations.
pub const MARKERS: [(&str, &str); 2] = [("ma", "na"), ("mb", "nb")];
/// The ambiguous source word and its two translations, indexed like
/// [`MARKERS`].
pub const AMBIGUOUS: (&str, [&str; 2]) = ("amb", ["ya", "yb"]);
/// Closest position the ambiguous word may take to the marker at index 0.
pub const MIN_AMBIGUOUS_POSITION: usize = 6;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SyntheticCorpus {
    pub source: Vec<Vec<String>>,
    pub target: Vec<Vec<String>>,
    pub alignment: Vec<AlignmentLinks>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    /// Word-by-word dictionary translation, 5–15 tokens.
    Dictionary,
    /// Dictionary translation of 20–30 token sentences.
    Long,
    /// One ambiguous word whose translation is fixed by a sentence-initial
    /// marker far outside any local window.
    Disambiguation,
    /// Target words drawn from a fixed noisy conditional distribution over
    /// a 16-word vocabulary given the aligned source word.
    Noisy,
}

impl CorpusKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dictionary" => Ok(CorpusKind::Dictionary),
            "long" => Ok(CorpusKind::Long),
            "disambiguation" => Ok(CorpusKind::Disambiguation),
            "noisy" => Ok(CorpusKind::Noisy),
            other => Err(Error::InvalidArgument(format!("unknown corpus kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub kind: CorpusKind,
    pub pairs: usize,
    /// Content words per side.
    pub vocab: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(kind: CorpusKind, pairs: usize, seed: u64) -> Self {
        let vocab = match kind {
            CorpusKind::Dictionary | CorpusKind::Long => 500,
            CorpusKind::Disambiguation => 100,
            CorpusKind::Noisy => 16,
        };
        SyntheticConfig { kind, pairs, vocab, seed }
    }
}

/// Seeded permutation of `0..n`: the dictionary shared by every corpus
/// drawn with the same seed family.
fn dictionary(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    Rng::new(seed).derive(0xD1C7).shuffle(&mut perm);
    perm
}

/// Row-stochastic table `p(target | source)` over `n` words: mass 0.5 on
/// the dictionary translation, the rest spread by seeded random weights.
pub fn noisy_conditionals(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let perm = dictionary(n, seed);
    let mut rng = Rng::new(seed).derive(0xC0D);
    (0..n)
        .map(|s| {
            let raw: Vec<f64> = (0..n).map(|_| rng.unit() + 0.05).collect();
            let total: f64 = raw.iter().sum();
            let mut row: Vec<f64> = raw.iter().map(|r| 0.5 * r / total).collect();
            row[perm[s]] += 0.5;
            row
        })
        .collect()
}

fn sample_row(row: &[f64], rng: &mut Rng) -> usize {
    let u = rng.unit();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.len() - 1
}

/// Generates a corpus. The dictionary depends only on `seed`, so a
/// training and a test corpus drawn with different `stream`s share it.
pub fn generate(config: &SyntheticConfig, stream: u64) -> Result<SyntheticCorpus> {
    if config.vocab == 0 {
        return Err(Error::InvalidArgument("synthetic vocabulary must be non-empty".into()));
    }
    let perm = dictionary(config.vocab, config.seed);
    let noisy = (config.kind == CorpusKind::Noisy).then(|| noisy_conditionals(config.vocab, config.seed));
    let root = Rng::new(config.seed).derive(stream.wrapping_add(1));
    let mut corpus = SyntheticCorpus::default();
    for p in 0..config.pairs {
        let mut rng = root.derive(p as u64);
        let (lo, hi) = match config.kind {
            CorpusKind::Dictionary => (5, 15),
            CorpusKind::Long => (20, 30),
            CorpusKind::Disambiguation => (MIN_AMBIGUOUS_POSITION + 2, 16),
            CorpusKind::Noisy => (4, 10),
        };
        let len = lo + rng.below(hi - lo + 1);
        let content: Vec<usize> = (0..len).map(|_| rng.below(config.vocab)).collect();
        let mut src: Vec<String> = content.iter().map(|&w| format!("s{w}")).collect();
        let mut tgt: Vec<String> = match &noisy {
            Some(table) => content.iter().map(|&w| format!("t{}", sample_row(&table[w], &mut rng))).collect(),
            None => content.iter().map(|&w| format!("t{}", perm[w])).collect(),
        };
        if config.kind == CorpusKind::Disambiguation {
            let sense = rng.below(2);
            src[0] = MARKERS[sense].0.to_string();
            tgt[0] = MARKERS[sense].1.to_string();
            let pos = MIN_AMBIGUOUS_POSITION + rng.below(len - MIN_AMBIGUOUS_POSITION);
            src[pos] = AMBIGUOUS.0.to_string();
            tgt[pos] = AMBIGUOUS.1[sense].to_string();
        }
        corpus.alignment.push(AlignmentLinks::new((0..len).map(|i| (i, i)).collect()));
        corpus.source.push(src);
        corpus.target.push(tgt);
    }
    Ok(corpus)
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn source_vocab(&self) -> Result<Vocabulary> {
        Vocabulary::build(self.source.iter().flatten(), usize::MAX)
    }

    pub fn target_vocab(&self) -> Result<Vocabulary> {
        Vocabulary::build(self.target.iter().flatten(), usize::MAX)
    }

    pub fn examples(&self, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Result<Vec<ParallelExample>> {
        self.source
            .iter()
            .zip(&self.target)
            .zip(&self.alignment)
            .map(|((s, t), a)| {
                let s: Vec<&str> = s.iter().map(String::as_str).collect();
                let t: Vec<&str> = t.iter().map(String::as_str).collect();
                ParallelExample::new(
                    SentenceIds::new(src_vocab.encode(&s))?,
                    SentenceIds::new(tgt_vocab.encode(&t))?,
                    Some(a.clone()),
                )
            })
            .collect()
    }

    fn lines(sentences: &[Vec<String>]) -> String {
        let mut out = String::new();
        for s in sentences {
            out.push_str(&s.join(" "));
            out.push('\n');
        }
        out
    }

    /// Writes `{prefix}.src`, `{prefix}.tgt` and `{prefix}.align` into `dir`.
    pub fn write(&self, dir: &Path, prefix: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut align = String::new();
        for a in &self.alignment {
            writeln!(align, "{a}").expect("write to string");
        }
        write_atomic(&dir.join(format!("{prefix}.src")), Self::lines(&self.source).as_bytes())?;
        write_atomic(&dir.join(format!("{prefix}.tgt")), Self::lines(&self.target).as_bytes())?;
        write_atomic(&dir.join(format!("{prefix}.align")), align.as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dictionary_corpus_shape() {
        let c = generate(&SyntheticConfig::new(CorpusKind::Dictionary, 300, 4), 0).unwrap();
        assert_eq!(c.len(), 300);
        for ((s, t), a) in c.source.iter().zip(&c.target).zip(&c.alignment) {
            assert!((5..=15).contains(&s.len()));
            assert_eq!(s.len(), t.len());
            assert_eq!(a.links().len(), s.len());
        }
        // Each source word always receives the same translation.
        let mut seen = std::collections::BTreeMap::new();
        for (s, t) in c.source.iter().flatten().zip(c.target.iter().flatten()) {
            assert_eq!(seen.entry(s.clone()).or_insert_with(|| t.clone()), t);
        }
    }

    #[test]
    fn streams_share_the_dictionary() {
        let cfg = SyntheticConfig::new(CorpusKind::Dictionary, 50, 4);
        let a = generate(&cfg, 0).unwrap();
        let b = generate(&cfg, 1).unwrap();
        assert_ne!(a, b);
        let map: std::collections::BTreeMap<_, _> = a.source.iter().flatten().zip(a.target.iter().flatten()).collect();
        for (s, t) in b.source.iter().flatten().zip(b.target.iter().flatten()) {
            if let Some(&&ref expected) = map.get(s) {
                assert_eq!(expected, t);
            }
        }
    }

    #[test]
    fn long_corpus_lengths() {
        let c = generate(&SyntheticConfig::new(CorpusKind::Long, 100, 2), 0).unwrap();
        assert!(c.source.iter().all(|s| (20..=30).contains(&s.len())));
    }

    #[test]
    fn disambiguation_layout() {
        let c = generate(&SyntheticConfig::new(CorpusKind::Disambiguation, 400, 3), 0).unwrap();
        let mut senses = [0, 0];
        for (s, t) in c.source.iter().zip(&c.target) {
            let sense = MARKERS.iter().position(|m| m.0 == s[0]).unwrap();
            senses[sense] += 1;
            assert_eq!(t[0], MARKERS[sense].1);
            let positions: Vec<usize> = (0..s.len()).filter(|&i| s[i] == AMBIGUOUS.0).collect();
            assert_eq!(positions.len(), 1);
            assert!(positions[0] >= MIN_AMBIGUOUS_POSITION);
            assert_eq!(t[positions[0]], AMBIGUOUS.1[sense]);
            assert_eq!(s.iter().filter(|w| MARKERS.iter().any(|m| m.0 == w.as_str())).count(), 1);
        }
        assert!(senses[0] > 150 && senses[1] > 150);
    }

    #[test]
    fn noisy_rows_are_distributions() {
        for row in noisy_conditionals(16, 5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
        let c = generate(&SyntheticConfig::new(CorpusKind::Noisy, 50, 5), 0).unwrap();
        assert!(c.target_vocab().unwrap().len() <= 20);
    }

    #[test]
    fn files_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig::new(CorpusKind::Disambiguation, 30, 9);
        generate(&cfg, 0).unwrap().write(dir.path(), "a").unwrap();
        generate(&cfg, 0).unwrap().write(dir.path(), "b").unwrap();
        for ext in ["src", "tgt", "align"] {
            let a = fs::read(dir.path().join(format!("a.{ext}"))).unwrap();
            let b = fs::read(dir.path().join(format!("b.{ext}"))).unwrap();
            assert_eq!(a, b);
            assert!(!a.is_empty());
        }
    }
}
